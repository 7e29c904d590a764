"""Signed distance grids, analytic primitives, CSG and simplex perturbation.

Conventions
-----------
* Distances are negative inside, positive outside.
* A grid of resolution ``N`` stores ``values[i, j, k]`` for the voxel centre
  ``origin + spacing * (i, j, k)``; axis 0 is x.
* Values are float32 and clamped to ``[-truncation, +truncation]``; the
  default truncation ``TAU`` is expressed in normalized shape units where the
  local context occupies ``[-0.9, 0.9]^3``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _backend
from .errors import (
    DataIOError,
    GridMismatchError,
    NonFiniteFieldError,
    ValidationError,
)

TAU = 0.25

SDFG_MAGIC = b"SDFG"
SDFG_VERSION = 1
_SDFG_HEADER = struct.Struct("<4sII3dd")


@dataclass(frozen=True, eq=False)
class SdfGrid:
    resolution: int
    origin: np.ndarray
    spacing: float
    values: np.ndarray
    truncation: float = TAU

    def __post_init__(self):
        n = int(self.resolution)
        if n < 2:
            raise ValidationError(f"resolution must be >= 2, got {n}")
        if not self.spacing > 0:
            raise ValidationError(f"spacing must be positive, got {self.spacing}")
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        values = np.asarray(self.values, dtype=np.float32)
        if values.shape != (n, n, n):
            raise ValidationError(f"values shape {values.shape} != {(n, n, n)}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("grid values must be finite")
        if np.abs(values).max(initial=0.0) > np.float32(self.truncation):
            raise ValidationError("grid values exceed the truncation bound")
        values = values.copy() if values.flags.writeable else values
        values.flags.writeable = False
        origin.flags.writeable = False
        object.__setattr__(self, "resolution", n)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "truncation", float(self.truncation))

    @classmethod
    def filled(cls, resolution, origin, spacing, value, truncation=TAU):
        values = np.full((resolution,) * 3, value, dtype=np.float32)
        return cls(resolution, origin, spacing, values, truncation)

    @property
    def spec(self):
        return (self.resolution, tuple(self.origin.tolist()), self.spacing)

    def same_spec(self, other: "SdfGrid") -> bool:
        return self.spec == other.spec

    def check_spec(self, other: "SdfGrid"):
        if not self.same_spec(other):
            raise GridMismatchError(f"grid spec mismatch: {self.spec} vs {other.spec}")

    def points(self) -> np.ndarray:
        """World-space voxel centres, shape (N, N, N, 3)."""
        idx = np.arange(self.resolution, dtype=np.float64)
        axes = [self.origin[d] + self.spacing * idx for d in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def unit_coords(self) -> np.ndarray:
        """Voxel centres in [0, 1]^3 grid coordinates, ``(i + 0.5) / N``."""
        u = (np.arange(self.resolution, dtype=np.float64) + 0.5) / self.resolution
        return np.stack(np.meshgrid(u, u, u, indexing="ij"), axis=-1)

    def with_values(self, values, truncation=None) -> "SdfGrid":
        """New grid on the same spec; ``values`` are clamped to the truncation."""
        tr = self.truncation if truncation is None else truncation
        clamped = np.clip(np.asarray(values, dtype=np.float64), -tr, tr)
        return SdfGrid(self.resolution, self.origin, self.spacing, clamped.astype(np.float32), tr)

    def occupancy(self) -> np.ndarray:
        return self.values < 0

    def world_bounds(self):
        lo = self.origin - 0.5 * self.spacing
        return lo, lo + self.spacing * self.resolution

    def save(self, path):
        write_sdfg(self, path)

    @classmethod
    def load(cls, path) -> "SdfGrid":
        return read_sdfg(path)


def cube_grid(resolution: int, lo: float = -1.0, hi: float = 1.0):
    """(origin, spacing) of an N^3 voxel partition of the cube [lo, hi]^3."""
    spacing = (hi - lo) / resolution
    return np.full(3, lo + 0.5 * spacing), spacing


def write_sdfg(grid: SdfGrid, path):
    header = _SDFG_HEADER.pack(
        SDFG_MAGIC, SDFG_VERSION, grid.resolution, *grid.origin.tolist(), grid.spacing
    )
    payload = np.asarray(grid.values, dtype="<f4").ravel(order="F").tobytes()
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_sdfg(path) -> SdfGrid:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _SDFG_HEADER.size:
        raise DataIOError(f"{path}: truncated header")
    magic, version, n, ox, oy, oz, spacing = _SDFG_HEADER.unpack_from(raw)
    if magic != SDFG_MAGIC:
        raise DataIOError(f"{path}: bad magic {magic!r}")
    if version != SDFG_VERSION:
        raise DataIOError(f"{path}: unsupported version {version}")
    body = raw[_SDFG_HEADER.size:]
    if len(body) != 4 * n ** 3:
        raise DataIOError(f"{path}: expected {4 * n ** 3} value bytes, got {len(body)}")
    values = np.frombuffer(body, dtype="<f4").reshape((n, n, n), order="F").astype(np.float32)
    tr = max(TAU, float(np.abs(values).max(initial=0.0)))
    return SdfGrid(n, (ox, oy, oz), spacing, values, tr)


def sample_to_grid(field: Callable[[np.ndarray], np.ndarray], resolution, origin, spacing,
                   truncation=TAU) -> SdfGrid:
    """Evaluate a vectorized field ``(M, 3) -> (M,)`` at every voxel centre."""
    if resolution < 2:
        raise ValidationError(f"resolution must be >= 2, got {resolution}")
    probe = SdfGrid.filled(resolution, origin, spacing, 0.0, truncation)
    pts = probe.points().reshape(-1, 3)
    vals = np.asarray(field(pts), dtype=np.float64).reshape(-1)
    if vals.shape[0] != pts.shape[0]:
        vals = np.broadcast_to(vals, (pts.shape[0],))
    bad = ~np.isfinite(vals)
    if bad.any():
        flat = int(np.argmax(bad))
        raise NonFiniteFieldError(np.unravel_index(flat, (resolution,) * 3))
    return probe.with_values(vals.reshape((resolution,) * 3))


def _binary(a: SdfGrid, b: SdfGrid, op) -> SdfGrid:
    a.check_spec(b)
    return a.with_values(op(a.values, b.values))


def csg_union(a: SdfGrid, b: SdfGrid) -> SdfGrid:
    return _binary(a, b, np.minimum)


def csg_intersection(a: SdfGrid, b: SdfGrid) -> SdfGrid:
    return _binary(a, b, np.maximum)


def csg_difference(a: SdfGrid, b: SdfGrid) -> SdfGrid:
    """Material of ``a`` with ``b`` carved out: ``max(a, -b)``."""
    return _binary(a, b, lambda x, y: np.maximum(x, -y))


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

PRIMITIVE_KINDS = ("sphere", "cube", "cylinder", "capsule", "cone")

_N_PARAMS = {"sphere": 1, "cube": 3, "cylinder": 2, "capsule": 2, "cone": 2}


@dataclass(frozen=True, eq=False)
class Primitive:
    """Analytic solid in a local frame, placed by ``world = R @ (scale * local) + t``.

    Local parameterisations (all axes along local z):

    - sphere: ``(radius,)``
    - cube: ``(hx, hy, hz)`` half-extents
    - cylinder: ``(radius, half_height)``
    - capsule: ``(radius, half_length)`` of the core segment
    - cone: ``(base_radius, half_height)``, base at ``z=-h``, apex at ``z=+h``
    """

    kind: str
    params: tuple
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValidationError(f"unknown primitive kind {self.kind!r}")
        params = tuple(float(p) for p in self.params)
        if len(params) != _N_PARAMS[self.kind]:
            raise ValidationError(f"{self.kind} takes {_N_PARAMS[self.kind]} size parameters")
        if not all(p > 0 and np.isfinite(p) for p in params):
            raise ValidationError(f"size parameters must be positive, got {params}")
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise ValidationError("rotation must be orthonormal with det +1")
        scale = np.broadcast_to(np.asarray(self.scale, dtype=np.float64), (3,)).copy()
        if not np.all(scale > 0):
            raise ValidationError("scale must be positive on every axis")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", scale)

    def interior_point(self) -> np.ndarray:
        """A point strictly inside (the centroid), in world coordinates."""
        local = np.zeros(3)
        if self.kind == "cone":
            local[2] = -0.5 * self.params[1]
        return self.rotation @ (self.scale * local) + self.translation

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "params": list(self.params),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_description(cls, d: dict) -> "Primitive":
        return cls(d["kind"], tuple(d["params"]), np.array(d["rotation"]),
                   np.array(d["translation"]), np.array(d["scale"]))


def _length(v):
    return np.sqrt(np.sum(v * v, axis=-1))


def _sd_sphere(q, r):
    return _length(q) - r


def _sd_box(q, h):
    d = np.abs(q) - np.asarray(h)
    return _length(np.maximum(d, 0.0)) + np.minimum(d.max(axis=-1), 0.0)


def _sd_cylinder(q, r, h):
    dx = np.hypot(q[:, 0], q[:, 1]) - r
    dz = np.abs(q[:, 2]) - h
    outside = np.hypot(np.maximum(dx, 0.0), np.maximum(dz, 0.0))
    return np.minimum(np.maximum(dx, dz), 0.0) + outside


def _sd_capsule(q, r, h):
    core = np.zeros_like(q)
    core[:, 2] = np.clip(q[:, 2], -h, h)
    return _length(q - core) - r


def _sd_cone(q, r, h):
    # exact capped cone with top radius 0, worked in the (radial, axial) half-plane
    qx = np.hypot(q[:, 0], q[:, 1])
    qy = q[:, 2]
    k2x, k2y = -r, 2.0 * h
    ca_x = qx - np.minimum(qx, np.where(qy < 0.0, r, 0.0))
    ca_y = np.abs(qy) - h
    s = np.clip(((0.0 - qx) * k2x + (h - qy) * k2y) / (k2x * k2x + k2y * k2y), 0.0, 1.0)
    cb_x = qx + k2x * s
    cb_y = qy - h + k2y * s
    sign = np.where((cb_x < 0.0) & (ca_y < 0.0), -1.0, 1.0)
    return sign * np.sqrt(np.minimum(ca_x * ca_x + ca_y * ca_y, cb_x * cb_x + cb_y * cb_y))


def eval_primitive(prim: Primitive, points) -> np.ndarray:
    """Signed distance of ``prim`` at ``points`` (shape (..., 3)).

    Exact for unit scale; with anisotropic scale the local distance is
    multiplied by the smallest scale factor, a conservative bound whose zero
    level set is still exact.
    """
    pts = np.asarray(points, dtype=np.float64)
    shape = pts.shape[:-1]
    q = ((pts.reshape(-1, 3) - prim.translation) @ prim.rotation) / prim.scale
    p = prim.params
    if prim.kind == "sphere":
        d = _sd_sphere(q, p[0])
    elif prim.kind == "cube":
        d = _sd_box(q, p)
    elif prim.kind == "cylinder":
        d = _sd_cylinder(q, p[0], p[1])
    elif prim.kind == "capsule":
        d = _sd_capsule(q, p[0], p[1])
    else:
        d = _sd_cone(q, p[0], p[1])
    return (d * prim.scale.min()).reshape(shape)


def box_sdf(points, lo, hi) -> np.ndarray:
    """Exact signed distance to the axis-aligned box [lo, hi]."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    return _sd_box(pts.reshape(-1, 3) - 0.5 * (lo + hi), 0.5 * (hi - lo)).reshape(pts.shape[:-1])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrix (QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# ---------------------------------------------------------------------------
# Simplex noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimplexNoiseParams:
    amplitude: float = 0.06
    frequency: float = 2.8
    seed: int = 0

    def __post_init__(self):
        if not self.amplitude >= 0:
            raise ValidationError(f"amplitude must be >= 0, got {self.amplitude}")
        if not self.frequency > 0:
            raise ValidationError(f"frequency must be > 0, got {self.frequency}")


@lru_cache(maxsize=64)
def _permutation(seed: int) -> np.ndarray:
    perm = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF).permutation(256)
    out = np.ascontiguousarray(np.concatenate([perm, perm]).astype(np.int64))
    out.flags.writeable = False
    return out


def simplex_noise(points, seed: int, backend: str | None = None) -> np.ndarray:
    """Seeded 3-D simplex noise in [-1, 1] at ``points`` (shape (..., 3))."""
    pts = np.asarray(points, dtype=np.float64)
    flat = np.ascontiguousarray(pts.reshape(-1, 3))
    out = _backend.kernels(backend).simplex3(flat, _permutation(seed))
    return np.asarray(out).reshape(pts.shape[:-1])


def perturb_with_simplex(grid: SdfGrid, params: SimplexNoiseParams,
                         backend: str | None = None) -> SdfGrid:
    """Add ``amplitude * s(frequency * v)`` per voxel, ``v`` in unit grid coordinates."""
    if params.amplitude == 0:
        return grid
    noise = simplex_noise(params.frequency * grid.unit_coords(), params.seed, backend)
    return grid.with_values(grid.values.astype(np.float64) + params.amplitude * noise)


def union_all(grids: Sequence[SdfGrid], like: SdfGrid) -> SdfGrid:
    """Union of ``grids``; the empty union is the all-outside grid on ``like``'s spec."""
    out = SdfGrid.filled(like.resolution, like.origin, like.spacing, like.truncation, like.truncation)
    for g in grids:
        out = csg_union(out, g)
    return out
