"""Triangle meshes, labeled dental arches, mesh -> SDF and SDF -> mesh.

Signed distance is the exact unsigned point-triangle distance (nearest
triangle found through a bounding-volume hierarchy) with the sign taken from
the angle-weighted pseudo-normal of the closest feature (face, edge or
vertex). This is exact for closed, consistently oriented meshes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _backend
from .errors import (
    DataIOError,
    EmptyMeshError,
    LabelCountError,
    MeshParseError,
    UnknownFDIError,
    ValidationError,
)
from .geometry import TAU, SdfGrid

log = logging.getLogger(__name__)

VALID_FDI = frozenset([0] + [10 * q + t for q in range(1, 5) for t in range(1, 9)])
UPPER_QUADRANTS = (1, 2)
LOWER_QUADRANTS = (3, 4)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValidationError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def is_empty(self):
        return self.n_faces == 0

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + self.n_faces

    def signed_volume(self) -> float:
        t = self.triangles()
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def submesh(self, face_mask) -> "TriangleMesh":
        """Keep the selected faces and only the vertices they reference."""
        faces = self.faces[np.asarray(face_mask)]
        used, inverse = np.unique(faces, return_inverse=True)
        return TriangleMesh(self.vertices[used], inverse.reshape(-1, 3))

    def transformed(self, fn) -> "TriangleMesh":
        return TriangleMesh(fn(self.vertices), self.faces)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.faces[:, ::-1])

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` points distributed uniformly by area over the surface."""
        if self.is_empty():
            raise EmptyMeshError("cannot sample an empty mesh")
        areas = self.face_areas()
        idx = rng.choice(self.n_faces, size=n, p=areas / areas.sum())
        u = rng.random((n, 2))
        flip = u.sum(axis=1) > 1.0
        u[flip] = 1.0 - u[flip]
        t = self.triangles()[idx]
        return t[:, 0] + u[:, :1] * (t[:, 1] - t[:, 0]) + u[:, 1:] * (t[:, 2] - t[:, 0])


def concatenate(meshes) -> TriangleMesh:
    meshes = [m for m in meshes if m.n_vertices]
    if not meshes:
        return TriangleMesh.empty()
    offsets = np.cumsum([0] + [m.n_vertices for m in meshes[:-1]])
    return TriangleMesh(
        np.concatenate([m.vertices for m in meshes]),
        np.concatenate([m.faces + o for m, o in zip(meshes, offsets)]),
    )


def drop_degenerate_faces(mesh: TriangleMesh, eps: float = 1e-12):
    """Remove zero-area and repeated-index faces; returns (mesh, n_dropped)."""
    f = mesh.faces
    keep = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 2] != f[:, 0])
    keep &= mesh.face_areas() > eps
    n_dropped = int((~keep).sum())
    if n_dropped == 0:
        return mesh, 0
    return TriangleMesh(mesh.vertices, f[keep]), n_dropped


# ---------------------------------------------------------------------------
# OBJ and label I/O
# ---------------------------------------------------------------------------

def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                # fan-triangulate polygons
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        except ValueError as exc:
            raise MeshParseError(f"{path}:{lineno}: {exc}") from exc
    try:
        return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                            np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ValidationError as exc:
        raise MeshParseError(f"{path}: {exc}") from exc


def write_obj(mesh: TriangleMesh, path):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    try:
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


@dataclass(frozen=True, eq=False)
class LabeledArch:
    mesh: TriangleMesh
    labels: np.ndarray
    arch_id: str
    jaw: str

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(labels) != self.mesh.n_vertices:
            raise LabelCountError(
                f"{len(labels)} labels for {self.mesh.n_vertices} vertices"
            )
        bad = sorted(set(np.unique(labels).tolist()) - VALID_FDI)
        if bad:
            raise UnknownFDIError(f"unknown FDI codes {bad}")
        if self.jaw not in ("upper", "lower"):
            raise ValidationError(f"jaw must be 'upper' or 'lower', got {self.jaw!r}")
        object.__setattr__(self, "labels", labels)

    def teeth(self):
        return sorted(set(np.unique(self.labels).tolist()) - {0})

    def face_labels(self) -> np.ndarray:
        """Label of each face, or -1 when its vertices disagree."""
        fl = self.labels[self.mesh.faces]
        return np.where((fl[:, 0] == fl[:, 1]) & (fl[:, 1] == fl[:, 2]), fl[:, 0], -1)


def load_arch(mesh_path, label_path) -> LabeledArch:
    """Read an OBJ mesh plus its label JSON (``labels``, ``jaw``, optional ``arch_id``)."""
    mesh = read_obj(mesh_path)
    try:
        meta = json.loads(Path(label_path).read_text())
    except OSError as exc:
        raise DataIOError(f"cannot read {label_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MeshParseError(f"{label_path}: invalid JSON: {exc}") from exc
    if not isinstance(meta, dict) or "labels" not in meta:
        raise MeshParseError(f"{label_path}: missing 'labels' array")
    labels = np.asarray(meta["labels"], dtype=np.int64)
    if len(labels) != mesh.n_vertices:
        raise LabelCountError(f"{len(labels)} labels for {mesh.n_vertices} vertices in {mesh_path}")
    clean, n_dropped = drop_degenerate_faces(mesh)
    if n_dropped:
        log.info("%s: dropped %d degenerate faces", mesh_path, n_dropped)
    arch = LabeledArch(clean, labels, str(meta.get("arch_id", Path(mesh_path).stem)),
                       meta.get("jaw", "lower"))
    object.__setattr__(arch, "dropped_faces", n_dropped)
    return arch


def save_arch(arch: LabeledArch, mesh_path, label_path):
    write_obj(arch.mesh, mesh_path)
    meta = {"arch_id": arch.arch_id, "jaw": arch.jaw, "labels": arch.labels.tolist()}
    try:
        Path(label_path).write_text(json.dumps(meta))
    except OSError as exc:
        raise DataIOError(f"cannot write {label_path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Signed distance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BVH:
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray


def build_bvh(tris: np.ndarray, leaf_size: int = 4) -> BVH:
    """Median-split AABB tree over triangles, flattened into arrays."""
    tri_lo = tris.min(axis=1)
    tri_hi = tris.max(axis=1)
    cent = tris.mean(axis=1)
    order = np.arange(len(tris), dtype=np.int64)
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        idx = order[s:e]
        lo.append(tri_lo[idx].min(axis=0))
        hi.append(tri_hi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        return len(lo) - 1

    stack = [(new_node(0, len(tris)), 0, len(tris))]
    while stack:
        node, s, e = stack.pop()
        if e - s <= leaf_size:
            continue
        idx = order[s:e]
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        mid = (e - s) // 2
        order[s:e] = idx[np.argpartition(c[:, axis], mid)]
        a = new_node(s, s + mid)
        b = new_node(s + mid, e)
        left[node], right[node] = a, b
        count[node] = 0
        stack.append((a, s, s + mid))
        stack.append((b, s + mid, e))

    as_i = lambda x: np.ascontiguousarray(np.array(x, dtype=np.int64))  # noqa: E731
    return BVH(np.ascontiguousarray(np.array(lo)), np.ascontiguousarray(np.array(hi)),
               as_i(left), as_i(right), as_i(start), as_i(count), order)


class SignedDistance:
    """Reusable signed-distance query structure for one mesh."""

    def __init__(self, mesh: TriangleMesh, backend: str | None = None):
        if mesh.is_empty():
            raise EmptyMeshError("signed distance of an empty mesh")
        self.mesh = mesh
        self.backend = backend
        self.tris = np.ascontiguousarray(mesh.triangles())
        self.bvh = build_bvh(self.tris)
        self._pseudo_normals()

    def _pseudo_normals(self):
        t = self.tris
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        n /= np.linalg.norm(n, axis=1, keepdims=True).clip(1e-300)
        self.face_normals = n
        f = self.mesh.faces

        # edges (0,1), (1,2), (2,0) per face; pseudo-normal = sum of incident face normals
        e = np.stack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=1).reshape(-1, 2)
        _, inv = np.unique(np.sort(e, axis=1), axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        en = np.zeros((inv.max() + 1, 3))
        np.add.at(en, inv, np.repeat(n, 3, axis=0))
        self.edge_normals = en[inv].reshape(-1, 3, 3)

        vn = np.zeros((self.mesh.n_vertices, 3))
        for k in range(3):
            u = t[:, (k + 1) % 3] - t[:, k]
            w = t[:, (k + 2) % 3] - t[:, k]
            cosang = np.einsum("ij,ij->i", u, w) / (
                np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1)
            ).clip(1e-300)
            np.add.at(vn, f[:, k], np.arccos(np.clip(cosang, -1.0, 1.0))[:, None] * n)
        self.vertex_normals = vn

    def query(self, points) -> np.ndarray:
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        b = self.bvh
        d2, cp, face, feat = _backend.kernels(self.backend).closest_points(
            pts, self.tris, b.lo, b.hi, b.left, b.right, b.start, b.count, b.order
        )
        face = np.asarray(face)
        feat = np.asarray(feat).astype(np.int64)
        pn = self.face_normals[face].copy()
        is_edge = (feat >= 1) & (feat <= 3)
        pn[is_edge] = self.edge_normals[face[is_edge], feat[is_edge] - 1]
        is_vert = feat >= 4
        pn[is_vert] = self.vertex_normals[self.mesh.faces[face[is_vert], feat[is_vert] - 4]]
        side = np.einsum("ij,ij->i", pts - np.asarray(cp), pn)
        dist = np.sqrt(np.asarray(d2))
        return np.where(side < 0.0, -dist, dist).reshape(np.shape(points)[:-1])


def mesh_to_sdf(mesh: TriangleMesh, resolution, origin, spacing, truncation=TAU,
                backend: str | None = None) -> SdfGrid:
    """Signed distance of a closed mesh sampled at voxel centres, clamped."""
    if mesh.is_empty():
        raise EmptyMeshError("mesh_to_sdf on an empty mesh")
    probe = SdfGrid.filled(resolution, origin, spacing, 0.0, truncation)
    sd = SignedDistance(mesh, backend)
    return probe.with_values(sd.query(probe.points()))


def marching_cubes(grid: SdfGrid, iso: float = 0.0, backend: str | None = None) -> TriangleMesh:
    """Iso-surface of ``grid`` in world coordinates, outward (toward +) facing."""
    vol = np.ascontiguousarray(grid.values, dtype=np.float64)
    verts, faces = _backend.kernels(backend).marching_cubes(vol, float(iso), _backend.TRI_TABLE_ARRAY)
    verts = np.asarray(verts)
    faces = np.asarray(faces)
    if len(faces) == 0:
        return TriangleMesh.empty()
    # the table winds triangles toward the inside under the ``value < iso`` convention
    return TriangleMesh(grid.origin + grid.spacing * verts, faces[:, ::-1])


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Subdivided icosahedron projected onto a sphere (outward winding)."""
    phi = (1.0 + 5 ** 0.5) / 2.0
    v = np.array(
        [[-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
         [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
         [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]],
        dtype=np.float64,
    )
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]],
        dtype=np.int64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = v[uniq].mean(axis=1)
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = len(v) + inv.reshape(3, -1).T  # midpoints of edges 01, 12, 20 per face
        v = np.concatenate([v, mid])
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        m01, m12, m20 = m[:, 0], m[:, 1], m[:, 2]
        f = np.concatenate([
            np.stack([a, m01, m20], 1), np.stack([b, m12, m01], 1),
            np.stack([c, m20, m12], 1), np.stack([m01, m12, m20], 1),
        ])
    return TriangleMesh(v * radius + np.asarray(center, dtype=np.float64), f)


def box_mesh(lo, hi) -> TriangleMesh:
    """Closed axis-aligned box with outward winding."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
    v = lo + corners * (hi - lo)
    f = np.array(
        [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],   # x = lo, x = hi
         [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],   # y = lo, y = hi
         [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]],  # z = lo, z = hi
        dtype=np.int64,
    )
    return TriangleMesh(v, f)
