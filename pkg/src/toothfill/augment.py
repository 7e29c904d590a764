"""Paired training samples from complete arches by synthetic tooth damage.

A sample is built around one tooth:

1. the tooth and every arch component near it are cut out and mapped into a
   normalized cube (the tooth window is mapped to ``[-0.9, 0.9]^3``);
2. the tooth and the remaining components are converted to SDF grids
   separately, and their union is the ground truth;
3. random primitives, trimmed to the tooth's bounding box and roughened with
   simplex noise, are subtracted from the tooth grid only;
4. the damaged tooth is re-united with the untouched neighbours to form the
   conditioning context.

Because the neighbours never see the boolean, the context equals the ground
truth bit for bit wherever no primitive reaches.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DataIOError, ToothfillError, ValidationError
from .geometry import (
    PRIMITIVE_KINDS,
    TAU,
    Primitive,
    SdfGrid,
    SimplexNoiseParams,
    box_sdf,
    csg_difference,
    csg_intersection,
    csg_union,
    cube_grid,
    eval_primitive,
    perturb_with_simplex,
    random_rotation,
    sample_to_grid,
    union_all,
)
from .meshio import LabeledArch, TriangleMesh, concatenate, mesh_to_sdf

log = logging.getLogger(__name__)

WINDOW_SCALE = 1.5
WINDOW_EXTENT = 0.9


@dataclass(frozen=True)
class AugmentConfig:
    """Damage and sampling parameters.

    ``scale_jitter`` stretches each primitive by a per-axis factor drawn from
    ``[1 - j, 1 + j]``; ``resolution`` is the voxel count per axis of the
    normalized ``[-1, 1]^3`` grid.
    """

    max_primitives: int = 3
    size_min: float = 0.2
    size_max: float = 0.5
    noise: SimplexNoiseParams = field(default_factory=SimplexNoiseParams)
    variants_per_tooth: int = 1
    resolution: int = 32
    scale_jitter: float = 0.25

    def __post_init__(self):
        if not 1 <= self.max_primitives <= 3:
            raise ConfigError(f"max_primitives must be in 1..3, got {self.max_primitives}")
        if not 0 < self.size_min <= self.size_max:
            raise ConfigError(f"need 0 < size_min <= size_max, got {self.size_min}, {self.size_max}")
        if self.variants_per_tooth < 1:
            raise ConfigError("variants_per_tooth must be >= 1")
        if self.resolution < 4:
            raise ConfigError("resolution must be >= 4")
        if not 0 <= self.scale_jitter < 1:
            raise ConfigError("scale_jitter must be in [0, 1)")

    @property
    def relative_size_range(self):
        return (self.size_min, self.size_max)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        if isinstance(d.get("noise"), dict):
            d["noise"] = SimplexNoiseParams(**d["noise"])
        return cls(**d)


@dataclass(frozen=True)
class Normalization:
    """Isotropic similarity ``x_norm = scale * (x - center)``."""

    scale: float
    center: np.ndarray

    def apply(self, pts) -> np.ndarray:
        return self.scale * (np.asarray(pts, dtype=np.float64) - self.center)

    def invert(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) / self.scale + self.center

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "center": [float(c) for c in self.center]}


@dataclass(frozen=True)
class ToothContext:
    """Normalized meshes around one tooth; ``rest`` is ``context`` minus the tooth."""

    tooth: TriangleMesh
    context: TriangleMesh
    rest: TriangleMesh
    norm: Normalization

    def __iter__(self):
        # unpacks as (tooth, context, norm)
        return iter((self.tooth, self.context, self.norm))


def _components(arch: LabeledArch):
    """Label -> submesh; faces with mixed labels go to the gingiva."""
    fl = arch.face_labels()
    fl = np.where(fl < 0, 0, fl)
    return {int(l): arch.mesh.submesh(fl == l) for l in np.unique(fl)}


def _near_grid(mesh: TriangleMesh, margin: float) -> bool:
    lo, hi = mesh.bounds()
    return bool(np.all(lo <= 1.0 + margin) and np.all(hi >= -1.0 - margin))


def _crop_components(comps, norm: Normalization, skip=()):
    """Normalized components whose bounding box reaches the grid cube (plus ``TAU``)."""
    out = []
    for label, mesh in sorted(comps.items()):
        if label in skip or mesh.is_empty():
            continue
        m = mesh.transformed(norm.apply)
        if _near_grid(m, TAU):
            out.append(m)
    return out


def extract_tooth_context(arch: LabeledArch, fdi: int) -> ToothContext:
    """Cut out tooth ``fdi`` and whole nearby components, normalized.

    The window is a cube of side 1.5x the tooth's largest bbox extent,
    centred on the tooth bbox, and is mapped isotropically onto
    ``[-0.9, 0.9]^3``. Components are kept whole (never clipped) so that
    their SDFs remain those of closed surfaces.
    """
    comps = _components(arch)
    if fdi not in comps or comps[fdi].is_empty():
        raise ValidationError(f"tooth {fdi} not present in arch {arch.arch_id}")
    tooth_world = comps[fdi]
    lo, hi = tooth_world.bounds()
    side = WINDOW_SCALE * float(np.max(hi - lo))
    if not side > 0:
        raise ValidationError(f"tooth {fdi} has zero extent")
    norm = Normalization(2.0 * WINDOW_EXTENT / side, 0.5 * (lo + hi))
    tooth = tooth_world.transformed(norm.apply)
    rest_parts = _crop_components(comps, norm, skip=(fdi,))
    rest = concatenate(rest_parts) if rest_parts else TriangleMesh.empty()
    context = concatenate([tooth] + rest_parts)
    if context.is_empty():
        raise ValidationError(f"empty context around tooth {fdi}")
    return ToothContext(tooth, context, rest, norm)


class DamageResult(NamedTuple):
    damaged: SdfGrid
    primitives: list
    carve: SdfGrid  # union of trimmed, perturbed primitives; support is ``carve < truncation``


def _draw_primitive(rng, points, diag, config: AugmentConfig) -> Primitive:
    kind = PRIMITIVE_KINDS[rng.integers(len(PRIMITIVE_KINDS))]
    size = rng.uniform(config.size_min, config.size_max) * diag
    rotation = random_rotation(rng)
    center = points[rng.integers(len(points))]
    j = config.scale_jitter
    scale = rng.uniform(1.0 - j, 1.0 + j, 3) if j > 0 else np.ones(3)
    half = 0.5 * size
    params = {
        "sphere": (half,),
        "cube": (half, half, half),
        "cylinder": (half, half),
        "capsule": (0.5 * half, 0.5 * half),
        "cone": (half, half),
    }[kind]
    return Primitive(kind, params, rotation, center, scale)


def _noise_seed(noise_seed: int, seed: int, j: int) -> int:
    state = np.random.SeedSequence([noise_seed & 0xFFFFFFFFFFFFFFFF, seed & 0xFFFFFFFFFFFFFFFF, j])
    return int(state.generate_state(1, np.uint64)[0])


def synthesize_damage(tooth_sdf: SdfGrid, tooth_surface_points, config: AugmentConfig, seed: int,
                      *, tooth_bounds=None, n_primitives: int | None = None,
                      primitives: Sequence[Primitive] | None = None,
                      noise: SimplexNoiseParams | None = None) -> DamageResult:
    """Carve noised primitives out of ``tooth_sdf``.

    Primitive centres are drawn uniformly from ``tooth_surface_points``; pass
    area-uniform surface samples for area-weighted placement. The trim box is
    ``tooth_bounds`` or, by default, the bounding box of the points.

    Test hooks: ``n_primitives`` overrides the drawn count (0 leaves the tooth
    untouched), ``primitives`` replaces the random draw, ``noise`` overrides
    ``config.noise``.
    """
    pts = np.asarray(tooth_surface_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValidationError("no tooth surface points")
    lo, hi = (pts.min(axis=0), pts.max(axis=0)) if tooth_bounds is None else map(np.asarray, tooth_bounds)
    diag = float(np.linalg.norm(hi - lo))
    noise = config.noise if noise is None else noise
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)

    if primitives is None:
        k = int(rng.integers(1, config.max_primitives + 1)) if n_primitives is None else int(n_primitives)
        primitives = [_draw_primitive(rng, pts, diag, config) for _ in range(k)]

    # rasterize with headroom for the noise so the far field stays saturated after re-clamping
    trunc = tooth_sdf.truncation
    wide = trunc + noise.amplitude
    spec = (tooth_sdf.resolution, tooth_sdf.origin, tooth_sdf.spacing)
    trim = sample_to_grid(lambda p: box_sdf(p, lo, hi), *spec, truncation=wide)
    carved, described = [], []
    for j, prim in enumerate(primitives):
        raw = sample_to_grid(lambda p, q=prim: eval_primitive(q, p), *spec, truncation=wide)
        params = SimplexNoiseParams(noise.amplitude, noise.frequency, _noise_seed(noise.seed, seed, j))
        grid = perturb_with_simplex(csg_intersection(raw, trim), params)
        carved.append(grid.with_values(grid.values, truncation=trunc))
        described.append({**prim.describe(), "noise_seed": params.seed})

    carve = union_all(carved, tooth_sdf)
    return DamageResult(csg_difference(tooth_sdf, carve), described, carve)


@dataclass(frozen=True, eq=False)
class CompletionSample:
    context: SdfGrid
    ground_truth: SdfGrid
    antagonist: SdfGrid | None
    tooth_bbox: tuple  # ((i0, j0, k0), (i1, j1, k1)), half-open voxel index box
    meta: dict

    def __post_init__(self):
        for g in (self.ground_truth, self.antagonist):
            if g is not None:
                self.context.check_spec(g)
        (lo, hi) = self.tooth_bbox
        lo = tuple(int(v) for v in lo)
        hi = tuple(int(v) for v in hi)
        n = self.context.resolution
        if not all(0 <= a < b <= n for a, b in zip(lo, hi)):
            raise ValidationError(f"tooth bbox {lo}..{hi} empty or outside grid of size {n}")
        object.__setattr__(self, "tooth_bbox", (lo, hi))

    @property
    def mask(self):
        """Index expression selecting the tooth bbox voxels."""
        lo, hi = self.tooth_bbox
        return tuple(slice(a, b) for a, b in zip(lo, hi))

    def bbox_world(self):
        """World-space box covered by the tooth bbox voxels."""
        lo, hi = (np.array(b, dtype=np.float64) for b in self.tooth_bbox)
        o, s = self.context.origin, self.context.spacing
        return o + s * (lo - 0.5), o + s * (hi - 0.5)

    def save(self, out_dir, sample_id: str) -> dict:
        """Write the grids and a JSON sidecar; returns the manifest entry."""
        out = Path(out_dir)
        files = {"context": f"{sample_id}_context.sdfg", "ground_truth": f"{sample_id}_gt.sdfg"}
        if self.antagonist is not None:
            files["antagonist"] = f"{sample_id}_antagonist.sdfg"
        try:
            self.context.save(out / files["context"])
            self.ground_truth.save(out / files["ground_truth"])
            if self.antagonist is not None:
                self.antagonist.save(out / files["antagonist"])
            meta = {"id": sample_id, "files": files, "tooth_bbox": [list(b) for b in self.tooth_bbox],
                    "meta": self.meta}
            (out / f"{sample_id}.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        except OSError as exc:
            raise DataIOError(f"cannot write sample {sample_id}: {exc}") from exc
        return {"id": sample_id, "meta_file": f"{sample_id}.json", **files}

    @classmethod
    def load(cls, meta_path) -> "CompletionSample":
        meta_path = Path(meta_path)
        try:
            rec = json.loads(meta_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataIOError(f"cannot read sample {meta_path}: {exc}") from exc
        base = meta_path.parent
        files = rec["files"]
        antag = files.get("antagonist")
        return cls(
            SdfGrid.load(base / files["context"]),
            SdfGrid.load(base / files["ground_truth"]),
            SdfGrid.load(base / antag) if antag else None,
            tuple(tuple(b) for b in rec["tooth_bbox"]),
            rec["meta"],
        )


def occupancy_bbox(grid: SdfGrid):
    """Half-open voxel box of ``grid < 0``, or None when nothing is occupied."""
    idx = np.argwhere(grid.occupancy())
    if len(idx) == 0:
        return None
    return tuple(idx.min(axis=0).tolist()), tuple((idx.max(axis=0) + 1).tolist())


class _ToothBase(NamedTuple):
    ctx: ToothContext
    tooth_sdf: SdfGrid
    rest_sdf: SdfGrid
    ground_truth: SdfGrid
    antagonist: SdfGrid | None
    tooth_bbox: tuple
    surface: np.ndarray


def _prepare(arch, fdi, antagonist_arch, config: AugmentConfig, surface_seed: int) -> _ToothBase:
    ctx = extract_tooth_context(arch, fdi)
    origin, spacing = cube_grid(config.resolution)
    spec = (config.resolution, origin, spacing)
    empty = SdfGrid.filled(*spec, TAU)
    tooth_sdf = mesh_to_sdf(ctx.tooth, *spec)
    rest_sdf = empty if ctx.rest.is_empty() else mesh_to_sdf(ctx.rest, *spec)
    bbox = occupancy_bbox(tooth_sdf)
    if bbox is None:
        raise ValidationError(f"tooth {fdi} occupies no voxel at resolution {config.resolution}")
    antagonist = None
    if antagonist_arch is not None:
        parts = _crop_components(_components(antagonist_arch), ctx.norm)
        antagonist = mesh_to_sdf(concatenate(parts), *spec) if parts else empty
    rng = np.random.default_rng(surface_seed & 0xFFFFFFFFFFFFFFFF)
    surface = ctx.tooth.sample_points(4096, rng)
    return _ToothBase(ctx, tooth_sdf, rest_sdf, csg_union(tooth_sdf, rest_sdf), antagonist, bbox, surface)


def _finish(base: _ToothBase, arch, fdi, config, seed, **hooks) -> CompletionSample:
    res = synthesize_damage(base.tooth_sdf, base.surface, config, seed,
                            tooth_bounds=base.ctx.tooth.bounds(), **hooks)
    context = csg_union(res.damaged, base.rest_sdf)
    meta = {
        "arch_id": arch.arch_id,
        "fdi": int(fdi),
        "seed": int(seed),
        "primitives": res.primitives,
        "normalization": base.ctx.norm.to_dict(),
    }
    return CompletionSample(context, base.ground_truth, base.antagonist, base.tooth_bbox, meta)


def build_sample(arch: LabeledArch, fdi: int, antagonist_arch: LabeledArch | None,
                 config: AugmentConfig, seed: int, **hooks) -> CompletionSample:
    """One damaged/complete pair around tooth ``fdi``.

    ``hooks`` are forwarded to :func:`synthesize_damage` (``n_primitives``,
    ``primitives``, ``noise``).
    """
    base = _prepare(arch, fdi, antagonist_arch, config, seed)
    return _finish(base, arch, fdi, config, seed, **hooks)


def build_variants(arch: LabeledArch, fdi: int, antagonist_arch: LabeledArch | None,
                   config: AugmentConfig, seeds: Sequence[int], surface_seed: int = 0):
    """Several damage variants sharing one context extraction and ground truth."""
    base = _prepare(arch, fdi, antagonist_arch, config, surface_seed)
    return [_finish(base, arch, fdi, config, s) for s in seeds]


def derive_seed(master_seed: int, *keys: int) -> int:
    """Stable 63-bit seed from a master seed and integer keys."""
    ss = np.random.SeedSequence([master_seed & 0xFFFFFFFFFFFFFFFF, *[k & 0xFFFFFFFFFFFFFFFF for k in keys]])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def build_dataset(arches, config: AugmentConfig, out_dir, master_seed: int = 0) -> dict:
    """Write samples for every tooth of every arch and return the manifest.

    ``arches`` holds ``LabeledArch`` objects or ``(arch, antagonist)`` pairs.
    Teeth that fail are logged and listed under ``failures``; the manifest is
    written last to ``out_dir/manifest.json``.
    """
    entries = [(a, None) if isinstance(a, LabeledArch) else tuple(a) for a in arches]
    if not entries:
        raise ValidationError("build_dataset needs at least one arch")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {out}: {exc}") from exc

    samples, failures = [], []
    for ai, (arch, antag) in enumerate(entries):
        for fdi in arch.teeth():
            seeds = [derive_seed(master_seed, ai, fdi, v) for v in range(config.variants_per_tooth)]
            try:
                built = build_variants(arch, fdi, antag, config, seeds, derive_seed(master_seed, ai, fdi))
                for v, sample in enumerate(built):
                    sid = f"{arch.arch_id}_{fdi}_v{v}"
                    rec = sample.save(out, sid)
                    samples.append({**rec, "arch_id": arch.arch_id, "fdi": fdi, "variant": v,
                                    "seed": seeds[v]})
            except (ToothfillError, OSError) as exc:
                log.warning("skipping %s tooth %s: %s", arch.arch_id, fdi, exc)
                failures.append({"arch_id": arch.arch_id, "fdi": fdi, "error": str(exc)})

    manifest = {
        "version": 1,
        "master_seed": int(master_seed),
        "config": config.to_dict(),
        "samples": samples,
        "failures": failures,
    }
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except OSError as exc:
        raise DataIOError(f"cannot write manifest: {exc}") from exc
    return manifest


def load_manifest(path):
    """Manifest dict and its samples loaded from disk."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
    return manifest, [CompletionSample.load(path.parent / s["meta_file"]) for s in manifest["samples"]]
