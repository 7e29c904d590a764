"""Completion metrics on SDF grids and their extracted surfaces.

Occupancy is ``value < 0``. Masked variants restrict to the ground-truth
tooth's voxel bounding box. Chamfer distances are mean squared
nearest-neighbour distances between area-uniform surface samples; reports
keep raw values and the table multiplies them by 1e4.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataIOError, EmptyMeshError, ValidationError
from .geometry import SdfGrid
from .meshio import TriangleMesh, marching_cubes

CHAMFER_SCALE = 1e4


def _region(grid: SdfGrid, mask):
    """Index expression for ``mask``: None, a half-open voxel box ``(lo, hi)`` or slices."""
    if mask is None:
        return (slice(None),) * 3
    if all(isinstance(m, slice) for m in mask):
        sl = tuple(mask)
    else:
        lo, hi = mask
        sl = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
    n = grid.resolution
    for s in sl:
        a, b, _ = s.indices(n)
        if b <= a:
            raise ValidationError(f"empty mask {mask}")
    if any(s.start is not None and not 0 <= s.start < n for s in sl) or \
            any(s.stop is not None and not 0 < s.stop <= n for s in sl):
        raise ValidationError(f"mask {mask} outside grid of size {n}")
    return sl


def l1_volume(pred: SdfGrid, gt: SdfGrid, mask=None) -> float:
    """Mean absolute voxel difference, optionally over a voxel box."""
    pred.check_spec(gt)
    sl = _region(pred, mask)
    a = pred.values[sl].astype(np.float64)
    b = gt.values[sl].astype(np.float64)
    return float(np.mean(np.abs(a - b)))


def _iou(a: np.ndarray, b: np.ndarray, empty: float) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return empty
    return 100.0 * np.count_nonzero(a & b) / union


def iou_voxel(pred: SdfGrid, gt: SdfGrid, mask=None) -> float:
    """Occupancy IoU in percent; 100 when both occupancies are empty."""
    pred.check_spec(gt)
    sl = _region(pred, mask)
    return _iou(pred.values[sl] < 0, gt.values[sl] < 0, 100.0)


def antagonist_interference(tooth: SdfGrid, antagonist: SdfGrid, mask=None) -> float:
    """Occupancy IoU between a tooth and its antagonist in percent; 0 for an empty union."""
    tooth.check_spec(antagonist)
    sl = _region(tooth, mask)
    return _iou(tooth.values[sl] < 0, antagonist.values[sl] < 0, 0.0)


def chamfer(mesh_a: TriangleMesh, mesh_b: TriangleMesh, n_samples: int = 10_000, seed: int = 0) -> float:
    """Symmetric squared Chamfer distance between area-uniform surface samples.

    Both meshes are sampled with the same seed, so a mesh compared with
    itself gives exactly 0.
    """
    if mesh_a.is_empty() or mesh_b.is_empty():
        raise EmptyMeshError("chamfer distance of an empty mesh")
    pa = mesh_a.sample_points(n_samples, np.random.default_rng(seed))
    pb = mesh_b.sample_points(n_samples, np.random.default_rng(seed))
    return chamfer_points(pa, pb)


def chamfer_points(pa: np.ndarray, pb: np.ndarray) -> float:
    da, _ = cKDTree(pb).query(pa)
    db, _ = cKDTree(pa).query(pb)
    return float(0.5 * (np.mean(da ** 2) + np.mean(db ** 2)))


def crop_mesh(mesh: TriangleMesh, lo, hi) -> TriangleMesh:
    """Faces whose centroid lies inside the box [lo, hi]."""
    if mesh.is_empty():
        return mesh
    c = mesh.triangles().mean(axis=1)
    inside = np.all((c >= np.asarray(lo)) & (c <= np.asarray(hi)), axis=1)
    return mesh.submesh(inside)


def _chamfer_or_inf(a: TriangleMesh, b: TriangleMesh, n: int, seed: int) -> float:
    if a.is_empty() and b.is_empty():
        return 0.0
    if a.is_empty() or b.is_empty():
        return math.inf
    return chamfer(a, b, n, seed)


@dataclass(frozen=True)
class MetricReport:
    """Metrics of one completion; Chamfer values are raw (not x1e4).

    Antagonist fields are None when the sample has no antagonist; a Chamfer
    value is ``inf`` when exactly one of the two surfaces is empty.
    """

    l1: float
    masked_l1: float
    chamfer: float
    masked_chamfer: float
    iou_pct: float
    masked_iou_pct: float
    iou_antag_pred_pct: float | None = None
    iou_antag_gt_pct: float | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if math.isnan(v) or v < 0:
                raise ValidationError(f"{f.name} must be >= 0, got {v}")
            if f.name.endswith("_pct") and v > 100:
                raise ValidationError(f"{f.name} must be <= 100, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_sample(pred: SdfGrid, sample, n_chamfer_samples: int = 10_000, seed: int = 0) -> MetricReport:
    """Full metric suite of ``pred`` against a CompletionSample."""
    gt = sample.ground_truth
    pred.check_spec(gt)
    box = sample.tooth_bbox
    mesh_p = marching_cubes(pred)
    mesh_g = marching_cubes(gt)
    lo, hi = sample.bbox_world()
    antag_pred = antag_gt = None
    if sample.antagonist is not None:
        antag_pred = antagonist_interference(pred, sample.antagonist, box)
        antag_gt = antagonist_interference(gt, sample.antagonist, box)
    return MetricReport(
        l1=l1_volume(pred, gt),
        masked_l1=l1_volume(pred, gt, box),
        chamfer=_chamfer_or_inf(mesh_p, mesh_g, n_chamfer_samples, seed),
        masked_chamfer=_chamfer_or_inf(crop_mesh(mesh_p, lo, hi), crop_mesh(mesh_g, lo, hi),
                                       n_chamfer_samples, seed),
        iou_pct=iou_voxel(pred, gt),
        masked_iou_pct=iou_voxel(pred, gt, box),
        iou_antag_pred_pct=antag_pred,
        iou_antag_gt_pct=antag_gt,
    )


def _json_value(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


def write_reports_jsonl(reports: Sequence[MetricReport], path, ids: Sequence[str] | None = None):
    """One JSON object per line; non-finite values are written as null."""
    ids = [None] * len(reports) if ids is None else list(ids)
    try:
        with open(path, "w") as fh:
            for sid, r in zip(ids, reports):
                rec = {k: _json_value(v) for k, v in r.to_dict().items()}
                if sid is not None:
                    rec = {"id": sid, **rec}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


_TABLE_COLUMNS = [
    ("L1", "l1", 1.0),
    ("mL1", "masked_l1", 1.0),
    ("CD x1e4", "chamfer", CHAMFER_SCALE),
    ("mCD x1e4", "masked_chamfer", CHAMFER_SCALE),
    ("IoU %", "iou_pct", 1.0),
    ("mIoU %", "masked_iou_pct", 1.0),
    ("IoU Antag_pred %", "iou_antag_pred_pct", 1.0),
    ("IoU Antag_gt %", "iou_antag_gt_pct", 1.0),
]


def aggregate(reports: Sequence[MetricReport]) -> dict:
    """Per-metric (mean, std, count) over finite, present values."""
    out = {}
    for _, key, scale in _TABLE_COLUMNS:
        vals = np.array([getattr(r, key) for r in reports if getattr(r, key) is not None], dtype=np.float64)
        vals = vals[np.isfinite(vals)] * scale
        out[key] = (float(vals.mean()), float(vals.std()), int(vals.size)) if vals.size else (None, None, 0)
    return out


def format_table(reports: Sequence[MetricReport]) -> str:
    """Plain-text mean ± std table, one column per metric."""
    agg = aggregate(reports)
    head, cells = [], []
    for label, key, _ in _TABLE_COLUMNS:
        mean, std, n = agg[key]
        head.append(label)
        cells.append("n/a" if n == 0 else f"{mean:.4g} ± {std:.2g}")
    widths = [max(len(h), len(c)) for h, c in zip(head, cells)]

    def line(parts):
        return " | ".join(p.ljust(w) for p, w in zip(parts, widths))

    return "\n".join([line(head), "-+-".join("-" * w for w in widths), line(cells)]) + "\n"


def write_table(reports: Sequence[MetricReport], path):
    try:
        Path(path).write_text(format_table(reports))
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
