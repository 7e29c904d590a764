"""Volume and mesh metrics, reports and tables."""

import itertools
import json
import math

import numpy as np
import pytest

from toothfill.errors import EmptyMeshError, GridMismatchError, ValidationError
from toothfill.geometry import SdfGrid, cube_grid, sample_to_grid
from toothfill.meshio import TriangleMesh, box_mesh, icosphere
from toothfill.metrics import (
    MetricReport,
    aggregate,
    antagonist_interference,
    chamfer,
    chamfer_points,
    crop_mesh,
    evaluate_sample,
    format_table,
    iou_voxel,
    l1_volume,
    write_reports_jsonl,
    write_table,
)


def occ_grid(mask):
    """Grid whose occupancy is ``mask`` (values ±0.1)."""
    mask = np.asarray(mask, dtype=bool)
    return SdfGrid(mask.shape[0], (0, 0, 0), 1.0, np.where(mask, -0.1, 0.1).astype(np.float32))


def square(z, n_side=1):
    v = np.array([[0, 0, z], [1, 0, z], [1, 1, z], [0, 1, z]], dtype=float)
    return TriangleMesh(v, [[0, 1, 2], [0, 2, 3]])


def iou_oracle(p, g):
    u = np.count_nonzero(p | g)
    return 100.0 if u == 0 else 100.0 * np.count_nonzero(p & g) / u


def toward(p, g, k):
    """``p`` with voxel ``k`` moved to agree with ``g``."""
    q = p.copy().reshape(-1)
    q[k] = g.reshape(-1)[k]
    return q.reshape(p.shape)


class TestL1:
    def test_identity(self, rng):
        g = occ_grid(rng.random((4, 4, 4)) < 0.5)
        assert l1_volume(g, g) == 0.0

    def test_constant_offset(self, rng):
        o, s = cube_grid(4)
        base = SdfGrid(4, o, s, rng.uniform(-0.2, 0.2, (4, 4, 4)).astype(np.float32))
        shifted = base.with_values(base.values + np.float32(0.01))
        assert l1_volume(shifted, base) == pytest.approx(0.01, abs=1e-7)

    def test_single_voxel_of_eight(self):
        a = SdfGrid(2, (0, 0, 0), 1.0, np.zeros((2, 2, 2), np.float32), truncation=1.0)
        v = np.zeros((2, 2, 2), np.float32)
        v[1, 0, 1] = 0.8
        b = a.with_values(v)
        assert l1_volume(a, b) == pytest.approx(0.1, abs=1e-8)

    def test_full_mask_equals_unmasked(self, rng):
        a = occ_grid(rng.random((5, 5, 5)) < 0.5)
        b = a.with_values(rng.uniform(-0.2, 0.2, (5, 5, 5)))
        assert l1_volume(a, b, ((0, 0, 0), (5, 5, 5))) == l1_volume(a, b)

    def test_masked_region(self):
        a = SdfGrid.filled(4, (0, 0, 0), 1.0, 0.0)
        v = np.zeros((4, 4, 4), np.float32)
        v[0, 0, 0] = 0.2
        b = a.with_values(v)
        assert l1_volume(a, b, ((0, 0, 0), (1, 1, 2))) == pytest.approx(0.1)
        assert l1_volume(a, b, ((1, 1, 1), (4, 4, 4))) == 0.0

    def test_empty_mask(self):
        a = SdfGrid.filled(4, (0, 0, 0), 1.0, 0.0)
        with pytest.raises(ValidationError):
            l1_volume(a, a, ((1, 1, 1), (1, 3, 3)))

    def test_mask_outside_grid(self):
        a = SdfGrid.filled(4, (0, 0, 0), 1.0, 0.0)
        with pytest.raises(ValidationError):
            l1_volume(a, a, ((0, 0, 0), (5, 4, 4)))

    def test_spec_mismatch(self):
        with pytest.raises(GridMismatchError):
            l1_volume(SdfGrid.filled(4, (0, 0, 0), 1.0, 0.0), SdfGrid.filled(4, (0, 0, 0), 0.5, 0.0))


class TestIoU:
    def test_identity_and_disjoint(self, rng):
        m = rng.random((4, 4, 4)) < 0.5
        assert iou_voxel(occ_grid(m), occ_grid(m)) == 100.0
        assert iou_voxel(occ_grid(m), occ_grid(~m)) == 0.0

    def test_hand_count(self):
        p = np.zeros((3, 3, 3), bool)
        g = np.zeros((3, 3, 3), bool)
        p[0, 0, 0] = p[0, 0, 1] = True
        g[0, 0, 1] = g[0, 0, 2] = True
        assert iou_voxel(occ_grid(p), occ_grid(g)) == pytest.approx(100 / 3)

    def test_both_empty(self):
        e = occ_grid(np.zeros((3, 3, 3), bool))
        assert iou_voxel(e, e) == 100.0

    def test_symmetric(self, rng):
        a, b = (occ_grid(rng.random((5, 5, 5)) < 0.4) for _ in range(2))
        assert iou_voxel(a, b) == iou_voxel(b, a)
        assert l1_volume(a, b) == l1_volume(b, a)

    def test_permutation_invariant(self, rng):
        a, b = rng.random((2, 4, 4, 4)) < 0.5
        perm = rng.permutation(64)
        pa, pb = (x.reshape(-1)[perm].reshape(4, 4, 4) for x in (a, b))
        assert iou_voxel(occ_grid(a), occ_grid(b)) == iou_voxel(occ_grid(pa), occ_grid(pb))

    def test_zero_is_not_occupied(self):
        z = SdfGrid.filled(2, (0, 0, 0), 1.0, 0.0)
        full = occ_grid(np.ones((2, 2, 2), bool))
        assert iou_voxel(z, full) == 0.0

    def test_monotone_exhaustive_2x2x2(self):
        masks = [np.array([(m >> i) & 1 for i in range(8)], bool).reshape(2, 2, 2) for m in range(256)]
        grids = [occ_grid(m) for m in masks]
        table = np.array([[iou_voxel(grids[p], grids[g]) for g in range(256)] for p in range(256)])
        for g in range(256):
            for p in range(256):
                for k in range(8):
                    q = (p & ~(1 << k)) | (g & (1 << k))
                    assert table[q, g] >= table[p, g]
        # and the library agrees with an independent count everywhere
        oracle = np.array([[iou_oracle(masks[p], masks[g]) for g in range(256)] for p in range(256)])
        assert np.array_equal(table, oracle)

    def test_monotone_random_3x3x3(self, rng):
        for _ in range(40):
            g = rng.random((3, 3, 3)) < rng.random()
            p = rng.random((3, 3, 3)) < rng.random()
            base = iou_voxel(occ_grid(p), occ_grid(g))
            for k in range(27):
                assert iou_voxel(occ_grid(toward(p, g, k)), occ_grid(g)) >= base


class TestInterference:
    def test_clearance_and_total(self):
        a = np.zeros((3, 3, 3), bool)
        a[0] = True
        b = np.zeros((3, 3, 3), bool)
        b[2] = True
        assert antagonist_interference(occ_grid(a), occ_grid(b)) == 0.0
        assert antagonist_interference(occ_grid(a), occ_grid(a)) == 100.0

    def test_one_overlap_in_nine(self):
        a = np.zeros((3, 3, 3), bool)
        b = np.zeros((3, 3, 3), bool)
        a.reshape(-1)[:5] = True
        b.reshape(-1)[4:9] = True
        assert antagonist_interference(occ_grid(a), occ_grid(b)) == pytest.approx(100 / 9)

    def test_one_overlap_in_ten(self):
        a = np.zeros((3, 3, 3), bool)
        b = np.zeros((3, 3, 3), bool)
        a.reshape(-1)[:5] = True
        b.reshape(-1)[4:10] = True
        assert antagonist_interference(occ_grid(a), occ_grid(b)) == pytest.approx(10.0)

    def test_empty_union_is_zero(self):
        e = occ_grid(np.zeros((3, 3, 3), bool))
        assert antagonist_interference(e, e) == 0.0


class TestChamfer:
    def test_self_is_zero(self):
        m = icosphere(2, 0.5)
        assert chamfer(m, m, 2000) == 0.0

    def test_parallel_squares(self):
        d = 0.1
        cd = chamfer(square(0.0), square(d), 20_000, seed=1)
        assert cd == pytest.approx(d * d, rel=0.01)
        assert cd >= d * d

    def test_symmetric_exactly(self):
        a, b = icosphere(2, 0.5), box_mesh((-0.4, -0.4, -0.4), (0.3, 0.5, 0.4))
        assert chamfer(a, b, 3000) == chamfer(b, a, 3000)

    def test_point_formula(self):
        pa = np.array([[0.0, 0, 0], [1, 0, 0]])
        pb = np.array([[0.0, 0, 0.5]])
        # A->B: (0.25 + 1.25) / 2, B->A: 0.25
        assert chamfer_points(pa, pb) == pytest.approx(0.5 * (0.75 + 0.25))

    def test_empty(self):
        with pytest.raises(EmptyMeshError):
            chamfer(TriangleMesh.empty(), icosphere(1))

    def test_crop_by_centroid(self):
        m = box_mesh((0, 0, 0), (1, 1, 1))
        half = crop_mesh(m, (-1, -1, -1), (0.5, 2, 2))
        c = half.triangles().mean(axis=1)
        assert np.all(c[:, 0] <= 0.5)
        assert 0 < half.n_faces < m.n_faces


class TestEvaluateSample:
    def test_perfect_completion(self, small_samples):
        s = small_samples[0]
        r = evaluate_sample(s.ground_truth, s, 2000)
        assert r.l1 == 0 and r.masked_l1 == 0
        assert r.iou_pct == 100 and r.masked_iou_pct == 100
        assert r.chamfer == 0 and r.masked_chamfer == 0
        assert r.iou_antag_pred_pct == r.iou_antag_gt_pct

    def test_damaged_context_scores_lower(self, small_samples):
        for s in small_samples:
            lo, hi = s.tooth_bbox
            box = tuple(slice(a, b) for a, b in zip(lo, hi))
            removed = (s.ground_truth.values[box] < 0) & ~(s.context.values[box] < 0)
            r = evaluate_sample(s.context, s, 2000)
            if removed.any():
                assert r.masked_iou_pct < 100
            assert r.masked_l1 >= r.l1  # damage is confined to the tooth box

    def test_report_invariants(self, small_samples, rng):
        s = small_samples[2]
        noisy = s.ground_truth.with_values(
            np.clip(s.ground_truth.values + rng.normal(0, 0.05, s.ground_truth.values.shape), -0.25, 0.25))
        r = evaluate_sample(noisy, s, 2000)
        for k, v in r.to_dict().items():
            assert v >= 0, k
            if k.endswith("_pct"):
                assert v <= 100, k

    def test_no_antagonist(self, small_samples):
        from toothfill.augment import CompletionSample

        s = small_samples[0]
        bare = CompletionSample(s.context, s.ground_truth, None, s.tooth_bbox, s.meta)
        r = evaluate_sample(s.context, bare, 500)
        assert r.iou_antag_pred_pct is None and r.iou_antag_gt_pct is None

    def test_empty_prediction_gives_infinite_chamfer(self, small_samples):
        s = small_samples[0]
        empty = s.ground_truth.with_values(np.full(s.ground_truth.values.shape, 0.25, np.float32))
        r = evaluate_sample(empty, s, 500)
        assert math.isinf(r.chamfer) and math.isinf(r.masked_chamfer)
        assert r.iou_pct == 0

    @pytest.mark.parametrize("kw", [dict(l1=-1.0), dict(iou_pct=101.0), dict(chamfer=float("nan"))])
    def test_report_validation(self, kw):
        base = dict(l1=0.0, masked_l1=0.0, chamfer=0.0, masked_chamfer=0.0, iou_pct=0.0, masked_iou_pct=0.0)
        with pytest.raises(ValidationError):
            MetricReport(**{**base, **kw})


class TestReporting:
    def reports(self):
        return [
            MetricReport(0.01, 0.02, 3e-4, 4e-4, 90.0, 80.0, 1.0, 0.0),
            MetricReport(0.03, 0.04, 5e-4, math.inf, 70.0, 60.0, 3.0, 0.0),
        ]

    def test_jsonl(self, tmp_path):
        write_reports_jsonl(self.reports(), tmp_path / "r.jsonl", ids=["a", "b"])
        lines = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
        assert [r["id"] for r in lines] == ["a", "b"]
        assert lines[1]["masked_chamfer"] is None
        assert lines[0]["iou_pct"] == 90.0

    def test_aggregate_scales_chamfer_and_skips_inf(self):
        agg = aggregate(self.reports())
        assert agg["chamfer"][0] == pytest.approx(4.0)
        assert agg["chamfer"][1] == pytest.approx(1.0)
        assert agg["masked_chamfer"] == (pytest.approx(4.0), 0.0, 1)
        assert agg["masked_iou_pct"][0] == pytest.approx(70.0)

    def test_table(self, tmp_path):
        text = format_table(self.reports())
        head, rule, row = text.splitlines()
        assert "CD x1e4" in head and "mIoU %" in head
        assert "70 ± 10" in row
        write_table(self.reports(), tmp_path / "t.txt")
        assert (tmp_path / "t.txt").read_text() == text

    def test_table_without_values(self):
        r = [MetricReport(0.0, 0.0, 0.0, 0.0, 100.0, 100.0)]
        assert "n/a" in format_table(r)


def test_exhaustive_masks_are_distinct():
    """Test the 2x2x2 enumeration covers every occupancy pattern once."""
    seen = {tuple(np.array([(m >> i) & 1 for i in range(8)])) for m in range(256)}
    assert len(seen) == 256 and len(list(itertools.product([0, 1], repeat=8))) == 256
