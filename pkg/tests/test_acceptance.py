"""Acceptance criteria 1-11, one pass/fail line each.

Lines are collected in ``conftest.ACCEPTANCE_LINES`` and printed in the
terminal summary. Runtime budgets are enforced where they are hard limits;
the overfit run only reports against its target.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES, tree
from toothfill.augment import AugmentConfig, _prepare, build_sample, synthesize_damage
from toothfill.denoiser import DenoiserUNet, UNetConfig, gradient_check
from toothfill.diffusion import (
    SecondMomentResampler,
    Trainer,
    cfg_mix,
    complete_batch,
    eps_from_x0,
    linear_schedule,
    p_sample_step,
    posterior_mean,
    predict_x0,
    q_sample,
    respace,
    scale_grid,
)
from toothfill.geometry import (
    TAU,
    Primitive,
    SdfGrid,
    SimplexNoiseParams,
    csg_difference,
    csg_intersection,
    csg_union,
    cube_grid,
    eval_primitive,
    perturb_with_simplex,
    random_rotation,
    sample_to_grid,
)
from toothfill.meshio import icosphere, marching_cubes, mesh_to_sdf
from toothfill.metrics import (
    MetricReport,
    antagonist_interference,
    chamfer,
    iou_voxel,
    l1_volume,
)
from toothfill.phantom import generate_phantom_arch, generate_phantom_pair

# overfit run settings (see the decisions ledger for the choice of steps)
OVERFIT_TEETH = (31, 33, 35, 36, 42, 44, 46, 47)
OVERFIT_STEPS = 5000
OVERFIT_TARGET_S = 30 * 60


def _record(n, ok, text):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@contextmanager
def criterion(n, text, budget=None):
    """Time the body and record one line; a budget overrun counts as failure."""
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else ""
        _record(n, False, f"{text} ({type(exc).__name__}: {msg[:120]})")
        raise
    dt = time.perf_counter() - t0
    if budget is not None and dt > budget:
        _record(n, False, f"{text} (took {dt:.1f}s, budget {budget:.0f}s)")
        pytest.fail(f"criterion {n} exceeded its {budget}s budget ({dt:.1f}s)")
    _record(n, True, f"{text} ({dt:.1f}s)")


def _box_oracle(p, lo, hi):
    outside = np.linalg.norm(p - np.clip(p, lo, hi), axis=-1)
    inside = -np.min(np.concatenate([p - lo, hi - p], axis=-1), axis=-1)
    return np.where(np.all((p > lo) & (p < hi), axis=-1), inside, outside)


def _random_grid(rng, n=8):
    o, s = cube_grid(n)
    return SdfGrid(n, o, s, rng.uniform(-TAU, TAU, (n, n, n)).astype(np.float32))


def test_criterion_01_geometry_oracles():
    with criterion(1, "geometry oracles: sphere/box exact, CSG identities, |delta| <= alpha, alpha=0 identity", 10):
        rng = np.random.default_rng(1)
        p = rng.uniform(-2, 2, (1000, 3))
        c = np.array([0.3, -0.2, 0.5])
        sphere = Primitive("sphere", (0.7,), random_rotation(rng), c)
        assert np.max(np.abs(eval_primitive(sphere, p) - (np.linalg.norm(p - c, axis=1) - 0.7))) < 1e-12
        half, rot, t = np.array([0.3, 0.5, 0.2]), random_rotation(rng), np.array([0.1, 0.2, -0.3])
        box = Primitive("cube", tuple(half), rot, t)
        assert np.max(np.abs(eval_primitive(box, p) - _box_oracle((p - t) @ rot, -half, half))) < 1e-12

        for _ in range(20):
            a, b, d = (_random_grid(rng) for _ in range(3))
            full = SdfGrid.filled(a.resolution, a.origin, a.spacing, -TAU)
            empty = SdfGrid.filled(a.resolution, a.origin, a.spacing, TAU)
            for op in (csg_union, csg_intersection):
                assert np.array_equal(op(a, b).values, op(b, a).values)
                assert np.array_equal(op(op(a, b), d).values, op(a, op(b, d)).values)
                assert np.array_equal(op(a, a).values, a.values)
            assert np.array_equal(csg_difference(a, empty).values, a.values)
            assert not np.any(csg_difference(a, full).values < 0)
            assert not np.any(csg_difference(a, a).values < 0)
            assert np.array_equal(csg_intersection(a, empty).values, empty.values)

        o, s = cube_grid(16)
        g = SdfGrid(16, o, s, rng.uniform(-0.1, 0.1, (16, 16, 16)).astype(np.float32))
        for seed in range(5):
            out = perturb_with_simplex(g, SimplexNoiseParams(0.06, 2.8, seed))
            assert np.max(np.abs(out.values.astype(np.float64) - g.values)) <= 0.06 + 1e-7
            assert np.array_equal(perturb_with_simplex(g, SimplexNoiseParams(0.0, 2.8, seed)).values, g.values)


def test_criterion_02_marching_cubes():
    with criterion(2, "marching cubes on r=0.8 sphere at 32^3: vertices within one voxel, Euler 2", 5):
        o, s = cube_grid(32)
        g = sample_to_grid(lambda q: np.linalg.norm(q, axis=-1) - 0.8, 32, o, s)
        m = marching_cubes(g)
        assert m.n_faces > 1000
        assert np.max(np.abs(np.linalg.norm(m.vertices, axis=1) - 0.8)) < s
        assert m.euler_characteristic() == 2


def test_criterion_03_mesh_to_sdf():
    with criterion(3, "mesh_to_sdf of an icosphere at 32^3: near-surface error < 1.5 voxel", 30):
        o, s = cube_grid(32)
        g = mesh_to_sdf(icosphere(3, 0.8), 32, o, s)
        analytic = np.linalg.norm(g.points(), axis=-1) - 0.8
        near = np.abs(g.values) < TAU
        assert near.sum() > 1000
        assert np.max(np.abs(g.values[near] - analytic[near])) < 1.5 * s


def test_criterion_04_augmentation_invariants():
    with criterion(4, "augmentation on 50 phantom samples: only removes, local to primitives, deterministic", 120):
        cfg = AugmentConfig(resolution=24)
        jobs = []
        for arch_seed in range(4):
            arch = generate_phantom_arch(arch_seed, "lower")
            jobs += [(arch, fdi) for fdi in arch.teeth()]
        assert len(jobs) >= 50
        for i, (arch, fdi) in enumerate(jobs[:50]):
            seed = 1000 + i
            sample = build_sample(arch, fdi, None, cfg, seed)
            # an independent second computation of the same sample through its parts
            base = _prepare(arch, fdi, None, cfg, seed)
            res = synthesize_damage(base.tooth_sdf, base.surface, cfg, seed, tooth_bounds=base.ctx.tooth.bounds())
            assert sample.context.values.tobytes() == csg_union(res.damaged, base.rest_sdf).values.tobytes()
            assert sample.ground_truth.values.tobytes() == base.ground_truth.values.tobytes()
            ctx, gt = sample.context.values, sample.ground_truth.values
            assert np.all(ctx >= gt), (arch.arch_id, fdi)
            outside = res.carve.values >= TAU
            assert np.array_equal(ctx[outside], gt[outside]), (arch.arch_id, fdi)
            assert np.all(res.damaged.values >= base.tooth_sdf.values)


def test_criterion_05_diffusion_algebra():
    with criterion(5, "diffusion algebra: inversion, respacing, guidance mix, forward variance", 60):
        s = linear_schedule()
        rng = np.random.default_rng(2)
        x0 = rng.uniform(-1, 1, 64)
        for t in range(1, s.T + 1):
            eps = rng.standard_normal(64)
            x_t = q_sample(x0, t, eps, s)
            assert np.max(np.abs(predict_x0(eps, x_t, t, s) - x0)) < 1e-4
            assert np.max(np.abs(eps_from_x0(x0, x_t, t, s) - eps)) < 1e-4
            # a noise-free reverse step lands on the posterior mean
            assert np.array_equal(p_sample_step(eps, x_t, t, s, z=np.zeros(64)), posterior_mean(eps, x_t, t, s))

        ident = respace(s, 1000)
        assert np.max(np.abs(ident.betas - s.betas)) < 1e-12
        r = respace(s, 100)
        for j, k in enumerate(r.kept_indices, 1):
            assert r.alpha_bar(j) == s.alpha_bar(int(k))

        a, b = rng.standard_normal((2, 50))
        for w in (0.0, 1.0, 2.0):
            np.testing.assert_allclose(cfg_mix(a, b, w), (1 - w) * a + w * b, rtol=0, atol=1e-15)

        x0 = np.full((10_000, 64), 0.4)
        for t in (1, 10, 100, 500, 1000):
            var = q_sample(x0, t, rng.standard_normal((10_000, 64)), s).var(axis=0).mean()
            assert abs(var / (1 - s.alpha_bar(t)) - 1) < 0.03, t


def test_criterion_06_resampler():
    with criterion(6, "loss-aware resampler: unbiased within 2% at 1e5 draws, uniform during warm-up", 30):
        T = 200
        r = SecondMomentResampler(T)
        rng = np.random.default_rng(3)
        for t in range(1, T + 1):
            for k in range(10):
                assert np.array_equal(r.probabilities(), np.full(T, 1 / T))
                r.update(t, (1 + t / 20.0) * rng.uniform(0.5, 1.5))
        assert r.warmed_up()
        f = lambda t: np.sin(t / 17.0) ** 2 + 0.5 + (t % 7) / 7.0  # noqa: E731
        t, w = r.sample(rng, 100_000)
        truth = np.mean(f(np.arange(1, T + 1)))
        assert abs(np.mean(w * f(t)) / truth - 1) < 0.02


def test_criterion_07_gradient_check():
    with criterion(7, "float64 gradient check of the full 8^3 UNet, 200 entries per tensor, rel err < 1e-3", 300):
        torch.manual_seed(0)
        net = DenoiserUNet(UNetConfig(resolution=8, base_channels=4, zero_init_head=False))
        g = torch.Generator().manual_seed(0)
        x, c, a = (torch.randn(1, 1, 8, 8, 8, generator=g) for _ in range(3))
        target = torch.randn(1, 1, 8, 8, 8, generator=g)
        report = gradient_check(net, (x, torch.tensor([17]), c, a), target, per_tensor=200)
        small = {n: p.numel() for n, p in net.named_parameters()}
        assert report.n_checked == sum(min(200, k) for k in small.values())
        assert report.passed, max(report.per_tensor.items(), key=lambda kv: kv[1])


def test_criterion_08_antagonist_additivity():
    with criterion(8, "zeroed antagonist encoder reproduces the context-only output bitwise on 10 inputs"):
        torch.manual_seed(0)
        net = DenoiserUNet(UNetConfig(resolution=16, base_channels=8, zero_init_head=False))
        with torch.no_grad():
            for p in net.phi_a.parameters():
                p.zero_()
        g = torch.Generator().manual_seed(1)
        with torch.no_grad():
            for _ in range(10):
                x, c, a = (torch.randn(1, 1, 16, 16, 16, generator=g) for _ in range(3))
                t = torch.randint(1, 1001, (1,), generator=g)
                assert torch.equal(net(x, t, c, a), net(x, t, c))


def _grid_tensor(grids):
    return torch.as_tensor(np.stack([scale_grid(g.values) for g in grids])[:, None], dtype=torch.float32)


@torch.no_grad()
def _uniform_loss(net, samples, schedule):
    """Epsilon MSE at t = 10, 20, ..., T with fixed noise.

    Training losses follow the resampler, which favours hard timesteps, so
    they overstate the objective once it warms up.
    """
    net.eval()
    x0 = _grid_tensor([s.ground_truth for s in samples])
    x_c = _grid_tensor([s.context for s in samples])
    x_a = _grid_tensor([s.antagonist for s in samples])
    g = torch.Generator().manual_seed(0)
    losses = []
    for t in range(10, schedule.T + 1, 10):
        eps = torch.randn(x0.shape, generator=g)
        tt = np.full(len(samples), t)
        pred = net(q_sample(x0, tt, eps, schedule), torch.as_tensor(tt), x_c, x_a)
        losses.append(float(((pred - eps) ** 2).mean()))
    return float(np.mean(losses))


@pytest.mark.slow
def test_criterion_09_overfit():
    with criterion(9, f"overfit 8 samples at 16^3 for {OVERFIT_STEPS} steps, >= 6/8 with mIoU > 90% and mL1 < 0.02"):
        t0 = time.perf_counter()
        lower, upper = generate_phantom_pair(0)
        cfg = AugmentConfig(resolution=16)
        samples = [build_sample(lower, fdi, upper, cfg, seed=i) for i, fdi in enumerate(OVERFIT_TEETH)]
        torch.manual_seed(0)
        net = DenoiserUNet(UNetConfig(resolution=16, base_channels=16))
        trainer = Trainer(net, lr=1e-4, seed=0)
        initial = _uniform_loss(net, samples, trainer.schedule)
        for _ in range(OVERFIT_STEPS):
            trainer.step(samples)
        final = _uniform_loss(net, samples, trainer.schedule)

        preds = complete_batch(net, [s.context for s in samples], [s.antagonist for s in samples],
                               steps=100, w=1.0, seed=0)
        scores = [(iou_voxel(p, s.ground_truth, s.tooth_bbox), l1_volume(p, s.ground_truth, s.tooth_bbox))
                  for p, s in zip(preds, samples)]
        good = sum(iou > 90 and l1 < 0.02 for iou, l1 in scores)
        dt = time.perf_counter() - t0
        print(f"overfit loss {initial:.4f} -> {final:.5f}")
        print("overfit scores (masked IoU %, masked L1):", [(round(i, 1), round(l, 4)) for i, l in scores])
        print(f"overfit runtime {dt:.0f}s against a {OVERFIT_TARGET_S}s target")
        assert final < 0.01 * initial, (initial, final)
        assert good >= 6, scores


def _occ(mask):
    return SdfGrid(mask.shape[0], (0, 0, 0), 1.0, np.where(mask, -0.1, 0.1).astype(np.float32))


def test_criterion_10_metric_suite():
    with criterion(10, "metric examples exact and 3x3x3 IoU monotonicity over every count class", 60):
        z = SdfGrid(2, (0, 0, 0), 1.0, np.zeros((2, 2, 2), np.float32), truncation=1.0)
        v = np.zeros((2, 2, 2), np.float32)
        v[1, 1, 0] = 0.8
        assert l1_volume(z, z) == 0.0
        assert l1_volume(z, z.with_values(v)) == pytest.approx(0.1, abs=1e-8)
        o, s = cube_grid(4)
        base = SdfGrid(4, o, s, np.random.default_rng(0).uniform(-0.2, 0.2, (4, 4, 4)).astype(np.float32))
        assert l1_volume(base.with_values(base.values + np.float32(0.01)), base) == pytest.approx(0.01, abs=1e-7)

        p, g = np.zeros((2, 3, 3, 3), bool)
        p.flat[[0, 1]] = True
        g.flat[[1, 2]] = True
        assert iou_voxel(_occ(p), _occ(g)) == pytest.approx(100 / 3)
        assert iou_voxel(_occ(p), _occ(p)) == 100.0
        assert iou_voxel(_occ(p), _occ(~p)) == 0.0
        a, b = np.zeros((2, 3, 3, 3), bool)
        a.flat[:5] = True
        b.flat[4:10] = True
        assert antagonist_interference(_occ(a), _occ(b)) == pytest.approx(10.0)
        assert antagonist_interference(_occ(a), _occ(~a)) == 0.0
        assert antagonist_interference(_occ(a), _occ(a)) == 100.0

        from toothfill.meshio import TriangleMesh

        def square(zz):
            return TriangleMesh(np.array([[0, 0, zz], [1, 0, zz], [1, 1, zz], [0, 1, zz]], float), [[0, 1, 2], [0, 2, 3]])

        sph = icosphere(2, 0.5)
        assert chamfer(sph, sph, 2000) == 0.0
        assert chamfer(square(0.0), square(0.1), 20_000, seed=1) == pytest.approx(0.01, rel=0.01)
        assert chamfer(square(0.0), sph, 3000) == chamfer(sph, square(0.0), 3000)

        # IoU of a 3x3x3 prediction depends on it only through (|P & G|, |P - G|); every such class
        # for every ground-truth size is visited with random members, and every single-voxel move
        # toward the ground truth must not lower the score
        rng = np.random.default_rng(10)
        for g_size in range(28):
            gt = np.zeros(27, bool)
            gt[rng.permutation(27)[:g_size]] = True
            inside, outside = np.flatnonzero(gt), np.flatnonzero(~gt)
            g_grid = _occ(gt.reshape(3, 3, 3))
            for n_hit in range(g_size + 1):
                for n_extra in range(27 - g_size + 1):
                    for _ in range(2):
                        pred = np.zeros(27, bool)
                        pred[rng.permutation(inside)[:n_hit]] = True
                        pred[rng.permutation(outside)[:n_extra]] = True
                        score = iou_voxel(_occ(pred.reshape(3, 3, 3)), g_grid)
                        union = g_size + n_extra
                        assert score == pytest.approx(100.0 if union == 0 else 100.0 * n_hit / union)
                        for k in np.flatnonzero(pred != gt):
                            moved = pred.copy()
                            moved[k] = gt[k]
                            assert iou_voxel(_occ(moved.reshape(3, 3, 3)), g_grid) >= score


def test_criterion_11_cli_smoke(cli_smoke):
    with criterion(11, "CLI phantom -> augment -> train(200) -> complete -> eval runs clean and reruns bit-exactly"):
        roots, codes = cli_smoke
        assert codes == [[0] * 6, [0] * 6]
        for line in (roots[0] / "eval" / "reports.jsonl").read_text().splitlines():
            rec = json.loads(line)
            rec.pop("id")
            MetricReport(**{k: (float("inf") if v is None and "chamfer" in k else v) for k, v in rec.items()})
        a, b = tree(roots[0]), tree(roots[1])
        assert a.keys() == b.keys() and all(a[k] == b[k] for k in a)
