"""Context extraction, damage synthesis and dataset generation."""

import json

import numpy as np
import pytest

from toothfill.augment import (
    AugmentConfig,
    CompletionSample,
    _prepare,
    build_dataset,
    build_sample,
    build_variants,
    derive_seed,
    extract_tooth_context,
    load_manifest,
    occupancy_bbox,
    synthesize_damage,
)
from toothfill.errors import ConfigError, ValidationError
from toothfill.geometry import TAU, Primitive, SimplexNoiseParams, csg_union
from toothfill.meshio import LabeledArch, TriangleMesh

QUIET = SimplexNoiseParams(0.0, 2.8, 0)


def check_invariants(sample, carve=None):
    ctx, gt = sample.context.values, sample.ground_truth.values
    sample.context.check_spec(sample.ground_truth)
    assert np.all(ctx >= gt)
    if carve is not None:
        outside = carve.values >= TAU
        assert np.array_equal(ctx[outside], gt[outside])
    lo, hi = sample.tooth_bbox
    n = sample.context.resolution
    assert all(0 <= a < b <= n for a, b in zip(lo, hi))


class TestAugmentConfig:
    def test_defaults(self):
        cfg = AugmentConfig()
        assert cfg.max_primitives == 3
        assert cfg.relative_size_range == (0.2, 0.5)

    @pytest.mark.parametrize("kwargs", [
        dict(max_primitives=0), dict(max_primitives=4), dict(size_min=0.0),
        dict(size_min=0.6, size_max=0.5), dict(variants_per_tooth=0), dict(resolution=2),
        dict(scale_jitter=1.0),
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            AugmentConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = AugmentConfig(max_primitives=2, noise=SimplexNoiseParams(0.03, 2.0, 5))
        assert AugmentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestExtractToothContext:
    def test_context_is_superset(self, lower_arch):
        tooth, context, _ = extract_tooth_context(lower_arch, 36)
        assert tooth.n_faces > 0
        assert context.n_vertices > tooth.n_vertices

    def test_tooth_fits_normalized_window(self, lower_arch):
        for fdi in (31, 36, 47):
            tooth, _, _ = extract_tooth_context(lower_arch, fdi)
            lo, hi = tooth.bounds()
            assert np.all(lo >= -0.9 - 1e-12) and np.all(hi <= 0.9 + 1e-12)
            # the tooth's largest extent spans 1/1.5 of the window
            assert np.max(hi - lo) == pytest.approx(1.8 / 1.5)

    def test_inverse_recovers_arch_coordinates(self, lower_arch):
        tooth, _, norm = extract_tooth_context(lower_arch, 36)
        original = lower_arch.mesh.vertices[lower_arch.labels == 36]
        back = norm.invert(tooth.vertices)
        assert len(back) == len(original)
        assert np.max(np.abs(np.sort(back, axis=0) - np.sort(original, axis=0))) < 1e-6

    def test_neighbours_and_gingiva_included(self, lower_arch):
        ctx = extract_tooth_context(lower_arch, 36)
        # tooth, two neighbours and the gingiva at least
        assert ctx.rest.n_faces > 3 * ctx.tooth.n_faces

    def test_absent_tooth(self, lower_arch):
        with pytest.raises(ValidationError):
            extract_tooth_context(lower_arch, 18)

    def test_isolated_tooth_has_tooth_only_context(self):
        from toothfill.meshio import icosphere

        m = icosphere(2, 1.0)
        arch = LabeledArch(m, np.full(m.n_vertices, 36), "solo", "lower")
        ctx = extract_tooth_context(arch, 36)
        assert ctx.rest.is_empty()
        assert ctx.context.n_faces == ctx.tooth.n_faces


@pytest.fixture(scope="module")
def tooth_base(lower_arch):
    return _prepare(lower_arch, 36, None, AugmentConfig(resolution=24), 0)


class TestSynthesizeDamage:
    def test_zero_primitives_is_identity(self, tooth_base):
        res = synthesize_damage(tooth_base.tooth_sdf, tooth_base.surface, AugmentConfig(), 3,
                                n_primitives=0)
        assert np.array_equal(res.damaged.values, tooth_base.tooth_sdf.values)
        assert res.primitives == []

    def test_huge_sphere_removes_whole_tooth(self, tooth_base):
        lo, hi = tooth_base.ctx.tooth.bounds()
        diag = float(np.linalg.norm(hi - lo))
        sphere = Primitive("sphere", (1.5 * diag,), np.eye(3), 0.5 * (lo + hi))
        res = synthesize_damage(tooth_base.tooth_sdf, tooth_base.surface, AugmentConfig(), 0,
                                tooth_bounds=(lo, hi), primitives=[sphere], noise=QUIET)
        (i0, j0, k0), (i1, j1, k1) = tooth_base.tooth_bbox
        assert np.all(res.damaged.values[i0:i1, j0:j1, k0:k1] >= 0)
        assert np.all(res.damaged.values >= 0)

    def test_deterministic(self, tooth_base):
        cfg = AugmentConfig()
        a = synthesize_damage(tooth_base.tooth_sdf, tooth_base.surface, cfg, 17)
        b = synthesize_damage(tooth_base.tooth_sdf, tooth_base.surface, cfg, 17)
        assert a.damaged.values.tobytes() == b.damaged.values.tobytes()
        assert a.primitives == b.primitives

    def test_monotone_and_local(self, tooth_base):
        cfg = AugmentConfig()
        for seed in range(8):
            res = synthesize_damage(tooth_base.tooth_sdf, tooth_base.surface, cfg, seed,
                                    tooth_bounds=tooth_base.ctx.tooth.bounds())
            assert np.all(res.damaged.values >= tooth_base.tooth_sdf.values)
            outside = res.carve.values >= TAU
            assert np.array_equal(res.damaged.values[outside], tooth_base.tooth_sdf.values[outside])

    def test_primitive_draws(self, tooth_base):
        cfg = AugmentConfig()
        lo, hi = tooth_base.ctx.tooth.bounds()
        diag = float(np.linalg.norm(hi - lo))
        counts = set()
        for seed in range(40):
            res = synthesize_damage(tooth_base.tooth_sdf, tooth_base.surface, cfg, seed,
                                    tooth_bounds=(lo, hi))
            counts.add(len(res.primitives))
            for p in res.primitives:
                assert p["kind"] in ("sphere", "cube", "cylinder", "capsule", "cone")
                # centres are drawn from the surface samples
                assert np.min(np.linalg.norm(tooth_base.surface - p["translation"], axis=1)) < 1e-12
                # the largest parameter never exceeds half the largest allowed size
                assert max(p["params"]) <= 0.5 * 0.5 * diag + 1e-12
        assert counts == {1, 2, 3}

    def test_max_primitives_honoured(self, tooth_base):
        cfg = AugmentConfig(max_primitives=1)
        for seed in range(10):
            res = synthesize_damage(tooth_base.tooth_sdf, tooth_base.surface, cfg, seed)
            assert len(res.primitives) == 1

    def test_rejects_empty_points(self, tooth_base):
        with pytest.raises(ValidationError):
            synthesize_damage(tooth_base.tooth_sdf, np.zeros((0, 3)), AugmentConfig(), 0)


class TestBuildSample:
    def test_zero_damage_hook(self, lower_arch):
        s = build_sample(lower_arch, 36, None, AugmentConfig(resolution=16), 0, n_primitives=0)
        assert np.array_equal(s.context.values, s.ground_truth.values)

    def test_invariants_and_carve_locality(self, lower_arch, phantom_pair):
        cfg = AugmentConfig(resolution=16)
        base = _prepare(lower_arch, 46, phantom_pair[1], cfg, 5)
        s = build_sample(lower_arch, 46, phantom_pair[1], cfg, 5)
        res = synthesize_damage(base.tooth_sdf, base.surface, cfg, 5,
                                tooth_bounds=base.ctx.tooth.bounds())
        assert np.array_equal(csg_union(res.damaged, base.rest_sdf).values, s.context.values)
        check_invariants(s, res.carve)

    def test_bbox_contains_tooth(self, lower_arch):
        cfg = AugmentConfig(resolution=16)
        base = _prepare(lower_arch, 33, None, cfg, 0)
        s = build_sample(lower_arch, 33, None, cfg, 0)
        occ = np.argwhere(base.tooth_sdf.occupancy())
        lo, hi = np.array(s.tooth_bbox[0]), np.array(s.tooth_bbox[1])
        assert np.all(occ >= lo) and np.all(occ < hi)
        assert s.tooth_bbox == occupancy_bbox(base.tooth_sdf)

    def test_antagonist_shares_grid(self, small_samples):
        for s in small_samples:
            assert s.antagonist is not None
            s.context.check_spec(s.antagonist)
            # the opposing jaw shows up in the window but never overlaps the ground truth
            assert s.antagonist.occupancy().any()
            assert not np.any(s.antagonist.occupancy() & s.ground_truth.occupancy())

    def test_meta(self, small_samples):
        s = small_samples[0]
        assert s.meta["fdi"] == 31 and s.meta["seed"] == 0
        assert s.meta["arch_id"] == "phantom-0-lower"
        assert len(s.meta["primitives"]) >= 1

    def test_variants_share_ground_truth(self, lower_arch):
        cfg = AugmentConfig(resolution=16)
        vs = build_variants(lower_arch, 36, None, cfg, seeds=[1, 2, 3])
        assert len(vs) == 3
        for v in vs[1:]:
            assert np.array_equal(v.ground_truth.values, vs[0].ground_truth.values)
        for a in range(3):
            for b in range(a + 1, 3):
                assert not np.array_equal(vs[a].context.values, vs[b].context.values)

    def test_save_load_round_trip(self, tmp_path, small_samples):
        s = small_samples[1]
        entry = s.save(tmp_path, "x")
        assert entry["meta_file"] == "x.json"
        back = CompletionSample.load(tmp_path / "x.json")
        for name in ("context", "ground_truth", "antagonist"):
            assert getattr(back, name).values.tobytes() == getattr(s, name).values.tobytes()
        assert back.tooth_bbox == s.tooth_bbox
        assert back.meta == json.loads(json.dumps(s.meta))

    def test_invalid_bbox(self, small_samples):
        s = small_samples[0]
        with pytest.raises(ValidationError):
            CompletionSample(s.context, s.ground_truth, None, ((0, 0, 0), (0, 4, 4)), {})


@pytest.fixture(scope="module")
def two_arch(tmp_path_factory, phantom_pair):
    from toothfill.phantom import generate_phantom_arch

    arches = [phantom_pair, (generate_phantom_arch(1), None)]
    cfg = AugmentConfig(resolution=12, variants_per_tooth=2)
    out = tmp_path_factory.mktemp("ds")
    return arches, cfg, out, build_dataset(arches, cfg, out, master_seed=7)


class TestBuildDataset:
    def test_counts(self, two_arch):
        _, _, _, manifest = two_arch
        assert len(manifest["samples"]) == 2 * 14 * 2 - 2 * len(manifest["failures"])
        assert manifest["master_seed"] == 7

    def test_files_exist(self, two_arch):
        _, _, out, manifest = two_arch
        for s in manifest["samples"]:
            for key in ("meta_file", "context", "ground_truth"):
                assert (out / s[key]).is_file()
        loaded, samples = load_manifest(out / "manifest.json")
        assert loaded == manifest
        assert len(samples) == len(manifest["samples"])

    def test_rerun_is_bit_exact(self, two_arch, tmp_path):
        arches, cfg, out, _ = two_arch
        build_dataset(arches, cfg, tmp_path, master_seed=7)
        names = sorted(p.name for p in out.iterdir())
        assert names == sorted(p.name for p in tmp_path.iterdir())
        for name in names:
            assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name

    def test_failures_are_logged_not_raised(self, tmp_path):
        # a sliver tooth too thin to occupy any voxel
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1e-6]], dtype=float)
        f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
        sliver = LabeledArch(TriangleMesh(v, f), [31] * 4, "sliver", "lower")
        manifest = build_dataset([sliver], AugmentConfig(resolution=8), tmp_path)
        assert manifest["samples"] == []
        assert manifest["failures"][0]["fdi"] == 31
        assert (tmp_path / "manifest.json").is_file()

    def test_empty_arch_list(self, tmp_path):
        with pytest.raises(ValidationError):
            build_dataset([], AugmentConfig(), tmp_path)

    def test_derive_seed(self):
        assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
        assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)
        assert 0 <= derive_seed(2 ** 70, 5) < 2 ** 63
