import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emkd import config, data as D, distill as K
from emkd.tensor import Tensor

SMALL = D.DatasetSpec(image_size=32, num_cases=6, slices_min=2, slices_max=3, organ_radius_min=8,
                      organ_radius_max=11, tumor_radius_min=2, tumor_radius_max=4)


class TestWindow:
    def test_endpoints(self):
        w = D.WindowSpec(-10.0, 30.0)
        np.testing.assert_array_equal(D.hu_window(np.array([-10.0, 30.0]), w), [0.0, 1.0])

    def test_midpoint(self):
        assert D.hu_window(np.array([10.0]), D.WindowSpec(-10.0, 30.0))[0] == 0.5

    def test_liver_window(self):
        assert (D.LIVER_WINDOW.lo, D.LIVER_WINDOW.hi) == (-40.0, 160.0)
        assert D.hu_window(np.array([60.0]), D.LIVER_WINDOW)[0] == 0.5

    def test_kidney_window(self):
        assert (D.KIDNEY_WINDOW.lo, D.KIDNEY_WINDOW.hi) == (-200.0, 300.0)

    def test_clamps(self):
        np.testing.assert_array_equal(D.hu_window(np.array([-1000.0, 1000.0])), [0.0, 1.0])

    def test_tensor_in_tensor_out(self):
        assert isinstance(D.hu_window(Tensor([0.0])), Tensor)

    def test_invalid(self):
        with pytest.raises(D.SpecError):
            D.WindowSpec(5.0, 5.0)


class TestSpec:
    def test_defaults(self):
        s = D.DatasetSpec()
        assert (s.image_size, s.num_cases, s.window) == (64, 40, D.LIVER_WINDOW)
        assert (s.background_mean, s.organ_mean, s.tumor_mean) == (-100.0, 80.0, 30.0)

    @pytest.mark.parametrize("kwargs", [
        dict(tumor_radius_max=20.0),
        dict(image_size=48),
        dict(image_size=4),
        dict(num_classes=4),
        dict(slices_min=5, slices_max=4),
        dict(binary_target="vessel"),
    ])
    def test_rejected(self, kwargs):
        with pytest.raises(D.SpecError):
            D.DatasetSpec(**kwargs)


class TestSynth:
    def test_deterministic(self):
        a, b = D.synth_case(SMALL, 3), D.synth_case(SMALL, 3)
        for x, y in zip(a[0] + a[1], b[0] + b[1]):
            np.testing.assert_array_equal(x, y)

    def test_cases_differ(self):
        assert not np.array_equal(D.synth_case(SMALL, 0)[0][0], D.synth_case(SMALL, 1)[0][0])

    @pytest.mark.parametrize("target", ["tumor", "organ"])
    def test_binary_labels(self, target):
        spec = D.DatasetSpec(**{**SMALL.__dict__, "binary_target": target})
        for idx in range(4):
            assert set(np.unique(np.stack(D.synth_case(spec, idx)[1]))) <= {0, 1}

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 1000), st.integers(0, 50))
    def test_tumors_inside_organ(self, seed, idx):
        spec = D.DatasetSpec(**{**SMALL.__dict__, "num_classes": 3, "seed": seed})
        _, masks = D.synth_case(spec, idx)
        organ_tumor = D.DatasetSpec(**{**spec.__dict__, "num_classes": 2, "binary_target": "organ"})
        _, organ = D.synth_case(organ_tumor, idx)
        for m, o in zip(masks, organ):
            assert np.all(o[m == 2] == 1)
        assert any((m == 2).any() for m in masks)

    def test_intensities_follow_classes(self):
        spec = D.DatasetSpec(num_cases=4, num_classes=3)
        img = np.concatenate([np.stack(D.synth_case(spec, i)[0]).ravel() for i in range(4)])
        lab = np.concatenate([np.stack(D.synth_case(spec, i)[1]).ravel() for i in range(4)])
        means = [img[lab == c].mean() for c in range(3)]
        assert means[0] < means[2] < means[1]

    def test_constant_predictors_score_below_half(self):
        ds = D.generate(D.DatasetSpec())
        from emkd import metrics as M
        for const in (0, 1):
            scores = [M.dice(np.full(c.masks.shape, const) == 1, c.masks == 1) for c in ds.cases]
            assert np.mean(scores) < 0.5


class TestAugment:
    def test_identity_element(self):
        x = np.arange(16.0).reshape(4, 4)
        np.testing.assert_array_equal(D.apply_d4(x, 0), x)

    def test_half_turn_is_involution(self):
        x = np.random.default_rng(0).normal(size=(5, 5))
        np.testing.assert_array_equal(D.apply_d4(D.apply_d4(x, 2), 2), x)

    def test_eight_distinct_elements(self):
        x = np.arange(9.0).reshape(3, 3)
        assert len({D.apply_d4(x, e).tobytes() for e in range(8)}) == 8

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_commutes_with_one_hot(self, seed):
        rng = np.random.default_rng(seed)
        img, mask = rng.normal(size=(6, 6)), rng.integers(0, 3, size=(6, 6))
        out_img, out_mask = D.augment(img, mask, np.random.default_rng(seed))
        e = int(np.random.default_rng(seed).integers(8))
        np.testing.assert_array_equal(out_img, D.apply_d4(img, e))
        a = K.one_hot(out_mask[None], 3)[0]
        b = D.apply_d4(K.one_hot(mask[None], 3)[0], e)
        np.testing.assert_array_equal(a, b)

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            D.augment(np.zeros((4, 6)), np.zeros((4, 6), int), np.random.default_rng(0))


class TestFolds:
    def test_partition(self):
        ids = [f"{i:03d}" for i in range(10)]
        folds = D.make_folds(ids, 5, 0)
        tests = [set(t) for _, t in folds]
        assert all(len(t) == 2 for t in tests)
        assert set().union(*tests) == set(ids)
        assert sum(len(t) for t in tests) == 10
        for train, test in folds:
            assert not set(train) & set(test) and len(train) + len(test) == 10

    def test_same_seed_same_folds(self):
        assert D.make_folds(range(12), 3, 7) == D.make_folds(range(12), 3, 7)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 30), st.integers(2, 8), st.integers(0, 100))
    def test_each_id_in_one_test_set(self, n, k, seed):
        if k > n:
            with pytest.raises(ValueError):
                D.make_folds(range(n), k, seed)
            return
        counts = np.zeros(n, int)
        sizes = []
        for _, test in D.make_folds(range(n), k, seed):
            counts[test] += 1
            sizes.append(len(test))
        assert np.all(counts == 1) and max(sizes) - min(sizes) <= 1

    def test_k_too_small(self):
        with pytest.raises(ValueError):
            D.make_folds(range(4), 1, 0)


class TestOnDisk:
    def test_roundtrip(self, tmp_path):
        ds = D.generate(SMALL)
        D.write_dataset(ds, tmp_path)
        assert (tmp_path / "dataset.cfg").is_file()
        assert (tmp_path / "case_000" / "slice_0.img").is_file()
        back = D.read_dataset(tmp_path)
        assert back.spec == ds.spec and back.case_ids() == ds.case_ids()
        for a, b in zip(ds.cases, back.cases):
            assert a.images.tobytes() == b.images.tobytes()
            np.testing.assert_array_equal(a.masks, b.masks)

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            D.read_dataset(tmp_path)

    def test_spec_file_unknown_key(self, tmp_path):
        (tmp_path / "s.cfg").write_text("image_size = 32\ncolour = red\n")
        with pytest.raises(config.ConfigFileError, match="colour"):
            config.load(D.DatasetSpec, tmp_path / "s.cfg")
