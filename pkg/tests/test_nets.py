import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emkd import io, nets as N
from emkd.nets import FeatureTaps, NetworkConfig, PairingError
from emkd.tensor import ShapeError, Tensor, backward


def taps_of(sizes, prefix=""):
    names = ["enc1", "enc2", "dec1", "dec2"] if len(sizes) == 4 else [f"t{i}" for i in range(len(sizes))]
    return FeatureTaps([(prefix + n, Tensor(np.zeros((1, 1, s, s)))) for n, s in zip(names, sizes)])


class TestBuild:
    def test_logit_shape(self):
        net = N.build_network(NetworkConfig(depth=2, base_channels=4, num_classes=2))
        assert net(np.zeros((1, 1, 32, 32))).shape == (1, 2, 32, 32)

    def test_same_seed_same_parameters(self):
        a = N.build_network(NetworkConfig(seed=3)).state_dict()
        b = N.build_network(NetworkConfig(seed=3)).state_dict()
        assert list(a) == list(b)
        for k in a:
            np.testing.assert_array_equal(a[k].data, b[k].data)

    def test_different_seed_differs(self):
        a = N.build_network(NetworkConfig(seed=0)).state_dict()
        b = N.build_network(NetworkConfig(seed=1)).state_dict()
        assert any(not np.array_equal(a[k].data, b[k].data) for k in a)

    def test_wider_has_more_params(self):
        wide = N.build_network(NetworkConfig(depth=3, base_channels=16))
        thin = N.build_network(NetworkConfig(depth=3, base_channels=4))
        assert N.count_params(wide) > N.count_params(thin)

    def test_he_init_scale(self):
        net = N.build_network(NetworkConfig(depth=3, base_channels=16))
        for name, p in net.params.items():
            if name.endswith(".bias"):
                assert not p.data.any()
            elif p.size >= 1000:
                fan_in = np.prod(p.shape[1:])
                assert abs(p.data.std() * np.sqrt(fan_in / 2.0) - 1.0) < 0.1

    def test_presets_keep_size_ratio(self):
        t = N.count_params(N.build_network(N.preset("teacher")))
        s = N.count_params(N.build_network(N.preset("student")))
        assert t >= 20 * s
        assert 50_000 < t < 200_000 and s < 4_000

    @pytest.mark.parametrize("kwargs", [dict(depth=1), dict(base_channels=0), dict(num_classes=1)])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            NetworkConfig(**kwargs)

    def test_indivisible_input(self):
        net = N.build_network(NetworkConfig(depth=3))
        with pytest.raises(ShapeError):
            net(np.zeros((1, 1, 12, 12)))

    def test_multichannel_input_rejected(self):
        with pytest.raises(ShapeError):
            N.build_network(NetworkConfig())(np.zeros((1, 2, 8, 8)))

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            N.preset("giant")


class TestTaps:
    def test_depth2_extents(self):
        net = N.build_network(NetworkConfig(depth=2))
        _, taps = N.forward_with_taps(net, np.zeros((1, 1, 32, 32)))
        assert [(n, hw) for n, hw in taps.spatial()] == [
            ("enc1", (16, 16)), ("enc2", (8, 8)), ("dec1", (16, 16)), ("dec2", (32, 32))]

    @pytest.mark.parametrize("depth", [2, 3, 4])
    def test_tap_count_and_channels(self, depth):
        cfg = NetworkConfig(depth=depth, base_channels=2, use_skips=depth % 2 == 1)
        _, taps = N.build_network(cfg).forward_with_taps(np.zeros((2, 1, 16, 16)))
        assert len(taps) == 2 * depth
        assert len(set(taps.names())) == len(taps)
        for s in range(1, depth + 1):
            assert taps[f"enc{s}"].shape[1] == cfg.enc_channels(s)
            assert taps[f"dec{s}"].shape[1] == cfg.dec_channels(s)

    def test_forward_is_pure(self):
        net = N.build_network(N.preset("teacher"))
        x = np.random.default_rng(0).normal(size=(1, 1, 16, 16))
        l1, t1 = net.forward_with_taps(x)
        l2, t2 = net.forward_with_taps(x)
        np.testing.assert_array_equal(l1.data, l2.data)
        for (_, a), (_, b) in zip(t1, t2):
            np.testing.assert_array_equal(a.data, b.data)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(1, 3), st.sampled_from([8, 16]), st.integers(2, 3))
    def test_logits_keep_batch_and_extent(self, n, size, classes):
        net = N.build_network(NetworkConfig(depth=2, base_channels=2, num_classes=classes))
        assert net(np.zeros((n, 1, size, size))).shape == (n, classes, size, size)

    def test_gradients_reach_every_parameter(self):
        net = N.build_network(N.preset("teacher"))
        backward((net(np.random.default_rng(1).normal(size=(1, 1, 8, 8))) ** 2).sum())
        assert all(p.grad is not None for p in net.parameters())


class TestMatchTaps:
    def test_first_and_last_of_equal_nets(self):
        pairing = N.match_taps(taps_of([16, 8, 16, 32]), taps_of([16, 8, 16, 32]))
        assert pairing.pairs == (("enc1", "enc1"), ("dec2", "dec2"))

    def test_single_tap_gives_one_pair(self):
        assert len(N.match_taps(taps_of([8]), taps_of([8]))) == 1

    def test_no_match_names_both_shapes(self):
        with pytest.raises(PairingError, match=r"7.*8|8.*7"):
            N.match_taps(taps_of([7, 7]), taps_of([8, 8]))

    def test_all_same_size_lists_every_pair(self):
        pairing = N.match_taps(taps_of([16, 8]), taps_of([8, 16, 8]), "all_same_size")
        assert pairing.pairs == (("t0", "t1"), ("t1", "t0"), ("t1", "t2"))

    def test_default_presets_pair(self):
        s_net, t_net = N.build_network(N.preset("student")), N.build_network(N.preset("teacher"))
        x = np.zeros((1, 1, 64, 64))
        pairing = N.match_taps(s_net.forward_with_taps(x)[1], t_net.forward_with_taps(x)[1])
        assert pairing.pairs == (("enc1", "enc1"), ("dec2", "dec3"))

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            N.match_taps(taps_of([8]), taps_of([8]), "nearest")


class TestCountAndSerialise:
    def test_single_1x1_conv(self):
        assert N._conv_params(np.random.default_rng(0), 1, 1, 1)[0].size + 1 == 2

    def test_count_matches_file_records(self, tmp_path):
        net = N.build_network(N.preset("student"))
        net.save(tmp_path / "m.emkm")
        records = io.read_model(tmp_path / "m.emkm")
        assert sum(t.size for t in records.values()) == N.count_params(net)

    @pytest.mark.parametrize("name", ["teacher", "student"])
    def test_roundtrip_restores_architecture(self, tmp_path, name):
        net = N.build_network(N.preset(name, num_classes=3, seed=5))
        net.save(tmp_path / "m.emkm")
        back = N.load_network(tmp_path / "m.emkm")
        assert (back.cfg.depth, back.cfg.base_channels, back.cfg.use_skips, back.cfg.num_classes) == \
               (net.cfg.depth, net.cfg.base_channels, net.cfg.use_skips, 3)
        x = np.random.default_rng(2).normal(size=(1, 1, 16, 16))
        np.testing.assert_array_equal(back(x).data, net(x).data)
