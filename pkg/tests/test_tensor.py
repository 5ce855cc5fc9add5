import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from emkd import oracle as O
from emkd import tensor as T
from emkd.tensor import ParameterError, ShapeError, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def grid(max_side=6, min_rank=2):
    shapes = st.lists(st.integers(1, max_side), min_size=min_rank, max_size=4).map(tuple)
    return shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite))


class TestTensorBasics:
    def test_invariants_hold(self):
        t = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        assert t.size == 6 and t.shape == (2, 3)
        assert t.data.dtype == np.float64

    def test_rank_above_four_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_data_is_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_constructor_copies_caller_array(self):
        a = np.ones(3)
        Tensor(a)
        a[0] = 2.0  # caller keeps a writable array


class TestConv2d:
    def test_ones_sum_to_four(self):
        out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 4, 5))
        np.testing.assert_array_equal(T.conv2d(x, np.ones((1, 1, 1, 1))).data, x)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        x, k = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
        np.testing.assert_allclose(T.conv2d(x, k).data, O.ref_conv2d(x, k), atol=1e-9, rtol=0)

    @pytest.mark.parametrize("stride,pad,expect", [(1, 0, (3, 4)), (2, 1, (3, 3)), (1, 1, (5, 6))])
    def test_output_extent(self, stride, pad, expect):
        out = T.conv2d(np.zeros((1, 1, 5, 6)), np.zeros((2, 1, 3, 3)), stride=stride, padding=pad)
        assert out.shape == (1, 2) + expect

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError):
            T.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)), padding=1)

    @pytest.mark.parametrize("stride,pad", [(0, 0), (1, -1)])
    def test_bad_parameters(self, stride, pad):
        with pytest.raises(ParameterError):
            T.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), stride=stride, padding=pad)

    def test_bias_gradient_is_output_count(self):
        x = Tensor(np.ones((2, 1, 4, 4)))
        b = Tensor(np.zeros(3), requires_grad=True)
        T.backward(T.conv2d(x, np.ones((3, 1, 3, 3)), b).sum())
        np.testing.assert_array_equal(b.grad, np.full(3, 2 * 2 * 2.0))


class TestPooling:
    def test_avg_hand_mean(self):
        np.testing.assert_array_equal(T.avg_pool2d([[1.0, 2.0], [3.0, 4.0]], 2).data, [[2.5]])

    def test_max_element(self):
        np.testing.assert_array_equal(T.max_pool2d([[1.0, 2.0], [3.0, 4.0]], 2).data, [[4.0]])

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_avg_of_constant(self, k):
        x = np.full((1, 2, 6, 6), 3.25)
        np.testing.assert_array_equal(T.avg_pool2d(x, k).data, np.full((1, 2, 6 // k, 6 // k), 3.25))

    @pytest.mark.parametrize("k", [0, -1])
    def test_nonpositive_k(self, k):
        with pytest.raises(ParameterError):
            T.avg_pool2d(np.zeros((4, 4)), k)

    def test_non_divisible(self):
        with pytest.raises(ParameterError):
            T.max_pool2d(np.zeros((5, 4)), 2)

    def test_max_tie_break_first_element(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        T.backward(T.max_pool2d(x, 2).sum())
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0], [0.0, 0.0]])


class TestUpsample:
    def test_replication(self):
        out = T.upsample_nearest([[1.0, 2.0], [3.0, 4.0]], 2).data
        np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_k1_identity(self):
        x = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(T.upsample_nearest(x, 1).data, x)

    def test_gradient_sums_block(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        T.backward(T.upsample_nearest(x, 3).sum())
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 9.0))

    @settings(max_examples=60, deadline=None)
    @given(grid(), st.integers(1, 4))
    def test_pool_after_upsample_is_exact_identity(self, x, k):
        np.testing.assert_array_equal(T.avg_pool2d(T.upsample_nearest(x, k), k).data, x)


class TestSoftmax:
    def test_symmetric_logits(self):
        np.testing.assert_array_equal(T.channel_softmax(np.zeros((1, 2, 1, 1))).data.ravel(), [0.5, 0.5])

    def test_matches_exp_normalise(self):
        p = T.channel_softmax(np.array([1.0, 0.0]).reshape(1, 2, 1, 1)).data.ravel()
        e = np.exp(1.0)
        np.testing.assert_allclose(p, [e / (e + 1), 1 / (e + 1)], rtol=0, atol=1e-15)

    def test_single_channel_rejected(self):
        with pytest.raises(ShapeError):
            T.channel_softmax(np.zeros((1, 1, 2, 2)))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 5).flatmap(lambda c: arrays(np.float64, (2, c, 3, 2), elements=finite)),
           st.floats(0, 1e3))
    def test_sums_to_one_and_shift_invariant(self, z, c):
        p = T.channel_softmax(z).data
        assert np.all(p > 0)
        assert np.max(np.abs(p.sum(axis=1) - 1.0)) <= 1e-12
        shift = np.random.default_rng(0).uniform(-c, c, size=(2, 1, 3, 2))
        assert np.max(np.abs(T.channel_softmax(z + shift).data - p)) <= 1e-12

    def test_large_logits_stable(self):
        p = T.channel_softmax(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1)).data
        assert np.all(np.isfinite(p))


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor(np.random.default_rng(2).normal(size=(3, 4)), requires_grad=True)
        T.backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_unreached_leaf_has_zero_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        T.backward((x * x).sum() + (y * 0.0).sum())
        np.testing.assert_array_equal(y.grad, np.zeros(3))

    def test_non_scalar_root(self):
        with pytest.raises(ShapeError):
            T.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_accumulates_until_reset(self):
        x = Tensor(np.ones(2), requires_grad=True)
        T.backward((x * 3.0).sum())
        T.backward((x * 3.0).sum())
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])
        x.zero_grad()
        assert x.grad is None

    def test_shared_subexpression_visited_once(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        T.backward((y + y).sum())
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.ones(1), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        T.backward(y.sum())
        np.testing.assert_array_equal(x.grad, [1.0])


class TestGradCheck:
    def test_sum_of_squares_below_1e6(self):
        x = np.random.default_rng(3).normal(size=(2, 3))
        assert T.grad_check(lambda t: (t * t).sum(), x) < 1e-6

    def test_constant_function_is_zero(self):
        assert T.grad_check(lambda t: Tensor(4.0) + (t * 0.0).sum(), np.ones(3)) == 0.0

    def test_conv_sum(self):
        rng = np.random.default_rng(4)
        k = rng.normal(size=(2, 1, 3, 3))
        assert T.grad_check(lambda t: T.conv2d(t, k, padding=1).sum(), rng.normal(size=(1, 1, 4, 4))) < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(grid(max_side=4))
    def test_elementwise_chain(self, x):
        x = np.clip(x, -3, 3)
        f = lambda t: (T.exp(t * 0.3) * t + T.sqrt(t * t + 1.0)).sum()
        assert T.grad_check(f, x) < 1e-4

    def test_input_left_untouched(self):
        x = np.random.default_rng(5).normal(size=(2, 2))
        before = x.copy()
        T.grad_check(lambda t: (t * t).sum(), x)
        np.testing.assert_array_equal(x, before)
