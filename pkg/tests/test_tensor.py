import numpy as np
import numpy.testing as npt
import pytest

from docshadow import tensor as T
from docshadow.errors import ConfigError, NumericError, ShapeError

from gradcheck import RTOL, max_rel_error
from oracles import bilinear_loop, conv2d_loop, depthwise_loop


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestConv2d:
    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3), (1, 2, 5)])
    def test_matches_loop(self, rng, stride, pad, k):
        x = rng.standard_normal((2, 3, 9, 8))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        with T.precision(np.float64):
            got = T.conv2d(x, w, b, stride=stride, pad=pad).data
        npt.assert_allclose(got, conv2d_loop(x, w, b, stride, pad), rtol=1e-10, atol=1e-10)

    def test_float32_storage(self, rng):
        out = T.conv2d(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), pad=1)
        assert out.data.dtype == np.float32

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            T.conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 4, 3, 3)))

    def test_requires_4d(self):
        with pytest.raises(ShapeError):
            T.conv2d(np.zeros((3, 4, 4)), np.zeros((2, 3, 3, 3)))

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
    def test_gradients(self, rng, stride, pad):
        arrays = dict(x=rng.standard_normal((2, 3, 7, 6)), w=rng.standard_normal((4, 3, 3, 3)),
                      b=rng.standard_normal(4))
        err = max_rel_error(lambda x, w, b: T.conv2d(x, w, b, stride=stride, pad=pad), arrays, n_samples=30)
        assert err < RTOL


class TestDepthwise:
    def test_matches_loop(self, rng):
        x = rng.standard_normal((2, 3, 7, 6))
        dw = rng.standard_normal((3, 1, 3, 3))
        with T.precision(np.float64):
            got = T.depthwise_conv2d(x, dw).data
        npt.assert_allclose(got, depthwise_loop(x, dw), rtol=1e-10, atol=1e-10)

    def test_separable_is_depthwise_then_pointwise(self, rng):
        x = rng.standard_normal((1, 4, 6, 6))
        dw, pw, b = rng.standard_normal((4, 1, 3, 3)), rng.standard_normal((5, 4, 1, 1)), rng.standard_normal(5)
        with T.precision(np.float64):
            got = T.depthwise_separable_conv(x, dw, pw, b).data
        npt.assert_allclose(got, conv2d_loop(depthwise_loop(x, dw), pw, b), rtol=1e-10, atol=1e-10)

    def test_gradients(self, rng):
        arrays = dict(x=rng.standard_normal((2, 3, 6, 5)), dw=rng.standard_normal((3, 1, 3, 3)),
                      pw=rng.standard_normal((4, 3, 1, 1)), b=rng.standard_normal(4))
        err = max_rel_error(lambda x, dw, pw, b: T.depthwise_separable_conv(x, dw, pw, b), arrays, n_samples=30)
        assert err < RTOL

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.depthwise_conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 1, 3, 3)))


class TestResize:
    @pytest.mark.parametrize("shape", [(8, 6), (3, 5), (16, 16), (5, 4)])
    def test_matches_loop(self, rng, shape):
        x = rng.standard_normal((1, 2, 4, 4))
        with T.precision(np.float64):
            got = T.resize_bilinear(x, *shape).data
        npt.assert_allclose(got, bilinear_loop(x, *shape), atol=1e-12)

    def test_constant_preserved(self):
        out = T.resize_bilinear(np.full((1, 1, 3, 5), 0.25), 12, 7)
        npt.assert_allclose(out.data, 0.25, atol=1e-7)

    def test_same_size_is_identity(self, rng):
        x = rng.random((1, 3, 5, 6)).astype(np.float32)
        npt.assert_array_equal(T.resize_bilinear(x, 5, 6).data, x)

    def test_gradients(self, rng):
        err = max_rel_error(lambda x: T.resize_bilinear(x, 9, 4), dict(x=rng.standard_normal((1, 2, 5, 6))))
        assert err < RTOL


class TestElementwise:
    @pytest.mark.parametrize("kind", ["relu", "leaky_relu", "sigmoid", "tanh"])
    def test_activation_gradients(self, rng, kind):
        x = rng.standard_normal((2, 3, 4, 4))
        x[np.abs(x) < 1e-3] = 0.5  # stay away from the kink
        assert max_rel_error(lambda x: T.activation(x, kind), dict(x=x)) < RTOL

    def test_leaky_slope(self):
        out = T.activation(np.array([[[[-1.0, 2.0]]]]), "leaky_relu")
        npt.assert_allclose(out.data, [[[[-0.2, 2.0]]]])

    def test_unknown_activation(self):
        with pytest.raises(ConfigError):
            T.activation(np.zeros((1, 1, 1, 1)), "gelu")

    def test_broadcast_mul_add_gradients(self, rng):
        arrays = dict(a=rng.standard_normal((2, 3, 4, 5)), b=rng.standard_normal((2, 3, 4, 1)),
                      c=rng.standard_normal((1, 3, 1, 5)))
        err = max_rel_error(lambda a, b, c: T.add(T.mul(a, b), T.mul(c, a)), arrays, n_samples=30)
        assert err < RTOL

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 3, 3)))

    def test_axis_pool_values(self, rng):
        x = rng.standard_normal((1, 2, 3, 4))
        npt.assert_allclose(T.axis_pool(x, "height").data, x.mean(axis=2, keepdims=True), rtol=1e-6)
        npt.assert_allclose(T.axis_pool(x, "width").data, x.mean(axis=3, keepdims=True), rtol=1e-6)

    @pytest.mark.parametrize("axis", ["height", "width"])
    def test_axis_pool_gradients(self, rng, axis):
        assert max_rel_error(lambda x: T.axis_pool(x, axis), dict(x=rng.standard_normal((2, 3, 4, 5)))) < RTOL

    def test_concat_split_swap_gradients(self, rng):
        def fn(a, b):
            y = T.concat([a, T.swap_hw(b)], axis=2)
            p, q = T.split(y, [3, 4], axis=2)
            return [T.mul(p, p), q]
        arrays = dict(a=rng.standard_normal((1, 2, 3, 4)), b=rng.standard_normal((1, 2, 4, 4)))
        assert max_rel_error(fn, arrays) < RTOL

    def test_reductions_and_l1_gradients(self, rng):
        x = rng.standard_normal((2, 2, 3, 3))
        fn = lambda x: T.add(T.mean_all(T.absolute(x)), T.scale(T.mean_all(T.square(T.sub(x, np.full((1, 1, 1, 1), 0.3)))), 2.0))
        assert max_rel_error(fn, dict(x=x)) < RTOL

    def test_clamp_gradient_masks_outside(self):
        x = T.Tensor(np.array([[[[-0.5, 0.5, 1.5]]]]), requires_grad=True)
        T.sum_all(T.clamp(x, 0.0, 1.0)).backward()
        npt.assert_array_equal(x.grad, [[[[0.0, 1.0, 0.0]]]])

    def test_non_finite_raises(self):
        with pytest.raises(NumericError):
            T.mul(np.array([np.inf]).reshape(1, 1, 1, 1), np.ones((1, 1, 1, 1)))


class TestTape:
    def test_shared_node_accumulates(self):
        x = T.Tensor(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
        y = T.mul(x, x)
        T.sum_all(T.add(y, y)).backward()
        npt.assert_allclose(x.grad, [[[[12.0]]]])

    def test_non_scalar_backward(self):
        x = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            T.scale(x, 2.0).backward()

    def test_no_grad_builds_no_tape(self):
        x = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with T.no_grad():
            y = T.scale(x, 2.0)
        assert not y.requires_grad and y._parents == ()

    def test_tape_freed_after_backward(self):
        x = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        y = T.sum_all(T.scale(x, 2.0))
        y.backward()
        assert y._parents == ()

    def test_deep_chain_no_recursion_limit(self):
        x = T.Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        y = x
        for _ in range(5000):
            y = T.scale(y, 1.0)
        T.sum_all(y).backward()
        npt.assert_allclose(x.grad, 1.0)

    def test_trace_records_scopes(self):
        with T.trace() as events, T.trace_scope("outer"):
            T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 2, 3, 3)), pad=1)
        scope, op, attrs, in_shape, out_shape = events[0]
        assert (scope, op, in_shape, out_shape) == ("outer", "conv2d", (1, 2, 4, 4), (1, 3, 4, 4))
        assert attrs["cin"] == 2 and attrs["cout"] == 3


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = {"w": T.Tensor(np.array([1.0, -2.0, 3.0]))}
        state = T.AdamState()
        T.adam_step(p, {"w": np.array([0.5, -4.0, 1e-3])}, state, lr=0.1)
        # bias-corrected first step is lr * sign(g) up to eps
        npt.assert_allclose(p["w"].data, [0.9, -1.9, 2.9], atol=1e-5)
        assert state.t == 1

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal(5)
        p = {"w": T.Tensor(w.copy())}
        state = T.AdamState()
        m = v = np.zeros(5)
        ref = w.astype(np.float32).astype(np.float64)
        for t in range(1, 6):
            g = rng.standard_normal(5)
            T.adam_step(p, {"w": g}, state, lr=0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        npt.assert_allclose(p["w"].data, ref, rtol=1e-5, atol=1e-6)

    def test_zero_lr_leaves_params(self):
        p = {"w": T.Tensor(np.ones(3))}
        T.adam_step(p, {"w": np.ones(3)}, T.AdamState(), lr=0.0)
        npt.assert_array_equal(p["w"].data, 1.0)
