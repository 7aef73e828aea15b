import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hourglass_mtl.errors import DimensionError, EvaluationError
from hourglass_mtl.tensor import (
    conv2d_backward,
    conv2d_forward,
    grad_check,
    maxpool2x2,
    maxpool2x2_backward,
    maxunpool2x2,
    maxunpool2x2_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
)
from oracles import naive_conv2d, naive_maxpool


def _conv_scalar(x, w, b, r, stride, pad):
    """f(x, w, b) = sum(conv(x) * r), with analytic grads from conv2d_backward."""

    def f(p):
        out = conv2d_forward(p["x"], p["w"], p["b"], stride, pad)
        gx, gw, gb = conv2d_backward(p["x"], p["w"], r, stride, pad)
        return float((out * r).sum()), {"x": gx, "w": gw, "b": gb}

    return f, {"x": x, "w": w, "b": b}


class TestConvForward:
    def test_identity_kernel(self):
        x = np.ones((1, 1, 3, 3))
        out = conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    def test_sum_kernel(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = conv2d_forward(x, np.ones((1, 1, 2, 2)), np.zeros(1))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 10.0

    def test_random_matches_naive_loop(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = conv2d_forward(x, w, b, 1, 1)
        ref = naive_conv2d(x, w, b, 1, 1)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)
        # same accumulation order on both sides: exact equality
        np.testing.assert_array_equal(out, ref)

    @pytest.mark.parametrize(
        "shape,wshape,stride,pad",
        [
            ((2, 3, 7, 6), (4, 3, 3, 3), 1, 1),
            ((1, 2, 9, 9), (2, 2, 3, 3), 2, 1),
            ((1, 1, 8, 8), (1, 1, 8, 8), 1, 4),
            ((2, 2, 6, 5), (3, 2, 1, 1), 1, 0),
            ((1, 3, 10, 7), (2, 3, 2, 3), 3, 2),
        ],
    )
    def test_shapes_match_naive_exactly(self, shape, wshape, stride, pad):
        rng = np.random.default_rng(sum(shape) + stride)
        x = rng.standard_normal(shape)
        w = rng.standard_normal(wshape)
        b = rng.standard_normal(wshape[0])
        out = conv2d_forward(x, w, b, stride, pad)
        ref = naive_conv2d(x, w, b, stride, pad)
        assert out.shape == ref.shape
        assert out.shape[2] == (shape[2] + 2 * pad - wshape[2]) // stride + 1
        np.testing.assert_array_equal(out, ref)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(DimensionError, match="channel"):
            conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_bias_mismatch(self):
        with pytest.raises(DimensionError, match="bias"):
            conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((2, 2, 3, 3)), np.zeros(3))

    def test_rank_error(self):
        with pytest.raises(DimensionError):
            conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 2, 3, 3)), np.zeros(1))

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 16, 16))
        w = rng.standard_normal((5, 3, 3, 3))
        b = rng.standard_normal(5)
        a = conv2d_forward(x, w, b, 1, 1)
        assert a.tobytes() == conv2d_forward(x, w, b, 1, 1).tobytes()


class TestConvBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        gx, gw, gb = conv2d_backward(x, w, np.zeros((1, 3, 5, 5)), 1, 1)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_identity_kernel_passes_grad(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 1, 3, 3))
        g = rng.standard_normal((1, 1, 3, 3))
        gx, _, _ = conv2d_backward(x, np.ones((1, 1, 1, 1)), g)
        np.testing.assert_array_equal(gx, g)

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        stride = 1 if seed % 4 else 2
        k = (1, 3, 2, 8)[seed % 4]
        pad = (0, 1, 1, 4)[seed % 4]
        x = rng.standard_normal((2, 2, 6 + seed % 3, 7))
        w = rng.standard_normal((3, 2, k, k))
        b = rng.standard_normal(3)
        ho = (x.shape[2] + 2 * pad - k) // stride + 1
        wo = (x.shape[3] + 2 * pad - k) // stride + 1
        r = rng.standard_normal((2, 3, ho, wo))
        f, p = _conv_scalar(x, w, b, r, stride, pad)
        rep = grad_check(f, p, tolerance=1e-4)
        assert rep.passed, rep

    def test_upstream_shape_error(self):
        with pytest.raises(DimensionError, match="height"):
            conv2d_backward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 3, 4)), 1, 1)


class TestPooling:
    def test_small_window(self):
        out, idx = maxpool2x2(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert out[0, 0, 0, 0] == 4.0
        assert idx[0, 0, 0, 0] == 1 * 2 + 1

    def test_tie_rule_lowest_index(self):
        out, idx = maxpool2x2(np.full((1, 1, 4, 4), 7.0))
        assert np.all(out == 7.0)
        np.testing.assert_array_equal(idx[0, 0], [[0, 2], [8, 10]])

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive_scan(self, seed):
        x = np.random.default_rng(seed).standard_normal((1, 1, 6, 6))
        out, idx = maxpool2x2(x)
        ref, ridx = naive_maxpool(x)
        np.testing.assert_array_equal(out, ref)
        np.testing.assert_array_equal(idx, ridx)

    def test_odd_extent(self):
        with pytest.raises(DimensionError, match="height"):
            maxpool2x2(np.zeros((1, 1, 5, 4)))
        with pytest.raises(DimensionError, match="width"):
            maxpool2x2(np.zeros((1, 1, 4, 3)))

    def test_unpool_roundtrip(self):
        x = np.random.default_rng(4).standard_normal((2, 3, 8, 6))
        pooled, idx = maxpool2x2(x)
        up = maxunpool2x2(pooled, idx)
        assert up.shape == x.shape
        win = up.reshape(2, 3, 4, 2, 3, 2)
        assert np.all((win != 0).sum(axis=(3, 5)) == 1)
        np.testing.assert_array_equal(win.sum(axis=(3, 5)), x.reshape(2, 3, 4, 2, 3, 2).max(axis=(3, 5)))

    def test_unpool_zeros(self):
        _, idx = maxpool2x2(np.random.default_rng(5).standard_normal((1, 2, 4, 4)))
        assert not maxunpool2x2(np.zeros((1, 2, 2, 2)), idx).any()

    def test_unpool_mass_conservation(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 2, 10, 10))
        pooled, idx = maxpool2x2(x)
        up = maxunpool2x2(pooled, idx)
        total = 0.0
        for v in pooled.ravel():
            total += v
        scan = 0.0
        for v in up.ravel():
            scan += v
        assert scan == pytest.approx(total, abs=1e-12)

    def test_unpool_rejects_foreign_indices(self):
        pooled = np.ones((1, 1, 2, 2))
        bad = np.zeros((1, 1, 2, 2), dtype=np.int64)
        with pytest.raises(DimensionError):
            maxunpool2x2(pooled, bad)
        with pytest.raises(DimensionError):
            maxunpool2x2(np.ones((1, 1, 3, 2)), bad)

    @pytest.mark.parametrize("seed", range(20))
    def test_pool_backward_fd(self, seed):
        rng = np.random.default_rng(200 + seed)
        x = rng.standard_normal((1, 2, 6, 4))
        r = rng.standard_normal((1, 2, 3, 2))

        def f(v):
            out, idx = maxpool2x2(v)
            return float((out * r).sum()), maxpool2x2_backward(r, idx)

        assert grad_check(f, x).passed

    @pytest.mark.parametrize("seed", range(20))
    def test_unpool_backward_fd(self, seed):
        rng = np.random.default_rng(300 + seed)
        _, idx = maxpool2x2(rng.standard_normal((1, 2, 6, 4)))
        v = rng.standard_normal((1, 2, 3, 2))
        r = rng.standard_normal((1, 2, 6, 4))

        def f(p):
            return float((maxunpool2x2(p, idx) * r).sum()), maxunpool2x2_backward(r, idx)

        assert grad_check(f, v).passed

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_indices_inside_window(self, c, hh, ww, seed):
        x = np.random.default_rng(seed).integers(-3, 3, (1, c, 2 * hh, 2 * ww)).astype(float)
        out, idx = maxpool2x2(x)
        rows, cols = np.divmod(idx, 2 * ww)
        assert np.all(rows // 2 == np.arange(hh)[:, None])
        assert np.all(cols // 2 == np.arange(ww)[None, :])
        np.testing.assert_array_equal(np.take(x.reshape(1, c, -1), idx.reshape(1, c, -1)).shape, (1, c, hh * ww))


class TestActivations:
    def test_sigmoid_zero(self):
        assert sigmoid(np.array(0.0)) == 0.5

    def test_sigmoid_extremes_finite(self):
        y = sigmoid(np.array([-800.0, 800.0]))
        assert np.all(np.isfinite(y))
        assert y[0] == 0.0 and y[1] == 1.0

    def test_relu_negative(self):
        assert relu(np.array(-3.0)) == 0.0
        assert relu_backward(np.array(-3.0), np.array(5.0)) == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_sigmoid_backward_fd(self, seed):
        rng = np.random.default_rng(400 + seed)
        x = 3 * rng.standard_normal((1, 2, 3, 3))
        r = rng.standard_normal(x.shape)

        def f(v):
            y = sigmoid(v)
            return float((y * r).sum()), sigmoid_backward(y, r)

        assert grad_check(f, x).passed

    @pytest.mark.parametrize("seed", range(20))
    def test_relu_backward_fd(self, seed):
        rng = np.random.default_rng(500 + seed)
        x = rng.standard_normal((1, 2, 3, 3))
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep clear of the kink
        r = rng.standard_normal(x.shape)

        def f(v):
            return float((relu(v) * r).sum()), relu_backward(v, r)

        assert grad_check(f, x).passed


class TestGradCheck:
    def test_quadratic_exact(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 4, 4))
        rep = grad_check(lambda v: (float((v**2).sum()), 2 * v), x)
        assert rep.max_rel_error < 1e-8
        assert rep.n_checked == 16 and rep.passed

    def test_corrupted_gradient_fails(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 4, 4))
        rep = grad_check(lambda v: (float((v**2).sum()), 2.1 * v), x)
        assert not rep.passed

    def test_pass_iff_within_tolerance(self):
        x = np.random.default_rng(1).standard_normal((1, 1, 2, 2))
        rep = grad_check(lambda v: (float((v**2).sum()), 2 * v * (1 + 1e-3)), x, tolerance=1e-2)
        assert rep.passed == (rep.max_rel_error <= 1e-2)

    def test_non_finite_raises(self):
        with pytest.raises(EvaluationError):
            grad_check(lambda v: (float("nan"), v), np.zeros((1, 1, 1, 1)))

    def test_fraction_subsample(self):
        x = np.zeros((1, 1, 10, 10))
        rep = grad_check(lambda v: (float((v**2).sum()), 2 * v), x, fraction=0.05)
        assert rep.n_checked == 5

    def test_params_untouched(self):
        x = np.random.default_rng(2).standard_normal((1, 1, 3, 3))
        before = x.copy()
        grad_check(lambda v: (float((v**2).sum()), 2 * v), x)
        np.testing.assert_array_equal(x, before)
