import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rglab import tensor as T


def naive_conv(x, w, b, pad):
    """Direct 6-nested-loop cross-correlation in float64."""
    x = np.pad(np.asarray(x, np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    out = np.zeros((n, o, h - kh + 1, wd - kw + 1))
    for ni in range(n):
        for oi in range(o):
            for i in range(h - kh + 1):
                for j in range(wd - kw + 1):
                    acc = b[oi]
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += x[ni, ci, i + di, j + dj] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = acc
    return out


def naive_pool(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    arg = np.zeros((n, c, h // 2, w // 2), dtype=np.int64)
    for ni in range(n):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    best, where = -np.inf, None
                    for di in range(2):
                        for dj in range(2):
                            v = x[ni, ci, 2 * i + di, 2 * j + dj]
                            if v > best:
                                best, where = v, (2 * i + di) * w + 2 * j + dj
                    out[ni, ci, i, j], arg[ni, ci, i, j] = best, where
    return out, arg


def central_fd(f, x, h=1e-2):
    x = np.asarray(x, np.float32)
    g = np.zeros(x.size)
    flat = x.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f(x)
        flat[k] = old - h
        down = f(x)
        flat[k] = old
        g[k] = (up - down) / (2 * h)
    return g.reshape(x.shape)


def assert_fd_close(analytic, fd):
    fd = np.asarray(fd)
    np.testing.assert_allclose(analytic, fd, rtol=1e-2, atol=1e-2 * max(np.abs(fd).max(), 1e-8))


class TestConvForward:
    def test_valid_ones(self):
        x = np.ones((1, 1, 3, 3), np.float32)
        w = np.ones((1, 1, 3, 3), np.float32)
        out = T.conv2d_forward(x, w, np.zeros(1), "valid")
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_same_ones(self):
        x = np.ones((1, 1, 3, 3), np.float32)
        w = np.ones((1, 1, 3, 3), np.float32)
        out = T.conv2d_forward(x, w, np.zeros(1), "same")[0, 0]
        np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    @pytest.mark.parametrize("padding,pad", [("same", 1), ("valid", 0)])
    def test_matches_loop_oracle(self, padding, pad):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        np.testing.assert_allclose(T.conv2d_forward(x, w, b, padding), naive_conv(x, w, b, pad), atol=1e-5)

    def test_matches_loop_oracle_16x16(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 2, 16, 16)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        np.testing.assert_allclose(T.conv2d_forward(x, w, b), naive_conv(x, w, b, 1), atol=1e-5)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(T.ShapeError, match="channel"):
            T.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_kernel_too_large(self):
        with pytest.raises(T.ShapeError, match="height"):
            T.conv2d_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1), "valid")


class TestConvBackward:
    def test_zero_grad(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        gx, gw, gb = T.conv2d_backward(np.zeros((1, 3, 5, 5)), x, w)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_1x1_kernel_scales(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        w = np.full((1, 1, 1, 1), 2.5, np.float32)
        g = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        gx, _, _ = T.conv2d_backward(g, x, w, "same")
        np.testing.assert_allclose(gx, 2.5 * g, rtol=1e-6)

    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_finite_differences(self, padding):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 2, 5, 5)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        proj = rng.standard_normal(T.conv2d_forward(x, w, b, padding).shape).astype(np.float32)
        gx, gw, gb = T.conv2d_backward(proj, x, w, padding)
        assert_fd_close(gx, central_fd(lambda xx: float((T.conv2d_forward(xx, w, b, padding) * proj).sum()), x))
        assert_fd_close(gw, central_fd(lambda ww: float((T.conv2d_forward(x, ww, b, padding) * proj).sum()), w))
        assert_fd_close(gb, central_fd(lambda bb: float((T.conv2d_forward(x, w, bb, padding) * proj).sum()), b))

    def test_bad_grad_shape(self):
        with pytest.raises(T.ShapeError):
            T.conv2d_backward(np.zeros((1, 3, 4, 4)), np.zeros((1, 2, 5, 5)), np.zeros((3, 2, 3, 3)))


class TestMaxPool:
    def test_single_window(self):
        x = np.array([[[[1, 2], [3, 4]]]], np.float32)
        out, arg = T.maxpool2x2_forward(x)
        assert out[0, 0, 0, 0] == 4
        assert arg[0, 0, 0, 0] == 3

    def test_constant_input_first_element_wins(self):
        x = np.full((1, 1, 4, 4), 7.0, np.float32)
        out, arg = T.maxpool2x2_forward(x)
        assert (out == 7).all()
        np.testing.assert_array_equal(arg[0, 0], [[0, 2], [8, 10]])

    def test_matches_loop_oracle(self):
        x = np.random.default_rng(3).standard_normal((1, 2, 8, 8)).astype(np.float32)
        out, arg = T.maxpool2x2_forward(x)
        ref_out, ref_arg = naive_pool(x)
        np.testing.assert_array_equal(out, ref_out)
        np.testing.assert_array_equal(arg, ref_arg)

    def test_matches_loop_oracle_16x16_with_ties(self):
        x = np.random.default_rng(4).integers(0, 3, size=(2, 3, 16, 16)).astype(np.float32)
        out, arg = T.maxpool2x2_forward(x)
        ref_out, ref_arg = naive_pool(x)
        np.testing.assert_array_equal(out, ref_out)
        np.testing.assert_array_equal(arg, ref_arg)

    def test_odd_dims_rejected(self):
        with pytest.raises(T.ShapeError):
            T.maxpool2x2_forward(np.zeros((1, 1, 3, 4)))

    def test_backward_routes_to_winner(self):
        x = np.random.default_rng(5).permutation(64).reshape(1, 1, 8, 8).astype(np.float32)
        _, arg = T.maxpool2x2_forward(x)
        g = T.maxpool2x2_backward(np.ones((1, 1, 4, 4), np.float32), arg)
        windows = g.reshape(4, 2, 4, 2).sum(axis=(1, 3))
        assert (windows == 1).all() and g.sum() == 16

    def test_backward_zeros(self):
        _, arg = T.maxpool2x2_forward(np.random.default_rng(0).standard_normal((1, 2, 4, 4)))
        assert not T.maxpool2x2_backward(np.zeros((1, 2, 2, 2)), arg).any()

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(6)
        # distinct values at least 0.1 apart so a step of 1e-2 never changes a winner
        x = (rng.permutation(2 * 8 * 8) * 0.1).reshape(1, 2, 8, 8).astype(np.float32)
        proj = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        _, arg = T.maxpool2x2_forward(x)
        g = T.maxpool2x2_backward(proj, arg)
        assert_fd_close(g, central_fd(lambda xx: float((T.maxpool2x2_forward(xx)[0] * proj).sum()), x))

    def test_stale_argmax(self):
        with pytest.raises(T.ShapeError):
            T.maxpool2x2_backward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 4, 4), dtype=np.int64))


class TestDenseReluSoftmax:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu_forward([-1, 2]), [0, 2])

    def test_uniform_logits(self):
        loss, grad = T.softmax_cross_entropy(np.zeros(10), [3])
        assert loss == pytest.approx(np.log(10), rel=1e-6)
        expected = np.full(10, 0.1)
        expected[3] -= 1
        np.testing.assert_allclose(grad[0], expected, atol=1e-7)

    def test_cross_entropy_finite_differences(self):
        rng = np.random.default_rng(7)
        logits = rng.standard_normal((3, 10)).astype(np.float32)
        labels = np.array([1, 5, 9])
        _, grad = T.softmax_cross_entropy(logits, labels)
        assert_fd_close(grad, central_fd(lambda z: T.softmax_cross_entropy(z, labels)[0], logits))

    def test_large_logits_stable(self):
        loss, grad = T.softmax_cross_entropy(np.array([[1000.0, 0.0]]), [0])
        assert np.isfinite(loss) and np.isfinite(grad).all()

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            T.softmax_cross_entropy(np.zeros((1, 10)), [10])

    def test_dense_finite_differences(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 6)).astype(np.float32)
        w = rng.standard_normal((4, 6)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        proj = rng.standard_normal((2, 4)).astype(np.float32)
        gx, gw, gb = T.dense_backward(proj, x, w)
        assert_fd_close(gx, central_fd(lambda xx: float((T.dense_forward(xx, w, b) * proj).sum()), x))
        assert_fd_close(gw, central_fd(lambda ww: float((T.dense_forward(x, ww, b) * proj).sum()), w))
        assert_fd_close(gb, central_fd(lambda bb: float((T.dense_forward(x, w, bb) * proj).sum()), b))

    def test_dense_flattens_feature_maps(self):
        x = np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2)
        w = np.ones((1, 8), np.float32)
        assert T.dense_forward(x, w, None)[0, 0] == 28


class TestPercentile:
    def test_median(self):
        assert T.percentile([0, 1, 2, 3, 4], 50) == 2.0

    def test_interpolation(self):
        # index 3.2 -> 0 + 0.2 * 10
        assert T.percentile([0, 0, 0, 0, 10], 80) == pytest.approx(2.0)

    def test_extremes(self):
        v = [5.0, -3.0, 9.0, 1.0]
        assert T.percentile(v, 100) == 9.0
        assert T.percentile(v, 0) == -3.0

    def test_empty(self):
        with pytest.raises(ValueError):
            T.percentile([], 50)

    def test_axis(self):
        v = np.array([[0, 1, 2, 3, 4], [10, 0, 0, 0, 0]], np.float32)
        np.testing.assert_allclose(T.percentile(v, 80, axis=1), [3.2, 2.0])

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6)), st.floats(0, 100))
    def test_matches_numpy_linear(self, v, q):
        assert T.percentile(v, q) == pytest.approx(np.percentile(v, q, method="linear"), rel=1e-9, abs=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6)), st.floats(0, 100), st.floats(0, 100))
    def test_monotone_in_q(self, v, q1, q2):
        lo, hi = sorted((q1, q2))
        assert T.percentile(v, lo) <= T.percentile(v, hi) + 1e-9

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6)), st.floats(0, 100), st.randoms())
    def test_permutation_invariant(self, v, q, rnd):
        perm = list(v)
        rnd.shuffle(perm)
        assert T.percentile(perm, q) == T.percentile(v, q)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 8), st.sampled_from(["same", "valid"]))
def test_conv_oracle_property(seed, size, padding):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, size + 2, size + 2)).astype(np.float32)
    w = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    out = T.conv2d_forward(x, w, b, padding)
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, naive_conv(x, w, b, 1 if padding == "same" else 0), atol=1e-5)
