"""Tensor-kernel tests: each op against a hand value or independent oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim import ops
from fedsim.errors import ConfigError, ShapeError


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ops.matmul(np.eye(2), a), a)


def test_matmul_basis_selection():
    out = ops.matmul(np.array([[1.0, 0.0]]), np.array([[5.0], [7.0]]))
    assert np.array_equal(out, np.array([[5.0]]))


def test_matmul_vs_naive_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    # BLAS may fuse multiply-adds, so the naive loop agrees to rounding
    # error rather than bitwise
    assert np.allclose(ops.matmul(a, b), ref, rtol=0.0, atol=1e-12)


def test_matmul_shape_check():
    with pytest.raises(ShapeError):
        ops.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def _conv_oracle(x, w, b, stride, pad):
    """Direct 6-loop convolution."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for ni in range(n):
        for fi in range(f):
            for yi in range(oh):
                for xi in range(ow):
                    patch = xp[ni, :, yi * stride:yi * stride + kh,
                               xi * stride:xi * stride + kw]
                    out[ni, fi, yi, xi] = np.sum(patch * w[fi]) + b[fi]
    return out


def test_conv2d_identity_kernel():
    x = np.random.default_rng(1).standard_normal((2, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    for i in range(3):
        w[i, i, 0, 0] = 1.0
    out, _ = ops.conv2d_forward(x, w, np.zeros(3), 1, 0)
    assert np.array_equal(out, x)


def test_conv2d_all_ones_counting():
    out, _ = ops.conv2d_forward(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)),
                                np.zeros(1), 1, 0)
    assert out.shape == (1, 1, 3, 3)
    assert np.array_equal(out, np.full((1, 1, 3, 3), 9.0))


@pytest.mark.parametrize("stride,pad,k,h", [
    (1, 1, 3, 8), (1, 0, 3, 7), (2, 0, 2, 8), (2, 1, 3, 7), (3, 3, 3, 6),
    (4, 0, 4, 8),
])
def test_conv2d_vs_loop_oracle(stride, pad, k, h):
    rng = np.random.default_rng(k * 100 + h)
    x = rng.standard_normal((2, 3, h, h))
    w = rng.standard_normal((5, 3, k, k))
    b = rng.standard_normal(5)
    out, _ = ops.conv2d_forward(x, w, b, stride, pad)
    assert np.allclose(out, _conv_oracle(x, w, b, stride, pad),
                       rtol=0.0, atol=1e-12)


@pytest.mark.parametrize("stride,pad,k,h", [
    (1, 1, 3, 6), (2, 0, 2, 8), (3, 1, 3, 7),
    (1, 1, 1, 4),  # pad wider than the kernel support
    (1, 2, 2, 5),
])
def test_conv2d_backward_is_adjoint(stride, pad, k, h):
    """<conv(x), dout> == <x, conv_backward(dout)> for a linear map."""
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 2, h, h))
    w = rng.standard_normal((3, 2, k, k))
    out, cache = ops.conv2d_forward(x, w, np.zeros(3), stride, pad)
    dout = rng.standard_normal(out.shape)
    dx, dw, db = ops.conv2d_backward(dout, cache)
    assert np.isclose(np.sum(out * dout), np.sum(x * dx))
    # dw is the adjoint with respect to the weights
    w2 = rng.standard_normal(w.shape)
    out2, _ = ops.conv2d_forward(x, w2, np.zeros(3), stride, pad)
    assert np.isclose(np.sum(out2 * dout), np.sum(w2 * dw))
    assert np.allclose(db, dout.sum(axis=(0, 2, 3)))


def test_conv2d_bad_geometry():
    with pytest.raises(ConfigError):
        ops.conv2d_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)),
                           np.zeros(1), 1, 0)


def test_maxpool_forward_and_routing():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out, cache = ops.maxpool2d_forward(x, 2, 2)
    assert np.array_equal(out[0, 0], np.array([[5.0, 7.0], [13.0, 15.0]]))
    dx = ops.maxpool2d_backward(np.ones_like(out), cache)
    assert dx.sum() == 4.0
    assert dx[0, 0, 1, 1] == 1.0 and dx[0, 0, 0, 0] == 0.0


def test_avgpool_forward_backward():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out, cache = ops.avgpool2d_forward(x, 2, 2)
    assert np.array_equal(out[0, 0], np.array([[2.5, 4.5], [10.5, 12.5]]))
    dx = ops.avgpool2d_backward(np.ones_like(out), cache)
    assert np.allclose(dx, 0.25)


def test_relu():
    out, cache = ops.relu_forward(np.array([-1.0, 0.0, 2.0]))
    assert np.array_equal(out, [0.0, 0.0, 2.0])
    assert np.array_equal(ops.relu_backward(np.ones(3), cache), [0.0, 0.0, 1.0])


def test_gelu_known_values():
    out, _ = ops.gelu_forward(np.array([0.0]))
    assert out[0] == 0.0
    out, _ = ops.gelu_forward(np.array([100.0]))
    assert np.isclose(out[0], 100.0)
    out, _ = ops.gelu_forward(np.array([-100.0]))
    assert np.isclose(out[0], 0.0)


def test_gelu_gradient_fd():
    x = np.random.default_rng(2).standard_normal(50)
    _, cache = ops.gelu_forward(x)
    g = ops.gelu_backward(np.ones_like(x), cache)
    h = 1e-6
    num = (ops.gelu_forward(x + h)[0] - ops.gelu_forward(x - h)[0]) / (2 * h)
    assert np.allclose(g, num, atol=1e-8)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_softmax_rows_are_distributions(seed):
    logits = np.random.default_rng(seed).standard_normal((4, 6)) * 10
    p = ops.softmax(logits)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0)


def test_softmax_shift_invariance():
    logits = np.random.default_rng(3).standard_normal((3, 5))
    assert np.allclose(ops.softmax(logits), ops.softmax(logits + 123.0))


def test_softmax_ce_zero_logits_gradient():
    """Uniform softmax from a zero-output model: dlogits = (p - y) / n."""
    n, k = 6, 4
    labels = np.array([0, 1, 2, 3, 0, 1])
    loss, dlogits = ops.softmax_cross_entropy(np.zeros((n, k)), labels)
    assert np.isclose(loss, np.log(k))
    expected = np.full((n, k), 1.0 / k)
    expected[np.arange(n), labels] -= 1.0
    assert np.allclose(dlogits, expected / n)


def test_softmax_ce_duplication_invariance():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((5, 3))
    labels = rng.integers(0, 3, 5)
    loss1, d1 = ops.softmax_cross_entropy(logits, labels)
    loss2, d2 = ops.softmax_cross_entropy(np.vstack([logits, logits]),
                                          np.concatenate([labels, labels]))
    assert np.isclose(loss1, loss2)
    assert np.allclose(d1, d2[:5] * 2)  # mean grad splits across duplicates


def test_softmax_ce_empty_batch():
    with pytest.raises(ShapeError):
        ops.softmax_cross_entropy(np.zeros((0, 3)), np.zeros(0, dtype=int))


def test_clip_untouched_below_threshold():
    grads = {"w": np.array([0.3, 0.4])}  # norm 0.5
    out = ops.clip_global_norm(grads, 1.0)
    assert out["w"] is grads["w"]


def test_clip_three_four_five():
    out = ops.clip_global_norm([np.array([3.0, 4.0])], 1.0)
    assert np.allclose(out[0], [0.6, 0.8])


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 10.0))
@settings(max_examples=25, deadline=None)
def test_clip_norm_property(seed, clip):
    rng = np.random.default_rng(seed)
    grads = [rng.standard_normal(5), rng.standard_normal((2, 3))]
    g = ops.global_norm(grads)
    out = ops.clip_global_norm(grads, clip)
    assert np.isclose(ops.global_norm(out), min(g, clip), rtol=0, atol=1e-12)


def test_clip_rejects_nonpositive():
    with pytest.raises(ConfigError):
        ops.clip_global_norm([np.ones(2)], 0.0)


def test_sgd_zero_lr():
    p = {"w": np.array([1.0, 2.0])}
    out = ops.sgd_step(p, {"w": np.array([5.0, 5.0])}, 0.0)
    assert np.array_equal(out["w"], p["w"])


def test_sgd_hand_value():
    out = ops.sgd_step({"w": np.array([1.0])}, {"w": np.array([2.0])}, 0.5)
    assert out["w"][0] == 0.0


def test_sgd_quadratic_two_steps():
    # minimizing 0.5 w^2: grad = w, two steps of lr 0.1 from w=1 -> 0.81
    w = np.array([1.0])
    for _ in range(2):
        w = ops.sgd_step([w], [w], 0.1)[0]
    assert np.isclose(w[0], 0.81)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.1)
