"""Low-level dense-tensor kernels.

Everything here is a pure function of its inputs. Default precision is
float64; float32 is accepted and preserved. All reductions use a fixed
order so repeated runs on the same machine are bitwise identical.
"""

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def matmul(a, b):
    """Matrix product with an explicit shape check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return a @ b


def conv_out_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold [N,C,H,W] into [N*OH*OW, C*kh*kw] patch rows."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ConfigError(
            f"conv2d: non-positive output size for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            cols[:, :, i, j, :, :] = x[:, :, i:i_end:stride, j:j_end:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw), oh, ow


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add patch rows back into [N,C,H,W]."""
    n, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            xp[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j, :, :]
    if pad > 0:
        xp = xp[:, :, pad:-pad, pad:-pad]
    return xp


def _windows(x, kh, kw, stride, pad):
    """Strided [n,c,oh,ow,kh,kw] window view of padded input (no copy)."""
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _patch_matrix(x, kh, kw, stride, pad):
    """[N*OH*OW, C*kh*kw] patch rows of x, plus (oh, ow)."""
    n, c = x.shape[0], x.shape[1]
    win = _windows(x, kh, kw, stride, pad)
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def conv2d_forward(x, weight, bias, stride=1, pad=0):
    """Cross-correlation of [N,C,H,W] with weight [F,C,kh,kw] plus bias [F].

    Returns (out, cache) where cache feeds conv2d_backward.
    """
    f, c, kh, kw = weight.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    oh = conv_out_size(x.shape[2], kh, stride, pad)
    ow = conv_out_size(x.shape[3], kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ConfigError(
            f"conv2d: non-positive output size for input {x.shape[2:]}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    cols, oh, ow = _patch_matrix(x, kh, kw, stride, pad)
    n = x.shape[0]
    out = cols @ weight.reshape(f, -1).T + bias
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, weight, stride, pad)


def conv2d_backward(dout, cache):
    x_shape, cols, weight, stride, pad = cache
    f, c, kh, kw = weight.shape
    n, _, h, w = x_shape
    dmat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, f)
    dw = (dmat.T @ cols).reshape(f, c, kh, kw)
    db = dmat.sum(axis=0)
    if stride == 1 and pad <= min(kh, kw) - 1:
        # full correlation of dout with the rotated kernel
        w_rot = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dcols, _, _ = _patch_matrix(dout, kh, kw, 1, kh - 1 - pad)
        dx = dcols @ w_rot.reshape(c, -1).T
        dx = np.ascontiguousarray(dx.reshape(n, h, w, c).transpose(0, 3, 1, 2))
    elif stride == kh == kw and pad == 0 and h % kh == 0 and w % kw == 0:
        # non-overlapping patches (patch embedding): direct scatter
        oh, ow = dout.shape[2], dout.shape[3]
        t = (dmat @ weight.reshape(f, -1)).reshape(n, oh, ow, c, kh, kw)
        dx = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h, w)
    else:
        dcols = dmat @ weight.reshape(f, -1)
        dx = col2im(dcols, x_shape, kh, kw, stride, pad)
    return dx, dw, db


def _pool_windows(x, k, stride):
    """Stack the k*k window elements of [N,C,H,W] along a new leading axis."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, k, stride, 0)
    ow = conv_out_size(w, k, stride, 0)
    if oh <= 0 or ow <= 0:
        raise ConfigError(f"pool: window {k} too large for input {h}x{w}")
    win = np.empty((k * k, n, c, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            win[i * k + j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return win, oh, ow


def maxpool2d_forward(x, k, stride):
    win, oh, ow = _pool_windows(x, k, stride)
    arg = win.argmax(axis=0)
    out = np.take_along_axis(win, arg[None], axis=0)[0]
    return out, (x.shape, arg, k, stride)


def maxpool2d_backward(dout, cache):
    x_shape, arg, k, stride = cache
    n, c, h, w = x_shape
    oh, ow = arg.shape[2], arg.shape[3]
    dwin = np.zeros((k * k, n, c, oh, ow), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[None], dout[None], axis=0)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dwin[i * k + j]
    return dx


def avgpool2d_forward(x, k, stride):
    win, oh, ow = _pool_windows(x, k, stride)
    out = win.mean(axis=0)
    return out, (x.shape, k, stride)


def avgpool2d_backward(dout, cache):
    x_shape, k, stride = cache
    n, c, h, w = x_shape
    oh = conv_out_size(h, k, stride, 0)
    ow = conv_out_size(w, k, stride, 0)
    g = dout / (k * k)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g
    return dx


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    return np.where(cache > 0, dout, 0.0)


def gelu_forward(x):
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    phi = 0.5 * (1.0 + erf(x / SQRT2))
    return x * phi, (x, phi)


def gelu_backward(dout, cache):
    x, phi = cache
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dout * (phi + x * pdf)


def softmax(logits):
    """Row-wise softmax, shifted for stability."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch.

    Returns (loss, dlogits) with dlogits already divided by the batch size,
    i.e. the gradient of the mean loss.
    """
    n = logits.shape[0]
    if n == 0:
        raise ShapeError("softmax_cross_entropy: empty batch")
    p = softmax(logits)
    eps = np.finfo(logits.dtype).tiny
    loss = -np.log(p[np.arange(n), labels] + eps).sum() / n
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def global_norm(arrays):
    """L2 norm of the concatenation of all arrays."""
    total = 0.0
    for a in arrays:
        total += float(np.sum(np.asarray(a, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_global_norm(grads, clip_norm):
    """Scale all gradients so the global L2 norm is at most clip_norm."""
    if clip_norm <= 0:
        raise ConfigError(f"clip_norm must be positive, got {clip_norm}")
    g = global_norm(grads.values() if isinstance(grads, dict) else grads)
    if g <= clip_norm:
        return grads
    scale = clip_norm / g
    if isinstance(grads, dict):
        return {k: v * scale for k, v in grads.items()}
    return [v * scale for v in grads]


def sgd_step(params, grads, lr):
    """Plain SGD: w <- w - lr * g, elementwise, returned as new arrays."""
    if isinstance(params, dict):
        out = {}
        for k, w in params.items():
            g = grads[k]
            if w.shape != g.shape:
                raise ShapeError(f"sgd_step: {k} param {w.shape} vs grad {g.shape}")
            out[k] = w - lr * g
        return out
    out = []
    for w, g in zip(params, grads):
        if w.shape != g.shape:
            raise ShapeError(f"sgd_step: param {w.shape} vs grad {g.shape}")
        out.append(w - lr * g)
    return out
