"""Layer objects with hand-derived forward/backward rules.

Each layer owns its parameters as plain numpy arrays, caches whatever its
backward pass needs during forward, and deposits parameter gradients in
``self.grads`` (keyed by local parameter name) when backward runs.
"""

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .params import Role


class Layer:
    """Base: stateless pass-through with no parameters."""

    def param_entries(self):
        """Yield (local_name, array, role) in a fixed construction order."""
        return []

    def set_param(self, local_name, arr):
        raise KeyError(local_name)

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, in_features, out_features, rng, dtype):
        scale = np.sqrt(2.0 / in_features)
        self.w = (rng.standard_normal((in_features, out_features)) * scale).astype(dtype)
        self.b = np.zeros(out_features, dtype=dtype)
        self.grads = {}

    def param_entries(self):
        return [("w", self.w, Role.WEIGHT), ("b", self.b, Role.BIAS)]

    def set_param(self, name, arr):
        if name == "w":
            self.w = arr
        elif name == "b":
            self.b = arr
        else:
            raise KeyError(name)

    def forward(self, x, train):
        if x.shape[-1] != self.w.shape[0]:
            raise ShapeError(f"linear: input {x.shape} vs weight {self.w.shape}")
        self._x = x
        return x @ self.w + self.b

    def backward(self, dout):
        x = self._x
        x2 = x.reshape(-1, x.shape[-1])
        d2 = dout.reshape(-1, dout.shape[-1])
        self.grads = {"w": x2.T @ d2, "b": d2.sum(axis=0)}
        return (dout @ self.w.T).reshape(x.shape)


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, kernel, stride, pad, rng, dtype):
        fan_in = in_ch * kernel * kernel
        scale = np.sqrt(2.0 / fan_in)
        self.w = (rng.standard_normal((out_ch, in_ch, kernel, kernel)) * scale).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.stride = stride
        self.pad = pad
        self.grads = {}

    def param_entries(self):
        return [("w", self.w, Role.WEIGHT), ("b", self.b, Role.BIAS)]

    def set_param(self, name, arr):
        if name == "w":
            self.w = arr
        elif name == "b":
            self.b = arr
        else:
            raise KeyError(name)

    def forward(self, x, train):
        out, self._cache = ops.conv2d_forward(x, self.w, self.b, self.stride, self.pad)
        return out

    def backward(self, dout):
        dx, dw, db = ops.conv2d_backward(dout, self._cache)
        self.grads = {"w": dw, "b": db}
        return dx


class ReLU(Layer):
    def forward(self, x, train):
        out, self._cache = ops.relu_forward(x)
        return out

    def backward(self, dout):
        return ops.relu_backward(dout, self._cache)


class GELU(Layer):
    def forward(self, x, train):
        out, self._cache = ops.gelu_forward(x)
        return out

    def backward(self, dout):
        return ops.gelu_backward(dout, self._cache)


class Flatten(Layer):
    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class MaxPool2d(Layer):
    def __init__(self, kernel, stride):
        self.kernel = kernel
        self.stride = stride

    def forward(self, x, train):
        out, self._cache = ops.maxpool2d_forward(x, self.kernel, self.stride)
        return out

    def backward(self, dout):
        return ops.maxpool2d_backward(dout, self._cache)


class AvgPool2d(Layer):
    def __init__(self, kernel, stride):
        self.kernel = kernel
        self.stride = stride

    def forward(self, x, train):
        out, self._cache = ops.avgpool2d_forward(x, self.kernel, self.stride)
        return out

    def backward(self, dout):
        return ops.avgpool2d_backward(dout, self._cache)


class GlobalAvgPool(Layer):
    """[N,C,H,W] -> [N,C], mean over the spatial axes."""

    def forward(self, x, train):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        n, c, h, w = self._shape
        return np.broadcast_to(
            dout[:, :, None, None] / (h * w), self._shape
        ).copy()


class TokenMean(Layer):
    """[N,T,D] -> [N,D], mean over the token axis."""

    def forward(self, x, train):
        self._shape = x.shape
        return x.mean(axis=1)

    def backward(self, dout):
        n, t, d = self._shape
        return np.broadcast_to(dout[:, None, :] / t, self._shape).copy()


def _canon_norm_view(x):
    """Reshape input to [M, C, S] for per-sample normalization.

    2D [N,F] -> [N,F,1]; 4D [N,C,H,W] -> [N,C,H*W]; 3D token input
    [N,T,D] treats every token as its own sample: [N*T,D,1].
    """
    if x.ndim == 2:
        return x.reshape(x.shape[0], x.shape[1], 1)
    if x.ndim == 3:
        return x.reshape(-1, x.shape[2], 1)
    if x.ndim == 4:
        return x.reshape(x.shape[0], x.shape[1], -1)
    raise ShapeError(f"norm layer: unsupported input ndim {x.ndim}")


class GroupNorm(Layer):
    """Per-sample normalization over channel groups, per-channel affine.

    groups=1 normalizes over all channels (and spatial positions), which is
    exactly layer normalization with per-channel affine.
    """

    def __init__(self, channels, groups, dtype, eps=1e-5):
        if channels % groups != 0:
            raise ConfigError(f"channels {channels} not divisible by groups {groups}")
        if eps <= 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        self.channels = channels
        self.groups = groups
        self.eps = eps
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.grads = {}

    def param_entries(self):
        return [("gamma", self.gamma, Role.NORM_AFFINE),
                ("beta", self.beta, Role.NORM_AFFINE)]

    def set_param(self, name, arr):
        if name == "gamma":
            self.gamma = arr
        elif name == "beta":
            self.beta = arr
        else:
            raise KeyError(name)

    def forward(self, x, train):
        v = _canon_norm_view(x)
        m, c, s = v.shape
        if c != self.channels:
            raise ShapeError(f"groupnorm: got {c} channels, expected {self.channels}")
        g = self.groups
        vg = v.reshape(m, g, (c // g) * s)
        mu = vg.mean(axis=2, keepdims=True)
        var = vg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((vg - mu) * inv).reshape(m, c, s)
        out = xhat * self.gamma[None, :, None] + self.beta[None, :, None]
        self._cache = (xhat, inv, x.shape)
        return out.reshape(x.shape)

    def backward(self, dout):
        xhat, inv, x_shape = self._cache
        m, c, s = xhat.shape
        g = self.groups
        dv = _canon_norm_view(dout)
        self.grads = {
            "gamma": (dv * xhat).sum(axis=(0, 2)),
            "beta": dv.sum(axis=(0, 2)),
        }
        dxhat = (dv * self.gamma[None, :, None]).reshape(m, g, (c // g) * s)
        xh = xhat.reshape(m, g, (c // g) * s)
        mean_d = dxhat.mean(axis=2, keepdims=True)
        mean_dx = (dxhat * xh).mean(axis=2, keepdims=True)
        dx = (dxhat - mean_d - xh * mean_dx) * inv
        return dx.reshape(m, c, s).reshape(x_shape)


class LayerNorm(GroupNorm):
    """Per-sample normalization over every channel: GroupNorm with one group."""

    def __init__(self, channels, dtype, eps=1e-5):
        super().__init__(channels, 1, dtype, eps)


class BatchNorm(Layer):
    """Per-channel normalization over the batch, with running statistics.

    Channel axis is the feature axis for 2D input, axis 1 for image input
    and the embedding axis for token input. Running stats update with
    momentum rho: r <- rho * r + (1 - rho) * batch_stat.
    """

    def __init__(self, channels, dtype, eps=1e-5, rho=0.9):
        if eps <= 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        self.channels = channels
        self.eps = eps
        self.rho = rho
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.grads = {}

    def param_entries(self):
        return [("gamma", self.gamma, Role.NORM_AFFINE),
                ("beta", self.beta, Role.NORM_AFFINE),
                ("running_mean", self.running_mean, Role.NORM_RUNNING_STAT),
                ("running_var", self.running_var, Role.NORM_RUNNING_STAT)]

    def set_param(self, name, arr):
        if name not in ("gamma", "beta", "running_mean", "running_var"):
            raise KeyError(name)
        setattr(self, name, arr)

    @staticmethod
    def _layout(x):
        """(reduction axes, channel broadcast shape) for the input rank."""
        if x.ndim == 2:
            return (0,), (1, x.shape[1])
        if x.ndim == 3:
            return (0, 1), (1, 1, x.shape[2])
        if x.ndim == 4:
            return (0, 2, 3), (1, x.shape[1], 1, 1)
        raise ShapeError(f"batchnorm: unsupported input ndim {x.ndim}")

    def forward(self, x, train):
        axes, cshape = self._layout(x)
        c = x.shape[1] if x.ndim == 4 else x.shape[-1]
        if c != self.channels:
            raise ShapeError(
                f"batchnorm: got {c} channels, expected {self.channels}"
            )
        count = int(np.prod([x.shape[a] for a in axes]))
        if train:
            if count < 2:
                raise ConfigError("batchnorm: train mode needs a batch of at least 2")
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = self.rho * self.running_mean + (1 - self.rho) * mu
            self.running_var = self.rho * self.running_var + (1 - self.rho) * var
        else:
            mu = self.running_mean
            var = self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu.reshape(cshape)) * inv.reshape(cshape)
        out = xhat * self.gamma.reshape(cshape) + self.beta.reshape(cshape)
        self._cache = (xhat, inv, axes, cshape, train)
        return out

    def backward(self, dout):
        xhat, inv, axes, cshape, train = self._cache
        self.grads = {
            "gamma": (dout * xhat).sum(axis=axes),
            "beta": dout.sum(axis=axes),
        }
        dxhat = dout * self.gamma.reshape(cshape)
        if train:
            mean_d = dxhat.mean(axis=axes).reshape(cshape)
            mean_dx = (dxhat * xhat).mean(axis=axes).reshape(cshape)
            dx = (dxhat - mean_d - xhat * mean_dx) * inv.reshape(cshape)
        else:
            dx = dxhat * inv.reshape(cshape)
        return dx


class IdentityMixer(Layer):
    def forward(self, x, train):
        return x

    def backward(self, dout):
        return dout


class MatrixMixer(Layer):
    """Fixed linear mixing over the token axis: out[:, s] = sum_t M[s,t] x[:, t].

    The matrix is frozen at construction (pooling stencil or seeded random
    matrix) and never trained or aggregated.
    """

    def __init__(self, matrix):
        self.matrix = matrix

    def param_entries(self):
        return [("matrix", self.matrix, Role.FROZEN)]

    def set_param(self, name, arr):
        if name != "matrix":
            raise KeyError(name)
        self.matrix = arr

    def forward(self, x, train):
        t = x.shape[1]
        if self.matrix.shape != (t, t):
            raise ShapeError(
                f"token mixer matrix {self.matrix.shape} vs {t} tokens"
            )
        return np.einsum("st,ntd->nsd", self.matrix, x)

    def backward(self, dout):
        return np.einsum("st,nsd->ntd", self.matrix, dout)


def pooling_matrix(num_tokens, window=3, dtype=np.float64):
    """Boundary-aware moving-average stencil over the token axis."""
    m = np.zeros((num_tokens, num_tokens), dtype=dtype)
    half = window // 2
    for s in range(num_tokens):
        lo = max(0, s - half)
        hi = min(num_tokens, s + half + 1)
        m[s, lo:hi] = 1.0 / (hi - lo)
    return m


class AttentionMixer(Layer):
    """Single-head scaled dot-product attention over tokens."""

    def __init__(self, dim, rng, dtype):
        scale = np.sqrt(1.0 / dim)
        self.wq = (rng.standard_normal((dim, dim)) * scale).astype(dtype)
        self.wk = (rng.standard_normal((dim, dim)) * scale).astype(dtype)
        self.wv = (rng.standard_normal((dim, dim)) * scale).astype(dtype)
        self.wo = (rng.standard_normal((dim, dim)) * scale).astype(dtype)
        self.dim = dim
        self.grads = {}

    def param_entries(self):
        return [("wq", self.wq, Role.WEIGHT), ("wk", self.wk, Role.WEIGHT),
                ("wv", self.wv, Role.WEIGHT), ("wo", self.wo, Role.WEIGHT)]

    def set_param(self, name, arr):
        if name not in ("wq", "wk", "wv", "wo"):
            raise KeyError(name)
        setattr(self, name, arr)

    def forward(self, x, train):
        if x.shape[-1] != self.dim:
            raise ShapeError(f"attention: input dim {x.shape[-1]} vs {self.dim}")
        q = x @ self.wq
        k = x @ self.wk
        v = x @ self.wv
        scale = 1.0 / np.sqrt(self.dim)
        scores = np.einsum("ntd,nsd->nts", q, k) * scale
        attn = ops.softmax(scores)
        ctx = np.einsum("nts,nsd->ntd", attn, v)
        out = ctx @ self.wo
        self._cache = (x, q, k, v, attn, ctx, scale)
        return out

    def backward(self, dout):
        x, q, k, v, attn, ctx, scale = self._cache
        d = x.shape[-1]
        flat = lambda a: a.reshape(-1, d)
        self.grads = {"wo": flat(ctx).T @ flat(dout)}
        dctx = dout @ self.wo.T
        dattn = np.einsum("ntd,nsd->nts", dctx, v)
        dv = np.einsum("nts,ntd->nsd", attn, dctx)
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores *= scale
        dq = np.einsum("nts,nsd->ntd", dscores, k)
        dk = np.einsum("nts,ntd->nsd", dscores, q)
        self.grads["wq"] = flat(x).T @ flat(dq)
        self.grads["wk"] = flat(x).T @ flat(dk)
        self.grads["wv"] = flat(x).T @ flat(dv)
        return dq @ self.wq.T + dk @ self.wk.T + dv @ self.wv.T


class PatchEmbed(Layer):
    """Non-overlapping convolutional patch embedding producing tokens.

    [N,C,H,W] -> [N, T, D] with T = (H/p)*(W/p).
    """

    def __init__(self, in_ch, dim, patch, rng, dtype):
        fan_in = in_ch * patch * patch
        scale = np.sqrt(2.0 / fan_in)
        self.w = (rng.standard_normal((dim, in_ch, patch, patch)) * scale).astype(dtype)
        self.b = np.zeros(dim, dtype=dtype)
        self.patch = patch
        self.grads = {}

    def param_entries(self):
        return [("w", self.w, Role.WEIGHT), ("b", self.b, Role.BIAS)]

    def set_param(self, name, arr):
        if name == "w":
            self.w = arr
        elif name == "b":
            self.b = arr
        else:
            raise KeyError(name)

    def forward(self, x, train):
        if x.shape[2] % self.patch or x.shape[3] % self.patch:
            raise ConfigError(
                f"patch size {self.patch} does not divide input {x.shape[2:]}"
            )
        out, self._cache = ops.conv2d_forward(x, self.w, self.b, self.patch, 0)
        n, d, h, w = out.shape
        self._grid = (n, d, h, w)
        return out.reshape(n, d, h * w).transpose(0, 2, 1)

    def backward(self, dout):
        n, d, h, w = self._grid
        dconv = dout.transpose(0, 2, 1).reshape(n, d, h, w)
        dx, dw, db = ops.conv2d_backward(dconv, self._cache)
        self.grads = {"w": dw, "b": db}
        return dx
