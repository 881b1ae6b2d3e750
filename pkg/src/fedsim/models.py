"""Desk-scale model families with pluggable normalization and token mixers.

Three families:
  MLP            flatten -> [linear -> norm -> ReLU] x depth -> linear head
  TinyCNN        [conv3x3 -> norm -> ReLU] x depth -> avg pool -> head
  TinyMetaFormer patch embed -> [norm -> mixer -> +res -> norm -> MLP -> +res]
                 x depth -> token mean -> head

Parameter names are hierarchical ("block2.norm.gamma") and identical across
any two models built from the same spec, which is what federation relies on.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError
from .ops import softmax_cross_entropy
from .params import ParamSet, Role

FAMILIES = ("MLP", "TinyCNN", "TinyMetaFormer")
NORM_KINDS = ("BatchNorm", "LayerNorm", "GroupNorm", "None")
TOKEN_MIXERS = ("Identity", "Pooling", "RandomMatrix", "Attention")


@dataclass(frozen=True)
class ModelSpec:
    family: str
    input_shape: tuple
    num_classes: int
    depth: int = 2
    width: int = 16
    norm_kind: str = "None"
    token_mixer: str = None
    groups: int = 2
    patch_size: int = 4
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"unknown norm_kind {self.norm_kind!r}")
        if self.family == "TinyMetaFormer":
            if self.token_mixer not in TOKEN_MIXERS:
                raise ConfigError(
                    f"TinyMetaFormer requires a token_mixer from {TOKEN_MIXERS}"
                )
        elif self.token_mixer is not None:
            raise ConfigError(f"token_mixer is only valid for TinyMetaFormer")
        if self.depth < 1 or self.width < 1 or self.num_classes < 2:
            raise ConfigError("depth/width/num_classes out of range")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")


def _make_norm(kind, channels, groups, dtype):
    if kind == "BatchNorm":
        return L.BatchNorm(channels, dtype)
    if kind == "LayerNorm":
        return L.LayerNorm(channels, dtype)
    if kind == "GroupNorm":
        return L.GroupNorm(channels, groups, dtype)
    return None


class MetaFormerBlock(L.Layer):
    """norm -> token mixer -> residual -> norm -> channel MLP -> residual."""

    def __init__(self, dim, num_tokens, spec, rng, dtype):
        self.norm1 = _make_norm(spec.norm_kind, dim, spec.groups, dtype)
        self.norm2 = _make_norm(spec.norm_kind, dim, spec.groups, dtype)
        if spec.token_mixer == "Identity":
            self.mixer = L.IdentityMixer()
        elif spec.token_mixer == "Pooling":
            self.mixer = L.MatrixMixer(L.pooling_matrix(num_tokens, 3, dtype))
        elif spec.token_mixer == "RandomMatrix":
            m = rng.standard_normal((num_tokens, num_tokens)) / math.sqrt(num_tokens)
            self.mixer = L.MatrixMixer(m.astype(dtype))
        else:
            self.mixer = L.AttentionMixer(dim, rng, dtype)
        self.fc1 = L.Linear(dim, 2 * dim, rng, dtype)
        self.act = L.GELU()
        self.fc2 = L.Linear(2 * dim, dim, rng, dtype)
        self._subs = [("norm1", self.norm1), ("mixer", self.mixer),
                      ("norm2", self.norm2), ("fc1", self.fc1),
                      ("fc2", self.fc2)]

    def param_entries(self):
        out = []
        for prefix, sub in self._subs:
            if sub is None:
                continue
            for name, arr, role in sub.param_entries():
                out.append((f"{prefix}.{name}", arr, role))
        return out

    def set_param(self, name, arr):
        prefix, _, rest = name.partition(".")
        for p, sub in self._subs:
            if p == prefix and sub is not None:
                sub.set_param(rest, arr)
                return
        raise KeyError(name)

    def forward(self, x, train):
        h = self.norm1.forward(x, train) if self.norm1 else x
        h = self.mixer.forward(h, train)
        mixed = x + h
        h = self.norm2.forward(mixed, train) if self.norm2 else mixed
        h = self.fc1.forward(h, train)
        h = self.act.forward(h, train)
        h = self.fc2.forward(h, train)
        return mixed + h

    def backward(self, dout):
        d = self.fc2.backward(dout)
        d = self.act.backward(d)
        d = self.fc1.backward(d)
        if self.norm2:
            d = self.norm2.backward(d)
        dmixed = dout + d
        d = self.mixer.backward(dmixed)
        if self.norm1:
            d = self.norm1.backward(d)
        dx = dmixed + d
        self.grads = {}
        for prefix, sub in self._subs:
            if sub is not None and getattr(sub, "grads", None):
                for k, g in sub.grads.items():
                    self.grads[f"{prefix}.{k}"] = g
        return dx


class Model:
    """A named sequence of layers plus the softmax cross-entropy loss."""

    def __init__(self, spec, named_layers):
        self.spec = spec
        self.named_layers = named_layers

    def paramset(self):
        ps = ParamSet()
        for prefix, layer in self.named_layers:
            for name, arr, role in layer.param_entries():
                ps.add(f"{prefix}.{name}", arr.copy(), role)
        return ps

    def _param_index(self):
        if not hasattr(self, "_index"):
            self._index = {}
            for prefix, layer in self.named_layers:
                for name, _, _ in layer.param_entries():
                    self._index[f"{prefix}.{name}"] = (layer, name)
        return self._index

    def load(self, params):
        """Overwrite the named subset of this model's parameters."""
        index = self._param_index()
        for name, arr, _ in params:
            if name not in index:
                raise ShapeError(f"no layer for parameter {name!r}")
            layer, local = index[name]
            layer.set_param(local, arr.copy())

    def param_dict(self, roles=None):
        """Live name -> array references (optionally filtered by role)."""
        out = {}
        for prefix, layer in self.named_layers:
            for name, arr, role in layer.param_entries():
                if roles is None or role in roles:
                    out[f"{prefix}.{name}"] = arr
        return out

    def set_param_dict(self, d):
        index = self._param_index()
        for name, arr in d.items():
            layer, local = index[name]
            layer.set_param(local, arr)

    def forward(self, x, train=False):
        for _, layer in self.named_layers:
            x = layer.forward(x, train)
        return x

    def loss_and_grads(self, x, labels, train=True):
        """Mean cross-entropy and gradients for every trainable parameter."""
        logits = self.forward(x, train)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        d = dlogits
        for _, layer in reversed(self.named_layers):
            d = layer.backward(d)
        grads = {}
        for prefix, layer in self.named_layers:
            for name, arr, role in layer.param_entries():
                if role in (Role.WEIGHT, Role.BIAS, Role.NORM_AFFINE):
                    grads[f"{prefix}.{name}"] = layer.grads[name]
        return loss, grads


def build_model(spec):
    """Deterministic construction from (spec, spec.seed)."""
    dtype = np.dtype(spec.dtype)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xF5]))
    named = []
    if spec.family == "MLP":
        in_features = int(np.prod(spec.input_shape))
        named.append(("flatten", L.Flatten()))
        feat = in_features
        for i in range(spec.depth):
            named.append((f"block{i}.fc", L.Linear(feat, spec.width, rng, dtype)))
            norm = _make_norm(spec.norm_kind, spec.width, spec.groups, dtype)
            if norm:
                named.append((f"block{i}.norm", norm))
            named.append((f"block{i}.act", L.ReLU()))
            feat = spec.width
        named.append(("head", L.Linear(feat, spec.num_classes, rng, dtype)))
    elif spec.family == "TinyCNN":
        if len(spec.input_shape) != 3:
            raise ConfigError(f"TinyCNN needs [C,H,W] input, got {spec.input_shape}")
        ch, h, w = spec.input_shape
        if h < 2 or w < 2:
            raise ConfigError(f"TinyCNN needs at least 2x2 images, got {h}x{w}")
        for i in range(spec.depth):
            named.append((f"block{i}.conv",
                          L.Conv2d(ch, spec.width, 3, 1, 1, rng, dtype)))
            norm = _make_norm(spec.norm_kind, spec.width, spec.groups, dtype)
            if norm:
                named.append((f"block{i}.norm", norm))
            named.append((f"block{i}.act", L.ReLU()))
            ch = spec.width
        # 2x2 average pool keeps coarse spatial layout for the linear head
        named.append(("pool", L.AvgPool2d(2, 2)))
        named.append(("flatten", L.Flatten()))
        feat = ch * (h // 2) * (w // 2)
        named.append(("head", L.Linear(feat, spec.num_classes, rng, dtype)))
    else:
        if len(spec.input_shape) != 3:
            raise ConfigError(
                f"TinyMetaFormer needs [C,H,W] input, got {spec.input_shape}"
            )
        c, h, w = spec.input_shape
        p = spec.patch_size
        if h % p or w % p:
            raise ConfigError(f"patch size {p} does not divide {h}x{w}")
        num_tokens = (h // p) * (w // p)
        named.append(("embed", L.PatchEmbed(c, spec.width, p, rng, dtype)))
        for i in range(spec.depth):
            named.append((f"block{i}",
                          MetaFormerBlock(spec.width, num_tokens, spec, rng, dtype)))
        named.append(("pool", L.TokenMean()))
        named.append(("head", L.Linear(spec.width, spec.num_classes, rng, dtype)))
    return Model(spec, named)
