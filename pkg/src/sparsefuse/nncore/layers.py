"""Parameterised building blocks on top of the tensor operators.

Each block registers its parameters in a :class:`ParamStore` under a dotted
prefix at construction time and is a plain callable afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamStore


@dataclass(frozen=True)
class AttentionConfig:
    dim: int = 32
    heads: int = 2
    points: int = 4
    levels: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"hidden dim {self.dim} is not divisible by {self.heads} heads")


class Linear:
    def __init__(self, store: ParamStore, name, d_in, d_out, bias=True, init="xavier"):
        self.weight = store.get_or_create(f"{name}.weight", (d_in, d_out), init)
        self.bias = store.get_or_create(f"{name}.bias", (d_out,), "zeros") if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store, name, dim):
        self.gamma = store.get_or_create(f"{name}.gamma", (dim,), "ones")
        self.beta = store.get_or_create(f"{name}.beta", (dim,), "zeros")

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class MLP:
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, store, name, sizes, last_bias_init="zeros"):
        self.layers = [Linear(store, f"{name}.{i}", a, b) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        if last_bias_init != "zeros":
            b = self.layers[-1].bias
            b.data[...] = last_bias_init

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            if i:
                x = T.relu(x)
            x = layer(x)
        return x


class FFN:
    """Residual feed-forward sub-layer with post-norm (expansion 2x)."""

    def __init__(self, store, name, dim, expansion=2):
        self.mlp = MLP(store, f"{name}.mlp", [dim, expansion * dim, dim])
        self.norm = LayerNorm(store, f"{name}.norm", dim)

    def __call__(self, x):
        return self.norm(x + self.mlp(x))


class MultiHeadAttention:
    """Scaled dot-product attention with positional terms added to q, k and v."""

    def __init__(self, store, name, dim, heads):
        if dim % heads:
            raise ValueError(f"hidden dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Linear(store, f"{name}.q", dim, dim)
        self.k = Linear(store, f"{name}.k", dim, dim)
        self.v = Linear(store, f"{name}.v", dim, dim)
        self.out = Linear(store, f"{name}.out", dim, dim)
        self.last_weights = None

    def __call__(self, x, kv=None, pos=None, pos_kv=None):
        self_attn = kv is None
        if self_attn:
            kv, pos_kv = x, pos
        if x.shape[-1] != self.dim or kv.shape[-1] != self.dim:
            raise T.ShapeError(f"attention: query {x.shape} / key-value {kv.shape} vs dim {self.dim}")
        n, m = x.shape[0], kv.shape[0]
        h, dh = self.heads, self.dim // self.heads
        xq = x if pos is None else x + pos
        xkv = xq if self_attn else (kv if pos_kv is None else kv + pos_kv)
        q = self.q(xq).reshape(n, h, dh).transpose(1, 0, 2)
        k = self.k(xkv).reshape(m, h, dh).transpose(1, 2, 0)
        v = self.v(xkv).reshape(m, h, dh).transpose(1, 0, 2)
        scores = T.mul(T.matmul(q, k), 1.0 / np.sqrt(dh))
        w = T.softmax(scores, axis=-1)
        self.last_weights = w.data
        o = T.matmul(w, v).transpose(1, 0, 2).reshape(n, self.dim)
        return self.out(o)


class AttentionBlock:
    """Post-norm residual attention sub-layer."""

    def __init__(self, store, name, dim, heads):
        self.attn = MultiHeadAttention(store, f"{name}.attn", dim, heads)
        self.norm = LayerNorm(store, f"{name}.norm", dim)

    def __call__(self, x, kv=None, pos=None, pos_kv=None):
        return self.norm(x + self.attn(x, kv, pos, pos_kv))


def level_pixel_centres(h, w):
    """Normalised (x, y) centres of an h x w grid, row-major, shape (h*w, 2)."""
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


class DeformableAttention:
    """Multi-scale deformable attention over one view's feature pyramid.

    Sampling offsets are in pixels of each level; samples outside a map
    read as zero.  Attention weights are normalised jointly over
    (levels x points) per head.
    """

    def __init__(self, store, name, cfg: AttentionConfig):
        self.cfg = cfg
        c, h, lv, p = cfg.dim, cfg.heads, cfg.levels, cfg.points
        self.offsets = Linear(store, f"{name}.offsets", c, h * lv * p * 2)
        self.weights = Linear(store, f"{name}.weights", c, h * lv * p)
        self.value = Linear(store, f"{name}.value", c, c)
        self.out = Linear(store, f"{name}.out", c, c)
        self.last_weights = None

    def project_values(self, pyramid, pyramid_pos=None):
        """Value maps per level, each (heads, H, W, dh)."""
        h, dh = self.cfg.heads, self.cfg.dim // self.cfg.heads
        out = []
        for lvl, fmap in enumerate(pyramid):
            hl, wl, c = fmap.shape
            flat = fmap.reshape(hl * wl, c)
            if pyramid_pos is not None:
                flat = flat + pyramid_pos[lvl]
            v = self.value(flat).reshape(hl, wl, h, dh).transpose(2, 0, 1, 3)
            out.append(v)
        return out

    def __call__(self, query, values, ref):
        """query (n, C); values from :meth:`project_values`; ref (n, 2) in [0, 1]."""
        cfg = self.cfg
        n = query.shape[0]
        h, lv, p, dh = cfg.heads, cfg.levels, cfg.points, cfg.dim // cfg.heads
        if len(values) != lv:
            raise T.ShapeError(f"deformable attention expects {lv} levels, got {len(values)}")
        if ref.shape != (n, 2):
            raise T.ShapeError(f"reference points {ref.shape} vs queries {query.shape}")
        off = self.offsets(query).reshape(n, h, lv, p, 2)
        aw = T.softmax(self.weights(query).reshape(n, h, lv * p), axis=-1)
        self.last_weights = aw.data
        aw = aw.reshape(n, h, lv, p)
        ref_d = ref.data if isinstance(ref, T.Tensor) else np.asarray(ref)
        total = None
        for lvl, v in enumerate(values):
            _, hl, wl, _ = v.shape
            base = ref_d * np.array([wl, hl], dtype=ref_d.dtype) - 0.5
            loc = T.add(off[:, :, lvl], T.as_tensor(base[:, None, None, :].astype(query.dtype)))
            loc = loc.transpose(1, 0, 2, 3).reshape(h, n * p, 2)
            s = T.grid_sample(v, loc).reshape(h, n, p, dh)
            wl_ = aw[:, :, lvl].transpose(1, 0, 2).reshape(h, n, p, 1)
            contrib = T.tsum(T.mul(s, wl_), axis=2)
            total = contrib if total is None else total + contrib
        o = total.transpose(1, 0, 2).reshape(n, cfg.dim)
        return self.out(o)


class Conv2d:
    def __init__(self, store, name, c_in, c_out, k=3, stride=1, bias=True):
        self.stride, self.pad = stride, k // 2
        fan = (c_in * k * k, c_out * k * k)
        self.weight = store.get_or_create(f"{name}.weight", (c_out, c_in, k, k), "xavier", fan=fan)
        self.bias = store.get_or_create(f"{name}.bias", (c_out,), "zeros") if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ChannelNorm:
    """Layer norm across channels at every pixel of an NCHW map."""

    def __init__(self, store, name, channels):
        self.norm = LayerNorm(store, name, channels)

    def __call__(self, x):
        return self.norm(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)


class ConvNormAct:
    def __init__(self, store, name, c_in, c_out, stride=1):
        self.conv = Conv2d(store, f"{name}.conv", c_in, c_out, 3, stride)
        self.norm = ChannelNorm(store, f"{name}.norm", c_out)

    def __call__(self, x):
        return T.relu(self.norm(self.conv(x)))


class ResidualBlock:
    """Basic residual block: conv-norm-relu-conv-norm plus skip, then relu.

    The skip is a strided 1x1 projection with norm when the stride or the
    channel count changes.
    """

    def __init__(self, store, name, c_in, c_out, stride=1):
        self.conv1 = Conv2d(store, f"{name}.conv1", c_in, c_out, 3, stride, bias=False)
        self.norm1 = ChannelNorm(store, f"{name}.norm1", c_out)
        self.conv2 = Conv2d(store, f"{name}.conv2", c_out, c_out, 3, 1, bias=False)
        self.norm2 = ChannelNorm(store, f"{name}.norm2", c_out)
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(store, f"{name}.proj", c_in, c_out, 1, stride, bias=False)
            self.proj_norm = ChannelNorm(store, f"{name}.proj_norm", c_out)

    def __call__(self, x):
        y = T.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        skip = x if self.proj is None else self.proj_norm(self.proj(x))
        return T.relu(y + skip)
