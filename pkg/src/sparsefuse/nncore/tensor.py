"""Dense tensors with reverse-mode differentiation over a closed operator set.

Every operator records a closure that maps the output gradient to input
gradients.  ``Tensor.backward`` walks the recorded graph in reverse
topological order.  Binary ops broadcast only one-sidedly: the result must
have the shape of one of the operands (bias rows, size-1 axes, scalars).
"""

from __future__ import annotations

import contextlib

import numpy as np
import scipy.sparse as sp

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._prev, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        return transpose(self, perm)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _result(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_binary(a, b, name):
    """Allow broadcasting only when the result keeps one operand's shape."""
    sa, sb = a.shape, b.shape
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        out = None
    if out is None or (out != sa and out != sb):
        raise ShapeError(f"{name}: incompatible shapes {sa} and {sb}")


def _coerce(a, b):
    if not isinstance(a, Tensor):
        ref = b.data.dtype
        a = Tensor(np.asarray(a, dtype=ref))
    if not isinstance(b, Tensor):
        ref = a.data.dtype
        b = Tensor(np.asarray(b, dtype=ref))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _coerce(a, b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _coerce(a, b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = _coerce(a, b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype, copy=False), (x,),
                   lambda g: (g * mask,))


def sigmoid(x):
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1 - y),))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def exp(x):
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x):
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def tabs(x):
    s = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * s,))


# ---------------------------------------------------------------- reductions / shape

def tsum(x, axis=None, keepdims=False):
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def amax(x, axis):
    """Max over one axis; the gradient flows to the first maximiser."""
    idx = np.argmax(x.data, axis=axis)
    idx_e = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_e, axis=axis).squeeze(axis)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx_e, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), back)


def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, perm):
    perm = tuple(perm)
    inv = tuple(np.argsort(perm))
    return _result(x.data.transpose(perm), (x,), lambda g: (g.transpose(inv),))


def _is_basic(key):
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(None), type(Ellipsis))) for k in items)


def getitem(x, key):
    shape, dtype = x.shape, x.data.dtype
    basic = _is_basic(key)

    def back(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _result(x.data[key], (x,), back)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors, axis=0):
    tensors = list(tensors)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, back)


def gather_rows(x, idx):
    """Rows ``x[idx]`` of a 2-D tensor; duplicate indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), back)


def scatter_rows(base, idx, values):
    """Copy of ``base`` with rows ``idx`` (unique) replaced by ``values``."""
    idx = np.asarray(idx, dtype=np.int64)
    if values.shape != (len(idx),) + base.shape[1:]:
        raise ShapeError(f"scatter_rows: values {values.shape} vs rows of {base.shape}")
    out = base.data.copy()
    out[idx] = values.data

    def back(g):
        gb = g.copy()
        gb[idx] = 0
        return gb, g[idx]

    return _result(out, (base, values), back)


def segment_max(x, seg, num_segments):
    """Per-segment column max of a 2-D tensor; empty segments give zeros."""
    seg = np.asarray(seg, dtype=np.int64)
    n, d = x.shape
    out = np.full((num_segments, d), -np.inf, dtype=x.data.dtype)
    if n:
        np.maximum.at(out, seg, x.data)
    out[np.isinf(out)] = 0
    sel = sp.csr_matrix((np.ones(n), (seg, np.arange(n))), shape=(num_segments, n))
    hit = (x.data == out[seg]).astype(x.data.dtype)
    count = np.asarray(sel @ hit)
    count[count == 0] = 1

    def back(g):
        return (hit * (g / count)[seg],)

    return _result(out, (x,), back)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _coerce(a, b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), back)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with weight stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), back)


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalise over the last axis, then apply the optional affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = xd.shape[-1]
    gd = None if gamma is None else gamma.data
    y = xhat if gamma is None else xhat * gd
    if beta is not None:
        y = y + beta.data
    parents = [x] + [t for t in (gamma, beta) if t is not None]

    def back(g):
        dxhat = g if gd is None else g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        out = [dx]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            out.append((g * xhat).sum(axis=lead))
        if beta is not None:
            out.append(g.sum(axis=lead))
        return tuple(out)

    return _result(y, parents, back)


def conv2d(x, weight, bias=None, stride=1, padding=1):
    """NCHW convolution; weight is (out, in, k, k)."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = [x, weight] + ([bias] if bias is not None else [])
    hp, wp = xp.shape[2], xp.shape[3]

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gm.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        res = [gx, gw]
        if bias is not None:
            res.append(gm.sum(axis=0))
        return tuple(res)

    return _result(out, parents, back)


def grid_sample(values, loc):
    """Bilinear sampling with zero padding.

    values: (B, H, W, D); loc: (B, M, 2) continuous pixel coordinates
    (x, y) with pixel centres at integers.  Returns (B, M, D).
    """
    if values.data.ndim != 4 or loc.data.ndim != 3 or loc.shape[0] != values.shape[0]:
        raise ShapeError(f"grid_sample: values {values.shape} vs locations {loc.shape}")
    b, h, w, d = values.shape
    m = loc.shape[1]
    vflat = values.data.reshape(b * h * w, d)
    x = loc.data[..., 0]
    y = loc.data[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    base = (np.arange(b) * h * w)[:, None]
    rows = np.arange(b * m).reshape(b, m)
    corners = []
    # (dx, dy, weight, d weight/dx, d weight/dy)
    for dx, dy, wt, wdx, wdy in (
        (0, 0, (1 - fx) * (1 - fy), -(1 - fy), -(1 - fx)),
        (1, 0, fx * (1 - fy), (1 - fy), -fx),
        (0, 1, (1 - fx) * fy, -fy, (1 - fx)),
        (1, 1, fx * fy, fy, fx),
    ):
        xc, yc = x0 + dx, y0 + dy
        ok = (xc >= 0) & (xc < w) & (yc >= 0) & (yc < h)
        idx = np.where(ok, base + yc * w + xc, 0)
        corners.append((idx, ok, wt, wdx, wdy))
    r = np.concatenate([rows.ravel()] * 4)
    cidx = np.concatenate([c[0].ravel() for c in corners])
    cw = np.concatenate([(c[2] * c[1]).ravel() for c in corners])
    smat = sp.csr_matrix((cw, (r, cidx)), shape=(b * m, b * h * w))
    out = np.asarray(smat @ vflat).reshape(b, m, d).astype(values.data.dtype, copy=False)

    def back(g):
        gf = g.reshape(b * m, d)
        gv = np.asarray(smat.T @ gf).reshape(b, h, w, d).astype(g.dtype, copy=False)
        gx = np.zeros((b, m), dtype=g.dtype)
        gy = np.zeros((b, m), dtype=g.dtype)
        for idx, ok, _, wdx, wdy in corners:
            dot = (vflat[idx.ravel()] * gf).sum(axis=1).reshape(b, m) * ok
            gx += wdx * dot
            gy += wdy * dot
        return gv, np.stack([gx, gy], axis=-1)

    return _result(out, (values, loc), back)


# ---------------------------------------------------------------- fused losses

def clamp_probs(p, lo=1e-4, hi=1 - 1e-4):
    """Clamp probabilities; gradient is zero where the clamp is active."""
    inside = (p.data > lo) & (p.data < hi)
    return _result(np.clip(p.data, lo, hi), (p,), lambda g: (g * inside,))


def gaussian_focal_loss(pred, target, alpha=2.0, gamma=4.0):
    """Penalty-reduced focal loss on heatmap probabilities.

    ``pred`` holds probabilities (already clamped by the caller or not);
    they are clamped to [1e-4, 1 - 1e-4] here.  Normalised by the number of
    cells where the target equals exactly 1 (floor 1).
    """
    if pred.shape != np.shape(target):
        raise ShapeError(f"gaussian_focal_loss: pred {pred.shape} vs target {np.shape(target)}")
    t = np.asarray(target, dtype=pred.data.dtype)
    p = clamp_probs(pred)
    pd = p.data
    pos = t == 1
    neg_w = (1 - t) ** gamma
    npos = max(1.0, float(pos.sum()))
    lp = np.log(pd)
    l1p = np.log(1 - pd)
    loss = -(np.where(pos, (1 - pd) ** alpha * lp, 0).sum()
             + np.where(pos, 0, neg_w * pd ** alpha * l1p).sum()) / npos

    def back(g):
        dpos = -(-alpha * (1 - pd) ** (alpha - 1) * lp + (1 - pd) ** alpha / pd)
        dneg = -neg_w * (alpha * pd ** (alpha - 1) * l1p - pd ** alpha / (1 - pd))
        return (g * np.where(pos, dpos, dneg) / npos,)

    return _result(np.asarray(loss, dtype=pred.data.dtype), (p,), back)


def sigmoid_focal_loss(logits, target, alpha=0.25, gamma=2.0):
    """Summed sigmoid focal loss over all elements (targets in [0, 1])."""
    if logits.shape != np.shape(target):
        raise ShapeError(f"sigmoid_focal_loss: logits {logits.shape} vs target {np.shape(target)}")
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    p = _sigmoid(z)
    logp = -np.logaddexp(0, -z)
    log1p = -np.logaddexp(0, z)
    l_pos = -alpha * (1 - p) ** gamma * logp
    l_neg = -(1 - alpha) * p ** gamma * log1p
    loss = (t * l_pos + (1 - t) * l_neg).sum()

    def back(g):
        d_pos = -alpha * (-gamma * (1 - p) ** gamma * p * logp + (1 - p) ** (gamma + 1))
        d_neg = -(1 - alpha) * (gamma * p ** gamma * (1 - p) * log1p - p ** (gamma + 1))
        return (g * (t * d_pos + (1 - t) * d_neg),)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), back)
