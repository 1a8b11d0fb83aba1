"""Finite-difference gradient suite over every differentiable op and branch.

Each case builds a small float64 graph from a seeded generator and returns
(loss closure, leaves to check).  :func:`run_suite` repeats every case over
several seeds and reports the worst relative error per case.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .detector import CameraDecoder, LidarDecoder, QuerySet, lidar_pred_vector
from .fusion import (CrossAttentionFusion, MLPFusion, OptimalTransportFusion, SelfAttentionFusion,
                     SequentialCameraStage, ViewTransform)
from .detector import DecodedBoxes
from .geometry import BevGrid, level_camera
from .losses import detection_loss, total_loss
from .config import LossConfig
from .transfer import GeometricTransfer, SemanticTransfer

TOLERANCE = 1e-4
F64 = np.float64


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return nn.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _weighted_sum(x, rng):
    """Scalar probe with fixed random weights so every output entry matters."""
    w = nn.Tensor(rng.uniform(-1, 1, size=x.shape))
    return (x * w).sum()


def _params(store, rng, k=4):
    names = [n for n, _ in store.items()]
    pick = rng.choice(len(names), size=min(k, len(names)), replace=False)
    return {names[i]: store[names[i]] for i in sorted(pick)}


# ------------------------------------------------------------------ op cases

def case_elementwise(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    c = _t(rng, 1, 4)
    w = rng.uniform(-1, 1, (3, 4))
    def f():
        x = nn.add(a, b) * c - nn.relu(a) + nn.sigmoid(b) + nn.exp(a * 0.5) + nn.tabs(b)
        x = x + nn.log(nn.sigmoid(a) + 1.0)
        return (x * nn.Tensor(w)).sum()
    return f, {"a": a, "b": b, "c": c}


def case_reductions(rng):
    a = _t(rng, 3, 4, 5)
    w1, w2 = rng.uniform(-1, 1, (3, 5)), rng.uniform(-1, 1, (4, 5))
    def f():
        return ((nn.tsum(a, axis=1) * nn.Tensor(w1)).sum() + (nn.amax(a, axis=0) * nn.Tensor(w2)).sum()
                + nn.mean(a) * 2.0)
    return f, {"a": a}


def case_shape_ops(rng):
    a, b = _t(rng, 4, 6), _t(rng, 4, 6)
    idx = rng.integers(0, 8, size=5)
    w = rng.uniform(-1, 1, (5, 3))
    def f():
        x = nn.concat([a, b], axis=0).reshape(8, 2, 3).transpose(0, 2, 1)[:, :, 1]
        y = nn.stack([a, b], axis=0)[1, 1:3].sum() + a[[0, 2, 2]].sum()
        return (nn.gather_rows(x, idx) * nn.Tensor(w)).sum() + y
    return f, {"a": a, "b": b}


def case_scatter_segment(rng):
    base, vals, x = _t(rng, 6, 3), _t(rng, 2, 3), _t(rng, 7, 3)
    idx = rng.choice(6, size=2, replace=False)
    seg = rng.integers(0, 4, size=7)
    w1, w2 = rng.uniform(-1, 1, (6, 3)), rng.uniform(-1, 1, (4, 3))
    def f():
        return ((nn.scatter_rows(base, idx, vals) * nn.Tensor(w1)).sum()
                + (nn.segment_max(x, seg, 4) * nn.Tensor(w2)).sum())
    return f, {"base": base, "vals": vals, "x": x}


def case_matmul_linear(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    x, W, bias = _t(rng, 3, 4), _t(rng, 4, 2), _t(rng, 2)
    def f():
        return _weighted_sum(nn.matmul(a, b), np.random.default_rng(1)) + \
            _weighted_sum(nn.linear(x, W, bias), np.random.default_rng(2))
    return f, {"a": a, "b": b, "x": x, "W": W, "bias": bias}


def case_softmax_layernorm(rng):
    x, g, b = _t(rng, 4, 6), _t(rng, 6), _t(rng, 6)
    def f():
        return _weighted_sum(nn.softmax(x * 2.0, axis=-1), np.random.default_rng(3)) + \
            _weighted_sum(nn.layer_norm(x, g, b), np.random.default_rng(4))
    return f, {"x": x, "gamma": g, "beta": b}


def case_conv(rng):
    stride = int(rng.integers(1, 3))
    x, w, b = _t(rng, 2, 3, 5, 6), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    def f():
        return _weighted_sum(nn.conv2d(x, w, b, stride=stride, padding=1), np.random.default_rng(5))
    return f, {"x": x, "w": w, "b": b}


def case_grid_sample(rng):
    v = _t(rng, 2, 4, 5, 3)
    loc = nn.Tensor(rng.uniform(-1.2, 5.2, size=(2, 6, 2)), requires_grad=True)
    def f():
        return _weighted_sum(nn.grid_sample(v, loc), np.random.default_rng(6))
    return f, {"values": v, "loc": loc}


def case_focal_losses(rng):
    z = _t(rng, 5, 3, lo=-2, hi=2)
    target = (rng.random((5, 3)) < 0.3).astype(F64)
    heat_t = rng.uniform(0, 0.9, (4, 4))
    heat_t[1, 2] = 1.0
    zh = _t(rng, 4, 4, lo=-2, hi=2)
    def f():
        return nn.sigmoid_focal_loss(z, target) + nn.gaussian_focal_loss(nn.sigmoid(zh), heat_t)
    return f, {"logits": z, "heat_logits": zh}


# ------------------------------------------------------------------ layer cases

ATT = nn.AttentionConfig(dim=8, heads=2, points=2, levels=2)


def _store(rng):
    return nn.ParamStore(int(rng.integers(1 << 30)), dtype=F64)


def case_mlp_attention(rng):
    st = _store(rng)
    mlp = nn.MLP(st, "mlp", [8, 8, 8])
    mha = nn.MultiHeadAttention(st, "mha", 8, 2)
    x, kv, pos = _t(rng, 3, 8), _t(rng, 5, 8), _t(rng, 3, 8)
    def f():
        y = mha(mlp(x), pos=pos) + mha(x, kv=kv, pos=pos)
        return _weighted_sum(y, np.random.default_rng(7))
    leaves = {"x": x, "kv": kv, "pos": pos}
    leaves.update(_params(st, rng))
    return f, leaves


def case_deformable(rng):
    st = _store(rng)
    d = nn.DeformableAttention(st, "deform", ATT)
    q = _t(rng, 3, 8)
    maps = [_t(rng, 4, 5, 8), _t(rng, 2, 3, 8)]
    ref = rng.uniform(0.1, 0.9, (3, 2))
    def f():
        return _weighted_sum(d(q, d.project_values(maps), ref), np.random.default_rng(8))
    leaves = {"query": q, "map0": maps[0], "map1": maps[1]}
    leaves.update(_params(st, rng))
    return f, leaves


def case_residual(rng):
    st = _store(rng)
    stride = int(rng.integers(1, 3))
    blk = nn.ResidualBlock(st, "res", 3, 4, stride=stride)
    x = _t(rng, 1, 3, 5, 4)
    def f():
        return _weighted_sum(blk(x), np.random.default_rng(9))
    leaves = {"x": x}
    leaves.update(_params(st, rng))
    return f, leaves


# ------------------------------------------------------------------ branch cases

GRID = BevGrid((-6.0, 6.0), (-6.0, 6.0), 1.5)


def _cams():
    return [level_camera(0, 0.0, (0, 0, 0), 4.0, (8, 6)), level_camera(1, np.pi, (0, 0, 0), 4.0, (8, 6))]


def _bev_queries(rng, n):
    ref = rng.uniform(-5.5, 5.5, (n, 2))
    return QuerySet(_t(rng, n, 8), ref, rng.integers(0, 3, n), "bev")


def case_lidar_decoder(rng):
    st = _store(rng)
    dec = LidarDecoder(st, "dec", ATT, GRID)
    q = _bev_queries(rng, 3)
    bev = _t(rng, 1, 8, GRID.height, GRID.width)
    def f():
        return _weighted_sum(dec(q, bev).features, np.random.default_rng(10))
    leaves = {"queries": q.features, "bev": bev}
    leaves.update(_params(st, rng))
    return f, leaves


def case_camera_decoder(rng):
    st = _store(rng)
    dec = CameraDecoder(st, "dec", ATT, 2)
    pyr = [_t(rng, 2, 8, 3, 4), _t(rng, 2, 8, 2, 2)]
    q = QuerySet(_t(rng, 4, 8), rng.uniform(0.1, 0.9, (4, 2)), rng.integers(0, 3, 4), "perspective",
                 view_ids=np.array([0, 1, 1, 0]))
    def f():
        return _weighted_sum(dec(q, pyr).features, np.random.default_rng(11))
    leaves = {"queries": q.features, "level0": pyr[0]}
    leaves.update(_params(st, rng))
    return f, leaves


def _decoded(rng, n, view_ids):
    return DecodedBoxes(np.column_stack([rng.uniform(-1, 1, (n, 2)), rng.uniform(3, 5, n)]),
                        rng.uniform(0.5, 2, (n, 3)), rng.uniform(-3, 3, n), rng.normal(0, 0.1, (n, 2)),
                        rng.uniform(0, 1, n), rng.integers(0, 3, n), view_ids=view_ids,
                        uv=rng.uniform(0, 8, (n, 2)))


def case_view_transform(rng):
    st = _store(rng)
    vt = ViewTransform(st, "vt", ATT, GRID)
    views = np.array([0, 1, 0])
    q = QuerySet(_t(rng, 3, 8), rng.uniform(0.1, 0.9, (3, 2)), rng.integers(0, 3, 3), "perspective", view_ids=views)
    dec = _decoded(rng, 3, views)
    cams = _cams()
    def f():
        return _weighted_sum(vt(q, dec, cams).features, np.random.default_rng(12))
    leaves = {"queries": q.features}
    leaves.update(_params(st, rng))
    return f, leaves


def _fusion_case(cls, extra=None):
    def case(rng):
        st = _store(rng)
        fuse = cls(st, "fuse", ATT, GRID, 3, **(extra or {}))
        q_l, q_c = _bev_queries(rng, 3), _bev_queries(rng, 2)
        s_l, s_c = rng.uniform(0.1, 1, 3), rng.uniform(0.1, 1, 2)
        def f():
            q, out = fuse(q_l, q_c, lidar_scores=s_l, camera_scores=s_c)
            return _weighted_sum(lidar_pred_vector(out, q.ref_points, GRID), np.random.default_rng(13)) + \
                _weighted_sum(out["cls"], np.random.default_rng(14))
        leaves = {"lidar": q_l.features, "camera": q_c.features}
        leaves.update(_params(st, rng))
        return f, leaves
    case.__name__ = f"case_fusion_{cls.__name__}"
    return case


def case_sequential(rng):
    st = _store(rng)
    mode = ("inherit_feat", "reinit_feat")[int(rng.integers(2))]
    seq = SequentialCameraStage(st, "seq", ATT, GRID, 3, mode)
    q_l = _bev_queries(rng, 3)
    centers = np.column_stack([rng.uniform(-5, 5, (3, 2)), np.zeros(3)])
    centers[:, 0] = np.where(np.abs(centers[:, 0]) < 1.0, 2.0, centers[:, 0])
    pyr = [_t(rng, 2, 8, 3, 4), _t(rng, 2, 8, 2, 2)]
    def f():
        _, out = seq(q_l, centers, pyr, _cams())
        return _weighted_sum(out["offset"], np.random.default_rng(15)) + _weighted_sum(out["cls"], np.random.default_rng(16))
    leaves = {"lidar": q_l.features, "level0": pyr[0]}
    leaves.update(_params(st, rng))
    return f, leaves


def case_transfers(rng):
    st = _store(rng)
    geo = GeometricTransfer(st, "geo", 8, depth_channels=4, levels=2)
    sem = SemanticTransfer(st, "sem", ATT)
    pyr = [_t(rng, 2, 8, 3, 4), _t(rng, 2, 8, 2, 2)]
    depth = rng.uniform(0, 10, (2, 3, 4)) * (rng.random((2, 3, 4)) < 0.5)
    bev = _t(rng, 1, 8, GRID.height, GRID.width)
    pts = np.column_stack([rng.uniform(-5.9, 5.9, (12, 2)), rng.uniform(-1, 1, 12), rng.uniform(0, 1, 12)])
    cams = _cams()
    def f():
        out = geo(pyr, depth)
        b = sem(bev, pts, out, cams, GRID)
        return _weighted_sum(out[0], np.random.default_rng(17)) + _weighted_sum(b, np.random.default_rng(18))
    leaves = {"level0": pyr[0], "level1": pyr[1], "bev": bev}
    leaves.update(_params(st, rng))
    return f, leaves


def case_losses(rng):
    logits = _t(rng, 5, 3, lo=-2, hi=2)
    vec = _t(rng, 5, 10)
    gt_cats = rng.integers(0, 3, 3)
    gt_vec = rng.uniform(-1, 1, (3, 10))
    heat = _t(rng, 6, lo=-2, hi=2)
    heat_t = np.array([1.0, 0.5, 0.2, 0.0, 0.9, 0.1])
    cfg = LossConfig()
    def f():
        l_det, _ = detection_loss(logits, vec, gt_cats, gt_vec, cfg)
        l_cam, _ = detection_loss(logits, vec, gt_cats[:1], gt_vec[:1], cfg, rows=np.array([0, 2]))
        return total_loss(nn.gaussian_focal_loss(nn.sigmoid(heat), heat_t), l_cam, l_det, l_det, l_det).tensor
    return f, {"logits": logits, "vec": vec, "heat": heat}


CASES = [
    case_elementwise, case_reductions, case_shape_ops, case_scatter_segment, case_matmul_linear,
    case_softmax_layernorm, case_conv, case_grid_sample, case_focal_losses,
    case_mlp_attention, case_deformable, case_residual,
    case_lidar_decoder, case_camera_decoder, case_view_transform,
    _fusion_case(SelfAttentionFusion), _fusion_case(MLPFusion), _fusion_case(CrossAttentionFusion),
    _fusion_case(OptimalTransportFusion, {"iters": 50}), case_sequential, case_transfers, case_losses,
]


@dataclass
class CaseResult:
    name: str
    configs: int
    worst: float
    worst_leaf: str

    @property
    def ok(self):
        return self.worst <= TOLERANCE


def run_suite(seed=0, reps=5, samples=4, h=1e-5, cases=None):
    """Run every case ``reps`` times; returns a list of CaseResult."""
    results = []
    for case in cases or CASES:
        worst, leaf = 0.0, ""
        for r in range(reps):
            rng = np.random.default_rng([seed, r, zlib_name(case.__name__)])
            f, leaves = case(rng)
            errs = nn.check_tensors(f, leaves, rng, h=h, samples=samples)
            for k, e in errs.items():
                if not np.isfinite(e) or e > worst:
                    worst, leaf = (e if np.isfinite(e) else np.inf), k
        results.append(CaseResult(case.__name__.replace("case_", ""), reps, worst, leaf))
    return results


def zlib_name(name):
    import zlib
    return zlib.crc32(name.encode())


def main_report(results, out=print):
    total = sum(r.configs for r in results)
    for r in results:
        out(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<40s} configs={r.configs:3d} worst={r.worst:.2e} ({r.worst_leaf})")
    out(f"{total} configurations, {sum(not r.ok for r in results)} failing")
    return all(r.ok for r in results)
