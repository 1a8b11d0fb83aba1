import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsefuse import nncore as nn
from sparsefuse.config import RunConfig
from sparsefuse.detector import QuerySet, decode_perspective
from sparsefuse.fusion import (FUSION_CLASSES, CrossAttentionFusion, MLPFusion, OptimalTransportFusion,
                               SelfAttentionFusion, SequentialCameraStage, ViewTransform, attention_rows,
                               ipot_solve)
from sparsefuse.geometry import BevGrid, boxes_cam_to_lidar, level_camera
from sparsefuse.model import SparseFusionModel

ATT = nn.AttentionConfig(dim=8, heads=2, points=2, levels=2)
GRID = BevGrid()


def bev_set(n, rng, dim=8):
    return QuerySet(nn.Tensor(rng.normal(size=(n, dim))), rng.uniform(-20, 20, (n, 2)),
                    rng.integers(0, 6, n), "bev")


@pytest.mark.parametrize("name,expect", [("self_attention", 16 + 16), ("mlp", 32),
                                         ("cross_attention", 16), ("optimal_transport", 16)])
def test_fused_counts(name, expect):
    rng = np.random.default_rng(0)
    fuse = FUSION_CLASSES[name](nn.ParamStore(0, dtype=np.float64), "f", ATT, GRID, 6)
    q, out = fuse(bev_set(16, rng), bev_set(16, rng), lidar_scores=rng.random(16), camera_scores=rng.random(16))
    assert len(q) == expect and out["cls"].shape == (expect, 6)


def _lp_vertex_cost(cost, a, b):
    # 2x2 transport polytope: T = [[t, a-t], [b-t, 1-a-b+t]], vertices at the ends of t
    best = np.inf
    for t in (max(0.0, a + b - 1.0), min(a, b)):
        plan = np.array([[t, a - t], [b - t, 1 - a - b + t]])
        best = min(best, float((plan * cost).sum()))
    return best


def test_ipot_two_by_two_lp_oracle():
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    plan = ipot_solve(cost, [0.5, 0.5], [0.5, 0.5])
    np.testing.assert_allclose(plan.plan, [[0.5, 0], [0, 0.5]], atol=1e-3)
    assert abs((plan.plan * cost).sum() - _lp_vertex_cost(cost, 0.5, 0.5)) <= 1e-3
    # random 2x2 problems: never below the LP optimum, and more iterations close the gap
    rng = np.random.default_rng(1)
    for _ in range(20):
        c = rng.uniform(0, 3, (2, 2))
        a, b = rng.uniform(0.1, 0.9, 2)
        lp = _lp_vertex_cost(c, a, b)
        short = (ipot_solve(c, [a, 1 - a], [b, 1 - b], iters=50).plan * c).sum()
        long = (ipot_solve(c, [a, 1 - a], [b, 1 - b], iters=400).plan * c).sum()
        assert short >= lp - 1e-9 and long <= short + 1e-9 and long - lp <= 1e-3


def test_ipot_marginals_hundred_instances():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n, m = rng.integers(1, 17, 2)
        mu, nu = rng.random(n) + 1e-3, rng.random(m) + 1e-3
        plan = ipot_solve(rng.uniform(0, 40, (n, m)), mu / mu.sum(), nu / nu.sum(), iters=50)
        assert plan.marginal_error() <= 1e-4
        assert np.all(plan.plan >= 0)
        np.testing.assert_allclose(plan.row_normalized.sum(axis=1), 1.0, atol=1e-6)


def test_ipot_point_masses_and_rejection():
    np.testing.assert_allclose(ipot_solve(np.array([[3.0]]), [1.0], [1.0]).plan, [[1.0]])
    with pytest.raises(ValueError):
        ipot_solve(np.zeros((2, 2)), [0.6, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        ipot_solve(-np.ones((2, 2)), [0.5, 0.5], [0.5, 0.5])


def test_ot_fusion_rows_stochastic():
    rng = np.random.default_rng(3)
    fuse = OptimalTransportFusion(nn.ParamStore(0, dtype=np.float64), "f", ATT, GRID, 6)
    fuse(bev_set(5, rng), bev_set(7, rng), lidar_scores=rng.random(5), camera_scores=rng.random(7))
    np.testing.assert_allclose(fuse.last_plan.row_normalized.sum(axis=1), 1.0, atol=1e-6)


def _zero_pos(store, prefix):
    for name, p in store.items():
        if name.startswith(prefix):
            p.data[:] = 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_self_attention_camera_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    store = nn.ParamStore(0, dtype=np.float64)
    fuse = SelfAttentionFusion(store, "f", ATT, GRID, 6)
    _zero_pos(store, "f.pos")
    ql, qc = bev_set(4, rng), bev_set(5, rng)
    perm = rng.permutation(5)
    qp = QuerySet(nn.Tensor(qc.features.data[perm]), qc.ref_points[perm], qc.categories[perm], "bev")
    a = fuse(ql, qc)[1]["cls"].data
    b = fuse(ql, qp)[1]["cls"].data
    np.testing.assert_allclose(b[:4], a[:4], atol=1e-10)
    np.testing.assert_allclose(b[4:], a[4:][perm], atol=1e-10)
    w = fuse.attention_weights()
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)


def test_mlp_row_independence():
    rng = np.random.default_rng(4)
    fuse = MLPFusion(nn.ParamStore(0, dtype=np.float64), "f", ATT, GRID, 6)
    ql, qc = bev_set(3, rng), bev_set(4, rng)
    a = fuse(ql, qc)[1]["cls"].data
    qc.features.data[2] += 1.0
    b = fuse(ql, qc)[1]["cls"].data
    changed = np.nonzero(np.any(a != b, axis=1))[0]
    assert list(changed) == [3 + 2]


def test_cross_attention_single_camera_candidate():
    rng = np.random.default_rng(5)
    fuse = CrossAttentionFusion(nn.ParamStore(0, dtype=np.float64), "f", ATT, GRID, 6)
    q, _ = fuse(bev_set(4, rng), bev_set(1, rng))
    assert len(q) == 4
    np.testing.assert_allclose(fuse.attn.attn.last_weights, np.ones((2, 4, 1)))


def _cams():
    return [level_camera(0, 0.0, (0, 0, 0), 32.0, (64, 40)), level_camera(1, np.pi, (0, 0, 0), 32.0, (64, 40))]


def _perspective(n, rng):
    out = {"cls": rng.normal(size=(n, 6)), "offset": rng.normal(size=(n, 2)),
           "height": rng.uniform(0.5, 2.0, (n, 1)), "log_size": rng.normal(size=(n, 3)) * 0.3,
           "rot": rng.normal(size=(n, 2)), "vel": rng.normal(size=(n, 2)) * 0.1}
    from sparsefuse.detector import perspective_pred_vector, scores_of
    out = {k: nn.Tensor(v) for k, v in out.items()}
    ref = rng.uniform(0, 1, (n, 2))
    views = rng.integers(0, 2, n)
    vec = perspective_pred_vector(out, ref, views, _cams()).data
    s, c = scores_of(out)
    q = QuerySet(nn.Tensor(rng.normal(size=(n, 8))), ref, c, "perspective", view_ids=views)
    return q, decode_perspective(vec, s, c, views, _cams())


def test_view_transform_contract_and_geometry_path():
    rng = np.random.default_rng(6)
    q, decoded = _perspective(6, rng)
    vt = ViewTransform(nn.ParamStore(0, dtype=np.float64), "t", ATT, GRID)
    out = vt(q, decoded, _cams())
    assert out.features.shape == (6, 8) and out.space == "bev"
    # oracle: invert p_cam = R p + t per box
    for i in range(6):
        cam = _cams()[decoded.view_ids[i]]
        expect = cam.rotation.T @ (decoded.centers[i] - cam.translation)
        np.testing.assert_allclose(vt.last_boxes.centers[i], expect, atol=1e-9)
    np.testing.assert_array_equal(out.ref_points, np.clip(vt.last_boxes.centers[:, :2], -24, 24 - 1e-6))


def test_same_box_two_views_same_lidar_centre():
    point = np.array([6.0, 5.0, -0.5])
    cams = [level_camera(0, 0.3, (0, 0, 0), 32.0, (64, 40)), level_camera(1, 1.2, (0.5, -0.2, 0.1), 32.0, (64, 40))]
    got = [boxes_cam_to_lidar((c.rotation @ point + c.translation)[None], [0.0], np.zeros((1, 2)), c)[0][0]
           for c in cams]
    np.testing.assert_allclose(got[0], got[1], atol=1e-12)
    np.testing.assert_allclose(got[0], point, atol=1e-12)


def test_sequential_modes_share_positions():
    rng = np.random.default_rng(7)
    centers = np.column_stack([rng.uniform(-20, 20, (6, 2)), np.zeros(6)])
    va, ra = SequentialCameraStage.assign_views(centers, _cams())
    vb, rb = SequentialCameraStage.assign_views(centers, _cams())
    np.testing.assert_array_equal(va, vb)
    np.testing.assert_array_equal(ra, rb)
    pyr = [nn.Tensor(rng.normal(size=(2, 8, 4, 6))), nn.Tensor(rng.normal(size=(2, 8, 2, 3)))]
    for mode in ("inherit_feat", "reinit_feat"):
        seq = SequentialCameraStage(nn.ParamStore(0, dtype=np.float64), f"s.{mode}", ATT, GRID, 6, mode)
        ql = QuerySet(nn.Tensor(rng.normal(size=(6, 8))), centers[:, :2], np.zeros(6, int), "bev")
        q, out = seq(ql, centers, pyr, _cams())
        assert len(q) == 6
        np.testing.assert_array_equal(q.ref_points, ql.ref_points)
    with pytest.raises(ValueError):
        SequentialCameraStage(nn.ParamStore(0), "s", ATT, GRID, 6, "other")


def test_strategy_changes_only_its_own_group():
    base = RunConfig().replace(model={"dim": 8, "heads": 2})
    names = {}
    for strategy in FUSION_CLASSES:
        m = SparseFusionModel(base.replace(model={"strategy": strategy}), nn.ParamStore(0))
        names[strategy] = set(m.store.params)
    shared = [{n for n in s if not n.startswith("fusion.")} for s in names.values()]
    assert all(s == shared[0] for s in shared)
    for strategy, s in names.items():
        assert all(n.split(".")[1] == strategy for n in s if n.startswith("fusion."))
    # shared parameters initialise identically whatever the strategy
    a = SparseFusionModel(base.replace(model={"strategy": "mlp"}), nn.ParamStore(0))
    b = SparseFusionModel(base.replace(model={"strategy": "optimal_transport"}), nn.ParamStore(0))
    for n in shared[0]:
        assert a.store[n].data.tobytes() == b.store[n].data.tobytes()


def test_attention_rows():
    w = np.array([[0.7, 0.2, 0.1], [0.3, 0.3, 0.4], [0.1, 0.1, 0.8]])
    rows = attention_rows(9, w, np.array([0.5, 0.1, 0.9]), 2, 0.3)
    assert len(rows) == 6
    assert rows[0] == (9, 0, 0, "lidar", 0.7)
    assert rows[2] == (9, 0, 2, "camera", pytest.approx(0.1))
    assert {r[1] for r in rows} == {0, 2}


def test_fusion_golden_determinism():
    rng = np.random.default_rng(8)
    ql, qc = bev_set(4, rng), bev_set(4, rng)
    outs = []
    for _ in range(2):
        fuse = SelfAttentionFusion(nn.ParamStore(3, dtype=np.float64), "f", ATT, GRID, 6)
        outs.append(fuse(ql, qc)[1]["cls"].data.tobytes())
    assert outs[0] == outs[1]


def test_lp_oracle_self_check():
    # the vertex oracle agrees with exhaustive search over a fine grid of feasible t
    c = np.array([[1.0, 2.0], [0.5, 3.0]])
    a, b = 0.3, 0.6
    ts = np.linspace(max(0, a + b - 1), min(a, b), 1001)
    grid_best = min(float((np.array([[t, a - t], [b - t, 1 - a - b + t]]) * c).sum()) for t in ts)
    assert abs(grid_best - _lp_vertex_cost(c, a, b)) <= 1e-12
    assert list(itertools.permutations(range(2)))
