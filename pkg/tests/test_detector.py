import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsefuse import nncore as nn
from sparsefuse.detector import (DEPTH_UNIT, PIXEL_UNIT, CameraDecoder, LidarDecoder, PredictionHead, QuerySet,
                                 assign_level, camera_targets, decode_lidar, decode_perspective,
                                 flatten_camera_scores, gaussian_sigma, init_queries_camera, init_queries_lidar,
                                 lidar_box_vectors, lidar_pred_vector, perspective_pred_vector, scores_of,
                                 splat_gaussian, splat_gt_heatmap, top_n)
from sparsefuse.geometry import BevGrid, Box3DLidar, backproject, level_camera
from sparsefuse.scenegen import ObjectSpec, generate_scene

GRID = BevGrid()
ATT = nn.AttentionConfig(dim=8, heads=2, points=2, levels=2)


def obj(k, x, y, size=(4.0, 2.0, 1.5), yaw=0.0):
    return ObjectSpec(k, Box3DLidar([x, y, 0.0], size, yaw), np.zeros(6))


def test_centre_value_exactly_one():
    heat = splat_gt_heatmap([obj(1, 0.2, 0.3), obj(1, 10.0, -7.0), obj(4, -3.0, 5.0)], GRID, 6)
    for o in ([0.2, 0.3], [10.0, -7.0]):
        col, row, _ = GRID.cells(np.array([o]))
        assert heat[1, row[0], col[0]] == 1.0
    assert heat.max() == 1.0 and heat.min() >= 0.0


def test_kernel_value_at_two_cells():
    heat = splat_gaussian(np.zeros((9, 9)), 4, 4, 2.0)
    assert abs(heat[4, 6] - 0.6065) <= 1e-4
    assert abs(heat[4, 6] - math.exp(-0.5)) <= 1e-12


def test_max_rule():
    heat = np.zeros((1, 7))
    heat[0, 3] = 0.5
    a = np.maximum(heat, 0.8)
    heat2 = np.full((1, 7), 0.8)
    np.maximum(heat2, heat, out=heat2)
    assert heat2[0, 3] == 0.8
    # overlapping same-category splats keep the larger contribution per cell
    h = np.zeros((5, 5))
    splat_gaussian(h, 1, 2, 1.0)
    before = h.copy()
    splat_gaussian(h, 3, 2, 1.0)
    other = splat_gaussian(np.zeros((5, 5)), 3, 2, 1.0)
    np.testing.assert_array_equal(h, np.maximum(before, other))
    assert a[0, 3] == 0.8


def test_sigma_rule():
    assert gaussian_sigma(4.5, 1.9, 1.5) == 1.0
    assert gaussian_sigma(12.0, 2.0, 1.0) == 2.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_heatmap_monotone_along_rays(seed):
    rng = np.random.default_rng(seed)
    heat = splat_gaussian(np.zeros((15, 15)), 7, 7, rng.uniform(1, 4))
    d = [(1, 0), (0, 1), (1, 1), (-1, 1), (-1, 0), (0, -1), (-1, -1), (1, -1)]
    dx, dy = d[int(rng.integers(8))]
    vals = [heat[7 + i * dy, 7 + i * dx] for i in range(8)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_level_assignment_threshold_arithmetic():
    # 10 px against (0, 4, 8, 16): fourth band by 1-based count, index 2 here
    assert assign_level(10.0, (0.0, 4.0, 8.0, 16.0)) == 2
    assert assign_level(3.9, (0.0, 4.0, 8.0, 16.0)) == 0
    assert assign_level(100.0, (0.0, 4.0, 8.0, 16.0)) == 3


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40))
def test_top_n_equals_sort_oracle(seed, n):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 20, 64).astype(float)  # many ties
    idx = top_n(s, n)
    oracle = sorted(range(64), key=lambda i: (-s[i], i))[:n]
    assert list(idx) == oracle


def test_top_n_rejects_too_many():
    with pytest.raises(ValueError):
        top_n(np.zeros(5), 6)


def _bev(store_seed=0, c=8):
    rng = np.random.default_rng(store_seed)
    return nn.Tensor(rng.normal(size=(1, c, GRID.height, GRID.width)))


def test_init_lidar_hot_cells_and_ties():
    store = nn.ParamStore(0, dtype=np.float64)
    embed = store.get_or_create("e", (3, 8), "normal")
    probs = np.zeros((3, GRID.height, GRID.width))
    hot = [5, 100, 640, 1000]
    for j, cell in enumerate(hot):
        probs[j % 3].reshape(-1)[cell] = 1.0
    q = init_queries_lidar(probs, _bev(), embed, GRID, 4)
    assert sorted(np.ravel_multi_index(GRID.cells(q.ref_points)[1::-1], (GRID.height, GRID.width))) == hot
    uniform = np.full((3, GRID.height, GRID.width), 0.3)
    q = init_queries_lidar(uniform, _bev(), embed, GRID, 5)
    np.testing.assert_allclose(q.ref_points, GRID.cell_centers()[:5])
    with pytest.raises(ValueError):
        init_queries_lidar(uniform, _bev(), embed, GRID, GRID.width * GRID.height + 1)


def test_init_lidar_feature_is_bev_plus_embedding():
    store = nn.ParamStore(0, dtype=np.float64)
    embed = store.get_or_create("e", (3, 8), "normal")
    probs = np.zeros((3, GRID.height, GRID.width))
    probs[2, 4, 9] = 0.9
    bev = _bev()
    q = init_queries_lidar(probs, bev, embed, GRID, 1)
    np.testing.assert_allclose(q.features.data[0], bev.data[0, :, 4, 9] + embed.data[2])
    assert q.categories[0] == 2


def test_init_camera_single_hot_cell():
    store = nn.ParamStore(0, dtype=np.float64)
    embed = store.get_or_create("e", (3, 8), "normal")
    rng = np.random.default_rng(1)
    pyr = [nn.Tensor(rng.normal(size=(2, 8, 4, 6))), nn.Tensor(rng.normal(size=(2, 8, 2, 3)))]
    probs = [np.zeros((2, 3, 4, 6)), np.zeros((2, 3, 2, 3))]
    probs[1][1, 2, 1, 2] = 0.7
    q = init_queries_camera(probs, pyr, embed, 1)
    assert (q.view_ids[0], q.levels[0], q.categories[0]) == (1, 1, 2)
    np.testing.assert_allclose(q.ref_points[0], [(2 + 0.5) / 3, (1 + 0.5) / 2])
    np.testing.assert_allclose(q.features.data[0], pyr[1].data[1, :, 1, 2] + embed.data[2])


def test_init_camera_joint_top_n_oracle():
    rng = np.random.default_rng(2)
    probs = [rng.random((2, 3, 4, 6)), rng.random((2, 3, 2, 3))]
    scores, table = flatten_camera_scores(probs, nms_kernel=1)
    rows = []
    for v in range(2):
        for lvl in range(2):
            m = probs[lvl][v].max(axis=0)
            for r in range(m.shape[0]):
                for c in range(m.shape[1]):
                    rows.append((m[r, c], v, lvl, r, c))
    oracle = sorted(range(len(rows)), key=lambda i: (-rows[i][0], i))[:7]
    got = top_n(scores, 7)
    assert [tuple(table[i]) for i in got] == [rows[i][1:] for i in oracle]


def test_decoders_preserve_n_and_refs():
    store = nn.ParamStore(0, dtype=np.float64)
    rng = np.random.default_rng(3)
    dec = LidarDecoder(store, "l", ATT, GRID)
    q = QuerySet(nn.Tensor(rng.normal(size=(5, 8))), rng.uniform(-20, 20, (5, 2)), np.zeros(5, int), "bev")
    out = dec(q, _bev())
    assert out.features.shape == (5, 8)
    assert out.ref_points is q.ref_points
    cam = CameraDecoder(store, "c", ATT, 2)
    pyr = [nn.Tensor(rng.normal(size=(2, 8, 4, 6))), nn.Tensor(rng.normal(size=(2, 8, 2, 3)))]
    qc = QuerySet(nn.Tensor(rng.normal(size=(4, 8))), rng.uniform(0, 1, (4, 2)), np.zeros(4, int),
                  "perspective", view_ids=np.array([1, 0, 1, 0]))
    out = cam(qc, pyr)
    assert out.features.shape == (4, 8)
    np.testing.assert_array_equal(out.ref_points, qc.ref_points)
    one = QuerySet(nn.Tensor(rng.normal(size=(1, 8))), np.array([[0.5, 0.5]]), np.zeros(1, int),
                   "perspective", view_ids=np.array([0]))
    assert cam(one, pyr).features.shape == (1, 8)


def test_decoder_golden_determinism():
    store = nn.ParamStore(11, dtype=np.float64)
    rng = np.random.default_rng(4)
    dec = LidarDecoder(store, "l", ATT, GRID)
    q = QuerySet(nn.Tensor(rng.normal(size=(3, 8))), rng.uniform(-20, 20, (3, 2)), np.zeros(3, int), "bev")
    bev = _bev(5)
    a = dec(q, bev).features.data
    b = dec(q, bev).features.data
    assert a.tobytes() == b.tobytes()


def _head_out(n, rng, **fixed):
    out = {"cls": rng.normal(size=(n, 3)), "offset": rng.normal(size=(n, 2)), "height": rng.normal(size=(n, 1)),
           "log_size": rng.normal(size=(n, 3)), "rot": rng.normal(size=(n, 2)), "vel": rng.normal(size=(n, 2))}
    out.update(fixed)
    return {k: nn.Tensor(v) for k, v in out.items()}


def test_perspective_decode_principal_point():
    cam = level_camera(0, 0.0, (0, 0, 0), 32.0, (64, 40))
    rng = np.random.default_rng(5)
    out = _head_out(1, rng, offset=np.zeros((1, 2)), height=np.array([[0.7]]), log_size=np.zeros((1, 3)))
    ref = np.array([[0.5, 0.5]])
    vec = perspective_pred_vector(out, ref, np.array([0]), [cam]).data
    s, c = scores_of(out)
    boxes = decode_perspective(vec, s, c, np.array([0]), [cam])
    np.testing.assert_allclose(boxes.centers[0], [0, 0, 0.7 * DEPTH_UNIT], atol=1e-12)
    np.testing.assert_allclose(boxes.sizes[0], [1, 1, 1])


def test_perspective_decode_oracle_and_clamp():
    cams = [level_camera(0, 0.0, (0, 0, 0), 32.0, (64, 40)), level_camera(1, np.pi, (0, 0, 0), 32.0, (64, 40))]
    rng = np.random.default_rng(6)
    n = 20
    out = _head_out(n, rng)
    out["height"].data[0, 0] = -1.0
    ref = rng.uniform(0, 1, (n, 2))
    views = rng.integers(0, 2, n)
    vec = perspective_pred_vector(out, ref, views, cams).data
    s, c = scores_of(out)
    boxes = decode_perspective(vec, s, c, views, cams)
    for i in range(n):
        u = ref[i, 0] * 64 + out["offset"].data[i, 0] * PIXEL_UNIT
        v = ref[i, 1] * 40 + out["offset"].data[i, 1] * PIXEL_UNIT
        d = out["height"].data[i, 0] * DEPTH_UNIT
        if d <= 0:
            assert boxes.clamped[i]
            d = 1e-3
        k = cams[views[i]].intrinsics
        exp = np.array([(u - k[0, 2]) / k[0, 0] * d, (v - k[1, 2]) / k[1, 1] * d, d])
        np.testing.assert_allclose(boxes.centers[i], exp, atol=1e-9)
        yaw = math.atan2(out["rot"].data[i, 0], out["rot"].data[i, 1])
        assert abs(boxes.yaws[i] - yaw) <= 1e-12
    np.testing.assert_allclose(boxes.sizes, np.exp(out["log_size"].data))
    p = 1 / (1 + np.exp(-out["cls"].data))
    np.testing.assert_allclose(boxes.scores, p.max(axis=1))


def test_lidar_decode_zero_offset_and_oracle():
    rng = np.random.default_rng(7)
    n = 10
    out = _head_out(n, rng)
    out["offset"].data[0] = 0
    out["log_size"].data[0] = 0
    ref = rng.uniform(-20, 20, (n, 2))
    vec = lidar_pred_vector(out, ref, GRID).data
    s, c = scores_of(out)
    b = decode_lidar(vec, s, c, GRID)
    np.testing.assert_allclose(b.centers[0, :2], ref[0], atol=1e-12)
    np.testing.assert_allclose(b.sizes[0], [1, 1, 1])
    np.testing.assert_allclose(b.centers[:, :2], ref + out["offset"].data * GRID.resolution, atol=1e-12)
    np.testing.assert_allclose(b.centers[:, 2], out["height"].data[:, 0])
    np.testing.assert_allclose(b.velocities, out["vel"].data)


@settings(max_examples=100, deadline=None)
@given(st.floats(-math.pi + 1e-6, math.pi - 1e-6))
def test_yaw_round_trip(yaw):
    o = ObjectSpec(0, Box3DLidar([1.0, 2.0, 0.0], [1, 1, 1], yaw), np.zeros(2))
    vec = lidar_box_vectors([o], GRID)
    b = decode_lidar(vec, np.ones(1), np.zeros(1, int), GRID)
    assert abs(b.yaws[0] - yaw) <= 1e-6


def test_camera_targets_match_projection():
    scene = generate_scene(2)
    for cam in scene.cameras:
        for t in camera_targets(scene.objects, cam, (0.0, 3.84, 7.68, 15.36)):
            o = scene.objects[t.obj_index]
            pc = cam.to_camera(o.box.center[None])[0]
            assert abs(t.box_vector[2] * DEPTH_UNIT - pc[2]) <= 1e-9
            back = backproject(t.box_vector[None, :2] * PIXEL_UNIT, [pc[2]], cam)[0]
            np.testing.assert_allclose(back, pc, atol=1e-9)


def test_head_shapes():
    store = nn.ParamStore(0, dtype=np.float64)
    head = PredictionHead(store, "h", 8, 6)
    out = head(nn.Tensor(np.zeros((3, 8))))
    assert {k: v.shape for k, v in out.items()} == {"cls": (3, 6), "offset": (3, 2), "height": (3, 1),
                                                    "log_size": (3, 3), "rot": (3, 2), "vel": (3, 2)}
