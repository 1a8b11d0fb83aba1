import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsefuse.geometry import (LIDAR_TO_CAM_AXES, BevGrid, Box3DCam, Box3DLidar, CameraModel, bev_cell_of,
                                 box_cam_to_lidar, box_corners_lidar, box_lidar_to_cam, boxes_cam_to_lidar,
                                 boxes_lidar_to_cam, level_camera, make_intrinsics, normalize_yaw,
                                 project_lidar_to_image, project_points)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng, level=False):
    if level:
        return level_camera(0, rng.uniform(-np.pi, np.pi), rng.uniform(-3, 3, 3), rng.uniform(20, 60), (64, 40))
    k = make_intrinsics(rng.uniform(20, 60), rng.uniform(20, 40), rng.uniform(10, 30))
    return CameraModel(0, k, random_rotation(rng), rng.uniform(-3, 3, 3), (64, 40))


def homogeneous(cam):
    m = np.eye(4)
    m[:3, :3] = cam.rotation
    m[:3, 3] = cam.translation
    return m


def corner_refit(box, cam):
    """Camera-frame centre/size/yaw recovered from transformed corners."""
    corners = box_corners_lidar(box)
    hom = np.concatenate([corners, np.ones((8, 1))], axis=1) @ homogeneous(cam).T
    c = hom[:, :3]
    center = c.mean(axis=0)
    l = np.linalg.norm(c[0] - c[1])
    w = np.linalg.norm(c[1] - c[2])
    h = np.linalg.norm(c[0] - c[4])
    front = c[[0, 3, 4, 7]].mean(axis=0) - center
    return center, np.array([l, w, h]), math.atan2(-front[2], front[0])


def angle_diff(a, b):
    return abs((a - b + np.pi) % (2 * np.pi) - np.pi)


def test_optical_axis_projection():
    cam = CameraModel(0, make_intrinsics(32, 32, 20), LIDAR_TO_CAM_AXES, np.zeros(3), (64, 40))
    assert project_lidar_to_image([5.0, 0.0, 0.0], cam) == (32.0, 20.0, 5.0)


def test_behind_camera_marker():
    cam = CameraModel(0, make_intrinsics(32, 32, 20), np.eye(3), np.zeros(3), (64, 40))
    assert project_lidar_to_image([0.0, 0.0, -1.0], cam) is None
    uv, depth, ok = project_points([[0.0, 0.0, -1.0], [0.0, 0.0, 2.0]], cam)
    assert not ok[0] and ok[1] and np.isnan(uv[0]).all()


def test_projection_matches_homogeneous_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        cam = random_camera(rng)
        p = rng.uniform(-20, 20, (50, 3))
        pc = (np.concatenate([p, np.ones((50, 1))], axis=1) @ homogeneous(cam).T)[:, :3]
        uv, depth, ok = project_points(p, cam)
        assert np.array_equal(ok, pc[:, 2] > 1e-6)
        img = pc[ok] @ cam.intrinsics.T
        np.testing.assert_allclose(uv[ok], img[:, :2] / img[:, 2:], atol=1e-6, rtol=1e-9)
        np.testing.assert_allclose(depth, pc[:, 2], atol=1e-9)


def test_projection_depth_is_camera_z():
    rng = np.random.default_rng(1)
    cam = random_camera(rng)
    for p in rng.uniform(-10, 10, (100, 3)):
        proj = project_lidar_to_image(p, cam)
        if proj is not None:
            assert proj.depth == cam.to_camera(p)[2]


def test_axis_permutation_box():
    cam = CameraModel(0, make_intrinsics(32, 32, 20), LIDAR_TO_CAM_AXES, np.zeros(3), (64, 40))
    b = box_cam_to_lidar(Box3DCam([0, 0, 5], [1, 2, 3], 0.0), cam)
    np.testing.assert_allclose(b.center, [5, 0, 0], atol=1e-12)


def test_identity_pose_unit_box():
    cam = CameraModel(0, make_intrinsics(1, 0, 0), np.eye(3), np.zeros(3), (1, 1))
    b = box_lidar_to_cam(Box3DLidar([1, 2, 3], [1, 1, 1], 0.0), cam)
    np.testing.assert_array_equal(b.center, [1, 2, 3])
    np.testing.assert_array_equal(b.size, [1, 1, 1])


def test_point_round_trip_10k_poses():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(10_000):
        cam = random_camera(rng)
        p = rng.uniform(-50, 50, (1, 3)).astype(np.float32)
        worst = max(worst, float(np.abs(cam.to_lidar(cam.to_camera(p)) - p).max()))
    assert worst <= 1e-6


def test_box_corner_refit_oracle():
    rng = np.random.default_rng(3)
    for _ in range(500):
        cam = random_camera(rng, level=True)
        box = Box3DLidar(rng.uniform(-20, 20, 3), rng.uniform(0.3, 6, 3), rng.uniform(-np.pi, np.pi))
        bc = box_lidar_to_cam(box, cam)
        center, size, yaw = corner_refit(box, cam)
        np.testing.assert_allclose(bc.center, center, atol=1e-5)
        np.testing.assert_allclose(bc.size, size, atol=1e-5)
        assert angle_diff(bc.yaw, yaw) <= 1e-5


def test_box_size_bit_exact():
    rng = np.random.default_rng(4)
    cam = random_camera(rng, level=True)
    box = Box3DLidar([1.5, -2.0, 0.3], [4.1, 1.7, 1.3], 0.7)
    assert np.array_equal(box_lidar_to_cam(box, cam).size, box.size)
    assert np.array_equal(box_cam_to_lidar(box_lidar_to_cam(box, cam), cam).size, box.size)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_box_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng, level=True)
    box = Box3DLidar(rng.uniform(-30, 30, 3), rng.uniform(0.2, 8, 3), rng.uniform(-np.pi, np.pi),
                     rng.uniform(-5, 5, 2))
    back = box_cam_to_lidar(box_lidar_to_cam(box, cam), cam)
    np.testing.assert_allclose(back.center, box.center, atol=1e-6)
    np.testing.assert_allclose(back.velocity, box.velocity, atol=1e-6)
    assert angle_diff(back.yaw, box.yaw) <= 1e-6


def test_array_box_round_trip_10k():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        cam = random_camera(rng, level=True)
        c = rng.uniform(-30, 30, (100, 3))
        y = rng.uniform(-np.pi, np.pi, 100)
        v = rng.uniform(-5, 5, (100, 2))
        c2, y2, v2 = boxes_cam_to_lidar(*boxes_lidar_to_cam(c, y, v, cam), cam)
        worst = max(worst, np.abs(c2 - c).max(), np.abs(v2 - v).max(), angle_diff(y2, y).max())
    assert worst <= 1e-6


def test_normalize_yaw_range():
    y = normalize_yaw(np.array([-np.pi, np.pi, 3 * np.pi, -3 * np.pi + 0.1, 0.5]))
    assert np.all(y > -np.pi) and np.all(y <= np.pi)
    assert y[4] == 0.5


def test_bev_cells():
    g = BevGrid()
    assert bev_cell_of((g.x_range[0], g.y_range[0]), g) == (0, 0)
    assert bev_cell_of((0.0, 0.0), g) == (g.width // 2, g.height // 2)
    assert bev_cell_of((g.x_range[1], 0.0), g) is None
    rng = np.random.default_rng(6)
    xy = rng.uniform(-24, 24, (1000, 2))
    col, row, ok = g.cells(xy)
    assert ok.all()
    np.testing.assert_array_equal(col, [int((x + 24) // 1.5) for x in xy[:, 0]])
    np.testing.assert_array_equal(row, [int((y + 24) // 1.5) for y in xy[:, 1]])


def test_bad_grid_and_camera_rejected():
    with pytest.raises(ValueError):
        BevGrid((-1.0, 1.0), (-1.0, 1.0), 0.7)
    with pytest.raises(ValueError):
        CameraModel(0, make_intrinsics(1, 0, 0), 2 * np.eye(3), np.zeros(3), (1, 1))
    with pytest.raises(ValueError):
        Box3DLidar([0, 0, 0], [1, 0, 1], 0.0)
