"""Camera models, projections and 3D box re-parameterisation.

Frames:
    LiDAR   +X forward, +Y left, +Z up.
    camera  +X right, +Y down, +Z forward; ``p_cam = R @ p_lidar + t``.

Box transforms assume level cameras (camera +Y parallel to LiDAR -Z), the
only case in which an upright LiDAR box stays upright in the camera frame.
Point transforms accept any rigid pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

DEPTH_EPS = 1e-6

# cam_x = -lid_y, cam_y = -lid_z, cam_z = lid_x
LIDAR_TO_CAM_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def normalize_yaw(yaw):
    """Wrap angles to (-pi, pi]."""
    y0 = np.asarray(yaw, dtype=np.float64)
    y = np.mod(y0 + np.pi, 2 * np.pi) - np.pi
    y = np.where(y <= -np.pi, y + 2 * np.pi, y)
    # in-range values pass through bit-exactly
    y = np.where((y0 > -np.pi) & (y0 <= np.pi), y0, y)
    return float(y) if np.ndim(y) == 0 else y


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class CameraModel:
    view_id: int
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple  # (width, height)

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        k = self.intrinsics
        if abs(k[1, 0]) > 0 or abs(k[2, 0]) > 0 or abs(k[2, 1]) > 0 or k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("intrinsics must be upper-triangular with positive focal lengths")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def width(self):
        return self.image_size[0]

    @property
    def height(self):
        return self.image_size[1]

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_lidar(self, points):
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def flat_params(self):
        """21-vector: rotation (9), translation (3), intrinsics (9)."""
        return np.concatenate([self.rotation.ravel(), self.translation, self.intrinsics.ravel()])

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (self.view_id == other.view_id and self.image_size == other.image_size
                and np.array_equal(self.intrinsics, other.intrinsics)
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))


def make_intrinsics(focal, cx, cy):
    return np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])


def level_camera(view_id, yaw, position, focal, image_size):
    """Camera looking along LiDAR heading ``yaw`` from ``position`` (LiDAR frame)."""
    rot = LIDAR_TO_CAM_AXES @ rot_z(yaw).T
    t = -rot @ np.asarray(position, dtype=np.float64)
    w, h = image_size
    return CameraModel(view_id, make_intrinsics(focal, w / 2.0, h / 2.0), rot, t, image_size)


class Projection(NamedTuple):
    u: float
    v: float
    depth: float


def project_lidar_to_image(p, cam: CameraModel) -> Optional[Projection]:
    """Pixel position and depth of a LiDAR point, or None behind the camera."""
    pc = cam.to_camera(np.asarray(p, dtype=np.float64).reshape(3))
    if not np.all(np.isfinite(pc)):
        raise ValueError("non-finite point")
    if pc[2] <= DEPTH_EPS:
        return None
    uvw = cam.intrinsics @ pc
    return Projection(float(uvw[0] / pc[2]), float(uvw[1] / pc[2]), float(pc[2]))


def project_points(points, cam: CameraModel):
    """Vectorised projection: returns (uv (N, 2), depth (N,), in_front (N,) bool).

    ``uv`` is NaN where the point is behind the camera.
    """
    pc = cam.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    depth = pc[:, 2]
    ok = depth > DEPTH_EPS
    uvw = pc @ cam.intrinsics.T
    uv = np.full((len(pc), 2), np.nan)
    uv[ok] = uvw[ok, :2] / depth[ok, None]
    return uv, depth, ok


def backproject(uv, depth, cam: CameraModel):
    """Camera-frame points from pixels and depths."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    rays = np.concatenate([uv, np.ones((len(uv), 1))], axis=1) @ np.linalg.inv(cam.intrinsics).T
    return rays * d[:, None]


@dataclass
class Box3DLidar:
    center: np.ndarray
    size: np.ndarray
    yaw: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(2)
        if np.any(self.size <= 0):
            raise ValueError(f"box size must be positive, got {self.size}")
        self.yaw = normalize_yaw(float(self.yaw))


@dataclass
class Box3DCam:
    center: np.ndarray
    size: np.ndarray
    yaw: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(2)
        if np.any(self.size <= 0):
            raise ValueError(f"box size must be positive, got {self.size}")
        self.yaw = normalize_yaw(float(self.yaw))


def boxes_lidar_to_cam(centers, yaws, velocities, cam: CameraModel):
    """Array form: LiDAR centres (N, 3), yaws (N,), velocities (N, 2) -> camera frame."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    yaws = np.asarray(yaws, dtype=np.float64).reshape(-1)
    vel = np.asarray(velocities, dtype=np.float64).reshape(-1, 2)
    r = cam.rotation
    c_cam = centers @ r.T + cam.translation
    head = np.stack([np.cos(yaws), np.sin(yaws), np.zeros_like(yaws)], axis=1) @ r.T
    yaw_cam = normalize_yaw(np.arctan2(-head[:, 2], head[:, 0]))
    v3 = np.concatenate([vel, np.zeros((len(vel), 1))], axis=1) @ r.T
    return c_cam, np.atleast_1d(yaw_cam), v3[:, [0, 2]]


def boxes_cam_to_lidar(centers, yaws, velocities, cam: CameraModel):
    """Array form inverse of :func:`boxes_lidar_to_cam`."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    yaws = np.asarray(yaws, dtype=np.float64).reshape(-1)
    vel = np.asarray(velocities, dtype=np.float64).reshape(-1, 2)
    r = cam.rotation
    c_lid = (centers - cam.translation) @ r
    head_c = np.stack([np.cos(yaws), np.zeros_like(yaws), -np.sin(yaws)], axis=1)
    head = head_c @ r
    yaw_l = normalize_yaw(np.arctan2(head[:, 1], head[:, 0]))
    v3 = np.stack([vel[:, 0], np.zeros(len(vel)), vel[:, 1]], axis=1) @ r
    return c_lid, np.atleast_1d(yaw_l), v3[:, :2]


def box_lidar_to_cam(b: Box3DLidar, cam: CameraModel) -> Box3DCam:
    c, y, v = boxes_lidar_to_cam(b.center[None], [b.yaw], b.velocity[None], cam)
    return Box3DCam(c[0], b.size.copy(), float(y[0]), v[0])


def box_cam_to_lidar(b: Box3DCam, cam: CameraModel) -> Box3DLidar:
    c, y, v = boxes_cam_to_lidar(b.center[None], [b.yaw], b.velocity[None], cam)
    return Box3DLidar(c[0], b.size.copy(), float(y[0]), v[0])


def box_corners_lidar(b: Box3DLidar):
    """8 corners (8, 3); order: bottom face then top face, counter-clockwise from front-left."""
    l, w, h = b.size
    xs = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * l / 2
    ys = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * w / 2
    zs = np.array([-1, -1, -1, -1, 1, 1, 1, 1]) * h / 2
    local = np.stack([xs, ys, zs], axis=1)
    return local @ rot_z(b.yaw).T + b.center


@dataclass(frozen=True)
class BevGrid:
    x_range: tuple = (-24.0, 24.0)
    y_range: tuple = (-24.0, 24.0)
    resolution: float = 1.5

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range):
            n = (hi - lo) / self.resolution
            if hi <= lo or abs(n - round(n)) > 1e-9:
                raise ValueError(f"range ({lo}, {hi}) is not a whole number of {self.resolution} m cells")

    @property
    def width(self):
        return int(round((self.x_range[1] - self.x_range[0]) / self.resolution))

    @property
    def height(self):
        return int(round((self.y_range[1] - self.y_range[0]) / self.resolution))

    def contains(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        return ((xy[..., 0] >= self.x_range[0]) & (xy[..., 0] < self.x_range[1])
                & (xy[..., 1] >= self.y_range[0]) & (xy[..., 1] < self.y_range[1]))

    def cells(self, xy):
        """Vectorised (col, row) indices and an in-range mask."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        col = np.floor((xy[:, 0] - self.x_range[0]) / self.resolution).astype(np.int64)
        row = np.floor((xy[:, 1] - self.y_range[0]) / self.resolution).astype(np.int64)
        ok = (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
        return col, row, ok

    def cell_centers(self):
        """Centres in metres of all cells in row-major (row, col) order, shape (H*W, 2)."""
        xs = self.x_range[0] + (np.arange(self.width) + 0.5) * self.resolution
        ys = self.y_range[0] + (np.arange(self.height) + 0.5) * self.resolution
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    def normalize(self, xy):
        """Metres -> [0, 1] over the grid extent."""
        xy = np.asarray(xy, dtype=np.float64)
        lo = np.array([self.x_range[0], self.y_range[0]])
        span = np.array([self.x_range[1] - self.x_range[0], self.y_range[1] - self.y_range[0]])
        return (xy - lo) / span


def bev_cell_of(xy, grid: BevGrid):
    """(col, row) of the cell containing ``xy``, or None outside the grid."""
    col, row, ok = grid.cells(np.asarray(xy, dtype=np.float64).reshape(1, 2))
    if not ok[0]:
        return None
    return int(col[0]), int(row[0])
