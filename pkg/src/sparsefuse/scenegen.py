"""Deterministic synthetic LiDAR + multi-camera scenes and their JSON files.

Each object is an upright box on a flat ground plane.  LiDAR returns are
sampled on the box faces and on the ground, then dropped with a
probability that grows linearly with range, so distant objects receive few
or no points.  Every camera image renders each object as a flat rectangle
in the colour of its category signature, centred on the projection of the
box centre.  Two categories share one shape prior and differ only in
colour, which makes them separable from images but not from points.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    BevGrid,
    Box3DLidar,
    CameraModel,
    box_corners_lidar,
    level_camera,
    project_points,
)

# (length, width, height) in metres; the last two share a shape prior.
CATEGORY_SHAPES = [
    (4.5, 1.9, 1.6),
    (7.0, 2.6, 3.0),
    (0.8, 0.8, 1.8),
    (0.5, 3.0, 1.0),
    (2.0, 0.8, 1.5),
    (2.0, 0.8, 1.5),
]

PALETTE = np.array([
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
])


def category_shape(k):
    return CATEGORY_SHAPES[k % len(CATEGORY_SHAPES)]


def category_palette(num_classes):
    if num_classes <= len(PALETTE):
        return PALETTE[:num_classes]
    rng = np.random.default_rng(1234)
    extra = rng.uniform(0.1, 0.9, size=(num_classes - len(PALETTE), 3))
    return np.concatenate([PALETTE, extra])


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 6
    grid: BevGrid = field(default_factory=BevGrid)
    image_size: tuple = (64, 40)
    camera_yaws: tuple = (0.0, math.pi)
    camera_height: float = 0.0
    focal: float = 32.0
    min_objects: int = 5
    max_objects: int = 8
    min_center_distance: float = 4.0
    edge_margin: float = 1.5
    min_range: float = 3.0
    near_max_range: float = 22.0  # objects not placed as far stay inside this range
    dropout_horizon: float = 25.0
    far_fraction: float = 0.2
    in_view_classes: tuple = (4, 5)  # placed inside a camera's field of view
    face_density: float = 3.0
    ground_density: float = 0.3
    ground_z: float = -1.8
    size_jitter: float = 0.08
    color_noise: float = 0.05

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 categories")
        if not self.camera_yaws:
            raise ValueError("need at least one camera")
        if self.min_center_distance < 1.0:
            raise ValueError("min_center_distance must be at least 1 m")
        if self.near_max_range <= self.min_range:
            raise ValueError("near_max_range must exceed min_range")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("min_objects must be in [0, max_objects]")
        # densest packing bound: discs of diameter min_center_distance in the usable area
        usable = ((self.grid.x_range[1] - self.grid.x_range[0] - 2 * self.edge_margin)
                  * (self.grid.y_range[1] - self.grid.y_range[0] - 2 * self.edge_margin))
        capacity = usable / (self.min_center_distance ** 2) * 0.5
        if self.max_objects > capacity:
            raise ValueError(f"grid cannot fit {self.max_objects} objects "
                             f"{self.min_center_distance} m apart (capacity ~{int(capacity)})")


@dataclass
class ObjectSpec:
    category: int
    box: Box3DLidar
    color_signature: np.ndarray

    def __eq__(self, other):
        return (self.category == other.category
                and np.array_equal(self.box.center, other.box.center)
                and np.array_equal(self.box.size, other.box.size)
                and self.box.yaw == other.box.yaw
                and np.array_equal(self.box.velocity, other.box.velocity)
                and np.array_equal(self.color_signature, other.color_signature))


@dataclass
class SceneSample:
    scene_id: int
    points: np.ndarray            # (N, 4) float32: x, y, z, intensity
    cameras: list                 # CameraModel per view
    images: list                  # (H, W, 3) float32 raster per view
    objects: list                 # ObjectSpec

    def __eq__(self, other):
        return (self.scene_id == other.scene_id
                and np.array_equal(self.points, other.points)
                and len(self.cameras) == len(other.cameras)
                and all(a == b for a, b in zip(self.cameras, other.cameras))
                and all(np.array_equal(a, b) for a, b in zip(self.images, other.images))
                and len(self.objects) == len(other.objects)
                and all(a == b for a, b in zip(self.objects, other.objects)))


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    val: tuple
    seed: int

    def __post_init__(self):
        if set(self.train) & set(self.val):
            raise ValueError("train and val scene ids overlap")


def make_split(n_train, n_val, seed):
    return DatasetSplit(tuple(range(n_train)), tuple(range(n_train, n_train + n_val)), seed)


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def make_cameras(cfg: GeneratorConfig):
    cams = []
    for v, yaw in enumerate(cfg.camera_yaws):
        cam = level_camera(v, yaw, (0.0, 0.0, cfg.camera_height), cfg.focal, cfg.image_size)
        cams.append(CameraModel(v, _f32(cam.intrinsics), _f32(cam.rotation), _f32(cam.translation),
                                cam.image_size))
    return cams


def keep_probability(r, horizon):
    """Probability that a return at horizontal range ``r`` survives dropout."""
    return 1.0 - np.minimum(1.0, np.asarray(r) / horizon)


def face_samples(box: Box3DLidar, density, rng):
    """Uniform samples on the six faces; the count per face is fixed by its area."""
    l, w, h = box.size
    faces = [  # (axis fixed, sign, extents of the two free axes)
        (0, 1, (w, h)), (0, -1, (w, h)),
        (1, 1, (l, h)), (1, -1, (l, h)),
        (2, 1, (l, w)), (2, -1, (l, w)),
    ]
    half = np.array([l, w, h]) / 2
    out = []
    for axis, sign, (a, b) in faces:
        n = int(round(density * a * b))
        if n == 0:
            continue
        local = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
        local[:, axis] = sign * half[axis]
        out.append(local)
    if not out:
        return np.zeros((0, 3))
    local = np.concatenate(out)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def render_rectangles(objects, cam: CameraModel):
    """Per object: (u_center, v_center, half_w, half_h, depth) or None if not rendered.

    The rectangle is centred on the projected box centre and spans the
    projected corners' extent.
    """
    rects = []
    for obj in objects:
        corners = box_corners_lidar(obj.box)
        uv, depth, ok = project_points(np.vstack([obj.box.center[None], corners]), cam)
        if not ok.all():
            rects.append(None)
            continue
        cu, cv = uv[0]
        hw = np.abs(uv[1:, 0] - cu).max()
        hh = np.abs(uv[1:, 1] - cv).max()
        if cu + hw < 0 or cu - hw > cam.width or cv + hh < 0 or cv - hh > cam.height:
            rects.append(None)
            continue
        rects.append((float(cu), float(cv), float(hw), float(hh), float(depth[0])))
    return rects


def render_image(objects, cam: CameraModel, palette, rng):
    w, h = cam.image_size
    img = 0.5 + rng.normal(0.0, 0.02, size=(h, w, 3))
    rects = render_rectangles(objects, cam)
    order = sorted((r[4], i) for i, r in enumerate(rects) if r is not None)
    for _, i in reversed(order):  # far to near
        cu, cv, hw, hh, _ = rects[i]
        color = np.clip(objects[i].color_signature @ palette, 0.0, 1.0)
        u0 = max(0, int(math.floor(cu - hw + 0.5)))
        u1 = min(w, int(math.floor(cu + hw + 0.5)))
        v0 = max(0, int(math.floor(cv - hh + 0.5)))
        v1 = min(h, int(math.floor(cv + hh + 0.5)))
        # always paint at least the centre pixel when it is on screen
        if u1 <= u0 and 0 <= cu < w:
            u0, u1 = int(cu), int(cu) + 1
        if v1 <= v0 and 0 <= cv < h:
            v0, v1 = int(cv), int(cv) + 1
        img[v0:v1, u0:u1] = color
    return img.astype(np.float32)


def visible_in_camera(center, cam: CameraModel):
    uv, _, ok = project_points(center[None], cam)
    return bool(ok[0] and 0 <= uv[0, 0] < cam.width and 0 <= uv[0, 1] < cam.height)


def _sample_position(cfg, cams, rng, far, in_view):
    g = cfg.grid
    lo = np.array([g.x_range[0], g.y_range[0]]) + cfg.edge_margin
    hi = np.array([g.x_range[1], g.y_range[1]]) - cfg.edge_margin
    if not (far or in_view):
        return rng.uniform(lo, hi)
    cam_yaw = cfg.camera_yaws[int(rng.integers(len(cams)))]
    half_fov = math.atan2(cfg.image_size[0] / 2.0, cfg.focal) * 0.8
    ang = cam_yaw + rng.uniform(-half_fov, half_fov)
    d = np.array([math.cos(ang), math.sin(ang)])
    with np.errstate(divide="ignore"):
        limits = np.where(d > 0, hi / d, np.where(d < 0, lo / d, np.inf))
    r_max = float(limits.min())
    if far:
        if r_max <= cfg.dropout_horizon:
            return None
        return d * rng.uniform(cfg.dropout_horizon, r_max)
    # uniform by area over the visible wedge inside the near range
    r1 = min(r_max, cfg.near_max_range)
    return d * math.sqrt(rng.uniform(cfg.min_range ** 2, r1 ** 2))


def generate_scene(seed, cfg: GeneratorConfig = GeneratorConfig(), scene_id=None):
    """Build one scene; identical (seed, cfg) give identical samples."""
    cfg.validate()
    scene_id = int(seed) if scene_id is None else int(scene_id)
    rng = np.random.default_rng([int(seed), 0x5CE7E])
    cams = make_cameras(cfg)
    palette = category_palette(cfg.num_classes)
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))

    objects, obj_points = [], []
    attempts = 0
    while len(objects) < n_obj:
        attempts += 1
        if attempts > 200 * (n_obj + 1):
            raise RuntimeError("could not place objects; loosen the generator config")
        far = rng.random() < cfg.far_fraction
        k = int(rng.integers(cfg.num_classes))
        xy = _sample_position(cfg, cams, rng, far, k in cfg.in_view_classes)
        if xy is None or not cfg.min_range <= np.hypot(*xy) <= (np.inf if far else cfg.near_max_range):
            continue
        if any(np.hypot(*(xy - o.box.center[:2])) < cfg.min_center_distance for o in objects):
            continue
        base = np.array(category_shape(k))
        size = _f32(base * (1 + rng.uniform(-cfg.size_jitter, cfg.size_jitter, 3)))
        center = _f32([xy[0], xy[1], cfg.ground_z + size[2] / 2])
        yaw = float(_f32(rng.uniform(-math.pi, math.pi)))
        box = Box3DLidar(center, size, yaw, np.zeros(2))
        sig = np.zeros(cfg.num_classes)
        sig[k] = 1.0
        sig = _f32(sig + rng.normal(0.0, cfg.color_noise, cfg.num_classes))
        pts = face_samples(box, cfg.face_density, rng)
        keep = rng.random(len(pts)) < keep_probability(np.hypot(pts[:, 0], pts[:, 1]), cfg.dropout_horizon)
        pts = pts[keep & cfg.grid.contains(pts[:, :2])]
        seen = any(visible_in_camera(center, c) for c in cams)
        if len(pts) == 0 and not seen:
            continue
        objects.append(ObjectSpec(k, box, sig))
        obj_points.append(pts)

    g = cfg.grid
    area = (g.x_range[1] - g.x_range[0]) * (g.y_range[1] - g.y_range[0])
    n_ground = int(round(cfg.ground_density * area))
    gxy = rng.uniform([g.x_range[0], g.y_range[0]], [g.x_range[1], g.y_range[1]], size=(n_ground, 2))
    gkeep = rng.random(n_ground) < keep_probability(np.hypot(gxy[:, 0], gxy[:, 1]), cfg.dropout_horizon)
    gxy = gxy[gkeep]
    ground = np.concatenate([gxy, np.full((len(gxy), 1), cfg.ground_z)], axis=1)

    xyz = np.concatenate(obj_points + [ground]) if obj_points else ground
    n_obj_pts = sum(len(p) for p in obj_points)
    intensity = np.concatenate([rng.uniform(0.3, 0.7, n_obj_pts), rng.uniform(0.0, 0.2, len(ground))])
    points = np.concatenate([xyz, intensity[:, None]], axis=1).astype(np.float32)

    images = [render_image(objects, cam, palette, rng) for cam in cams]
    return SceneSample(scene_id, points, cams, images, objects)


def generate_split(split: DatasetSplit, cfg: GeneratorConfig = GeneratorConfig()):
    """Scenes for a split, keyed by scene id; each seeded from (split seed, id)."""
    out = {}
    for sid in split.train + split.val:
        out[sid] = generate_scene(scene_seed(split.seed, sid), cfg, scene_id=sid)
    return out


def scene_seed(base_seed, scene_id):
    return int(np.random.SeedSequence([int(base_seed), int(scene_id)]).generate_state(1)[0])


# ---------------------------------------------------------------- persistence

FORMAT_TAG = "sparsefuse-scene"
FORMAT_VERSION = 1


class SceneParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _fmt_floats(arr):
    return "[" + ",".join(format(float(x), ".9g") for x in np.asarray(arr).ravel()) + "]"


def _array_json(arr):
    arr = np.asarray(arr)
    return '{"shape":[' + ",".join(str(int(s)) for s in arr.shape) + '],"data":' + _fmt_floats(arr) + "}"


def dumps_scene(s: SceneSample) -> str:
    lines = ["{", f'"format":"{FORMAT_TAG}",', f'"version":{FORMAT_VERSION},', f'"scene_id":{int(s.scene_id)},']
    lines.append(f'"points":{_array_json(s.points)},')
    lines.append('"cameras":[')
    cam_lines = []
    for cam, img in zip(s.cameras, s.images):
        cam_lines.append(
            "{" + f'"view_id":{int(cam.view_id)},'
            f'"image_size":[{cam.image_size[0]},{cam.image_size[1]}],'
            f'"intrinsics":{_fmt_floats(cam.intrinsics)},'
            f'"rotation":{_fmt_floats(cam.rotation)},'
            f'"translation":{_fmt_floats(cam.translation)},'
            f'"image":{_array_json(img)}' + "}")
    lines.append(",\n".join(cam_lines))
    lines.append("],")
    lines.append('"objects":[')
    obj_lines = []
    for o in s.objects:
        b = o.box
        obj_lines.append(
            "{" + f'"category":{int(o.category)},'
            f'"center":{_fmt_floats(b.center)},'
            f'"size":{_fmt_floats(b.size)},'
            f'"yaw":{format(float(b.yaw), ".9g")},'
            f'"velocity":{_fmt_floats(b.velocity)},'
            f'"color_signature":{_fmt_floats(o.color_signature)}' + "}")
    lines.append(",\n".join(obj_lines))
    lines.append("]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _f32_list(values, shape=None):
    arr = np.asarray(values, dtype=np.float32).astype(np.float64)
    return arr if shape is None else arr.reshape(shape)


def _arr(d, key, text, dtype):
    try:
        node = d[key]
        data = np.asarray(node["data"], dtype=np.float64)
        return data.reshape(node["shape"]).astype(dtype)
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneParseError(f"bad array field {key!r}: {exc}", max(text.find(f'"{key}"'), 0)) from None


def loads_scene(text: str) -> SceneSample:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneParseError(exc.msg, exc.pos) from None
    if not isinstance(d, dict) or d.get("format") != FORMAT_TAG:
        raise SceneParseError("not a scene file", 0)
    if d.get("version") != FORMAT_VERSION:
        raise SceneParseError(f"unsupported version {d.get('version')}", max(text.find('"version"'), 0))
    try:
        points = _arr(d, "points", text, np.float32)
        cams, images = [], []
        for c in d["cameras"]:
            cams.append(CameraModel(int(c["view_id"]), _f32_list(c["intrinsics"], (3, 3)),
                                    _f32_list(c["rotation"], (3, 3)), _f32_list(c["translation"]),
                                    tuple(c["image_size"])))
            images.append(_arr(c, "image", text, np.float32))
        objects = []
        for o in d["objects"]:
            box = Box3DLidar(_f32_list(o["center"]), _f32_list(o["size"]), float(_f32_list(o["yaw"])),
                             _f32_list(o["velocity"]))
            objects.append(ObjectSpec(int(o["category"]), box, _f32_list(o["color_signature"])))
        return SceneSample(int(d["scene_id"]), points, cams, images, objects)
    except SceneParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneParseError(f"malformed scene: {exc!r}", 0) from None


def save_scene(path, s: SceneSample):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(dumps_scene(s))


def load_scene(path) -> SceneSample:
    with open(path, "r", encoding="ascii") as fh:
        return loads_scene(fh.read())


def write_dataset(root, split: DatasetSplit, scenes):
    """Write ``root/<split>/<scene_id>.json`` plus ``root/split.json``."""
    for name, ids in (("train", split.train), ("val", split.val)):
        for sid in ids:
            save_scene(os.path.join(root, name, f"{sid}.json"), scenes[sid])
    with open(os.path.join(root, "split.json"), "w") as fh:
        json.dump({"seed": split.seed, "train": list(split.train), "val": list(split.val)}, fh)
        fh.write("\n")


def read_dataset(root):
    with open(os.path.join(root, "split.json")) as fh:
        meta = json.load(fh)
    split = DatasetSplit(tuple(meta["train"]), tuple(meta["val"]), int(meta["seed"]))
    scenes = {}
    for name, ids in (("train", split.train), ("val", split.val)):
        for sid in ids:
            scenes[sid] = load_scene(os.path.join(root, name, f"{sid}.json"))
    return split, scenes
