"""Heatmap query initialisation, the two one-layer detectors, and their heads.

Box regression vectors are 10 wide and share one layout in both spaces:

    LiDAR view:  x/res, y/res (cells), z (m), log l, log w, log h, sin, cos, vx, vy
    perspective: u/8, v/8 (8 px units), depth/10 (m), log l, log w, log h, sin, cos, vx, vz

Camera yaw is about the camera +Y axis; velocities are in the matching frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import maximum_filter

from . import nncore as nn
from .geometry import (BevGrid, Box3DCam, Box3DLidar, backproject, box_corners_lidar,
                       boxes_lidar_to_cam, project_points)

PIXEL_UNIT = 8.0
DEPTH_UNIT = 10.0
MIN_DEPTH = 1e-3
PRIOR_BIAS = -math.log((1 - 0.1) / 0.1)  # sigmoid(-2.197) = 0.1


@dataclass
class QuerySet:
    features: nn.Tensor                # (N, C)
    ref_points: np.ndarray             # (N, 2) metres (bev) or normalised image coords (perspective)
    categories: np.ndarray             # (N,) int
    space: str = "bev"
    view_ids: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None
    levels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.space not in ("bev", "perspective"):
            raise ValueError(f"unknown query space {self.space!r}")
        if self.space == "perspective" and self.view_ids is None:
            raise ValueError("perspective queries need view ids")
        n = self.features.shape[0]
        if self.ref_points.shape != (n, 2) or len(self.categories) != n:
            raise nn.ShapeError(f"query set fields disagree: features {self.features.shape}, "
                                f"ref_points {self.ref_points.shape}, categories {len(self.categories)}")
        if not np.all(np.isfinite(self.ref_points)):
            raise ValueError("non-finite reference points")

    def __len__(self):
        return self.features.shape[0]

    def with_features(self, features):
        return QuerySet(features, self.ref_points, self.categories, self.space,
                        self.view_ids, self.scores, self.levels)


@dataclass
class Detection:
    category: int
    score: float
    box: object
    source: str
    view_id: int = -1


# ---------------------------------------------------------------- ground truth

def gaussian_sigma(length, width, cell):
    return max(max(length, width) / (6.0 * cell), 1.0)


def splat_gaussian(heat, col, row, sigma):
    """Max-combine an unnormalised Gaussian centred on integer cell (col, row) into heat (H, W)."""
    h, w = heat.shape
    ys = np.arange(h)[:, None] - row
    xs = np.arange(w)[None, :] - col
    g = np.exp(-(xs * xs + ys * ys) / (2.0 * sigma * sigma))
    np.maximum(heat, g, out=heat)
    return heat


def splat_gt_heatmap(objects, grid: BevGrid, num_classes):
    """Category-wise BEV centre heatmap (K, H, W) from ObjectSpecs."""
    heat = np.zeros((num_classes, grid.height, grid.width))
    for obj in objects:
        col, row, ok = grid.cells(obj.box.center[None, :2])
        if not ok[0]:
            continue
        sigma = gaussian_sigma(obj.box.size[0], obj.box.size[1], grid.resolution)
        splat_gaussian(heat[obj.category], col[0], row[0], sigma)
    return heat


def assign_level(max_side, thresholds):
    """0-based pyramid level whose size band [t_l, t_{l+1}) contains max_side."""
    level = 0
    for i, t in enumerate(thresholds):
        if max_side >= t:
            level = i
    return level


@dataclass
class CameraTarget:
    """One GT object as seen by one view."""
    obj_index: int
    category: int
    uv: np.ndarray         # projected centre (px)
    max_side: float        # projected extent (px)
    level: int
    box_vector: np.ndarray  # 10-vector, perspective layout


def projected_extent(obj, cam):
    corners = box_corners_lidar(obj.box)
    uv, _, ok = project_points(np.vstack([obj.box.center[None], corners]), cam)
    if not ok.all():
        return None
    hw = np.abs(uv[1:, 0] - uv[0, 0]).max()
    hh = np.abs(uv[1:, 1] - uv[0, 1]).max()
    return uv[0], 2.0 * max(hw, hh)


def camera_targets(objects, cam, thresholds):
    """GT objects whose centre projects inside the image of ``cam``."""
    out = []
    for i, obj in enumerate(objects):
        ext = projected_extent(obj, cam)
        if ext is None:
            continue
        uv, side = ext
        if not (0 <= uv[0] < cam.width and 0 <= uv[1] < cam.height):
            continue
        c, y, v = boxes_lidar_to_cam(obj.box.center[None], [obj.box.yaw], obj.box.velocity[None], cam)
        vec = np.concatenate([uv / PIXEL_UNIT, [c[0, 2] / DEPTH_UNIT], np.log(obj.box.size),
                              [math.sin(y[0]), math.cos(y[0])], v[0]])
        out.append(CameraTarget(i, obj.category, uv, side, assign_level(side, thresholds), vec))
    return out


def splat_image_heatmaps(targets, image_size, level_shapes, num_classes):
    """Per-level heatmaps (K, H_l, W_l); each object only on its assigned level."""
    w, h = image_size
    maps = [np.zeros((num_classes, hl, wl)) for hl, wl in level_shapes]
    for t in targets:
        hl, wl = level_shapes[t.level]
        sx, sy = w / wl, h / hl
        col = min(int(t.uv[0] / sx), wl - 1)
        row = min(int(t.uv[1] / sy), hl - 1)
        splat_gaussian(maps[t.level][t.category], col, row, max(t.max_side / (6.0 * max(sx, sy)), 1.0))
    return maps


def level_shapes_of(image_size, levels):
    """(H_l, W_l) of each pyramid level: a stride-2 stem, then one halving per level."""
    w, h = image_size
    h, w = math.ceil(h / 2), math.ceil(w / 2)
    shapes = []
    for _ in range(levels):
        h, w = math.ceil(h / 2), math.ceil(w / 2)
        shapes.append((h, w))
    return shapes


def lidar_box_vectors(objects, grid: BevGrid):
    if not objects:
        return np.zeros((0, 10))
    rows = []
    for o in objects:
        b = o.box
        rows.append(np.concatenate([b.center[:2] / grid.resolution, [b.center[2]], np.log(b.size),
                                    [math.sin(b.yaw), math.cos(b.yaw)], b.velocity]))
    return np.array(rows)


# ---------------------------------------------------------------- query selection

def local_max_scores(score, kernel):
    """Zero every score that is not the maximum of its kernel x kernel neighbourhood."""
    if kernel <= 1:
        return score
    peak = maximum_filter(score, size=kernel, mode="nearest")
    return np.where(score == peak, score, 0.0)


def top_n(scores, n):
    """Indices of the n largest scores; ties go to the lower index."""
    scores = np.asarray(scores).ravel()
    if n > len(scores):
        raise ValueError(f"cannot select {n} queries from {len(scores)} cells")
    return np.argsort(-scores, kind="stable")[:n]


def init_queries_lidar(probs, bev, embed, grid: BevGrid, n, nms_kernel=3):
    """Top-n BEV cells of max-over-category confidence.

    probs (K, H, W) numpy; bev (1, C, H, W) tensor; embed (K, C) tensor.
    """
    k, h, w = probs.shape
    score = local_max_scores(probs.max(axis=0), nms_kernel).ravel()
    idx = top_n(score, n)
    cats = probs.reshape(k, -1)[:, idx].argmax(axis=0)
    c = bev.shape[1]
    flat = bev.reshape(c, h * w).transpose(1, 0)
    feats = nn.gather_rows(flat, idx) + nn.gather_rows(embed, cats)
    ref = grid.cell_centers()[idx]
    return QuerySet(feats, ref, cats, "bev", scores=probs.max(axis=0).ravel()[idx])


def flatten_camera_scores(level_probs, nms_kernel=3):
    """level_probs: list over levels of (V, K, H_l, W_l).

    Returns joint scores in (view, level, row, col) order plus an index table.
    """
    v = level_probs[0].shape[0]
    scores, table = [], []
    for view in range(v):
        for lvl, p in enumerate(level_probs):
            s = local_max_scores(p[view].max(axis=0), nms_kernel)
            hl, wl = s.shape
            rr, cc = np.meshgrid(np.arange(hl), np.arange(wl), indexing="ij")
            scores.append(s.ravel())
            table.append(np.stack([np.full(hl * wl, view), np.full(hl * wl, lvl), rr.ravel(), cc.ravel()], 1))
    return np.concatenate(scores), np.concatenate(table)


def init_queries_camera(level_probs, pyramid, embed, n, nms_kernel=3):
    """Joint top-n over every view, level and cell of the image heatmaps.

    level_probs: list of (V, K, H_l, W_l) numpy; pyramid: list of (V, C, H_l, W_l) tensors.
    """
    scores, table = flatten_camera_scores(level_probs, nms_kernel)
    idx = top_n(scores, n)
    sel = table[idx]
    c = pyramid[0].shape[1]
    cats = np.array([level_probs[l][v, :, r, col].argmax() for v, l, r, col in sel], dtype=np.int64)
    raw = np.array([level_probs[l][v, :, r, col].max() for v, l, r, col in sel])
    rows = []
    for lvl, f in enumerate(pyramid):
        vv, hl, wl = f.shape[0], f.shape[2], f.shape[3]
        rows.append(f.transpose(0, 2, 3, 1).reshape(vv * hl * wl, c))
    offsets = np.cumsum([0] + [f.shape[0] * f.shape[2] * f.shape[3] for f in pyramid])
    flat = nn.concat(rows, axis=0)
    gidx = np.array([offsets[l] + (v * pyramid[l].shape[2] + r) * pyramid[l].shape[3] + col
                     for v, l, r, col in sel], dtype=np.int64)
    feats = nn.gather_rows(flat, gidx) + nn.gather_rows(embed, cats)
    ref = np.array([[(col + 0.5) / pyramid[l].shape[3], (r + 0.5) / pyramid[l].shape[2]]
                    for v, l, r, col in sel]).reshape(-1, 2)
    return QuerySet(feats, ref, cats, "perspective", view_ids=sel[:, 0].copy(), scores=raw,
                    levels=sel[:, 1].copy())


# ---------------------------------------------------------------- networks

class HeatmapHead:
    """3x3 conv + relu, then 3x3 conv to K logits (bias starts at the 0.1 prior)."""

    def __init__(self, store, name, dim, num_classes):
        self.conv = nn.Conv2d(store, f"{name}.conv", dim, dim, 3)
        self.out = nn.Conv2d(store, f"{name}.out", dim, num_classes, 3)
        self.out.bias.data[:] = PRIOR_BIAS

    def __call__(self, x):
        return self.out(nn.relu(self.conv(x)))


class LidarDecoder:
    """Self-attention, cross-attention to the flattened BEV map, FFN."""

    def __init__(self, store, name, cfg: nn.AttentionConfig, grid: BevGrid):
        self.grid = grid
        self.pos = nn.MLP(store, f"{name}.pos", [2, cfg.dim, cfg.dim])
        self.self_attn = nn.AttentionBlock(store, f"{name}.self", cfg.dim, cfg.heads)
        self.cross_attn = nn.AttentionBlock(store, f"{name}.cross", cfg.dim, cfg.heads)
        self.ffn = nn.FFN(store, f"{name}.ffn", cfg.dim)

    def __call__(self, q: QuerySet, bev):
        c = bev.shape[1]
        dtype = bev.dtype
        kv = bev.reshape(c, -1).transpose(1, 0)
        pos_q = self.pos(nn.Tensor(self.grid.normalize(q.ref_points).astype(dtype)))
        pos_kv = self.pos(nn.Tensor(self.grid.normalize(self.grid.cell_centers()).astype(dtype)))
        x = self.self_attn(q.features, pos=pos_q)
        x = self.cross_attn(x, kv=kv, pos=pos_q, pos_kv=pos_kv)
        return q.with_features(self.ffn(x))


class CameraDecoder:
    """Self-attention over all camera queries, per-view deformable attention, FFN."""

    def __init__(self, store, name, cfg: nn.AttentionConfig, num_views):
        self.pos = nn.MLP(store, f"{name}.pos", [2, cfg.dim, cfg.dim])
        self.view_embed = store.get_or_create(f"{name}.view_embed", (num_views, cfg.dim), init="normal")
        self.self_attn = nn.AttentionBlock(store, f"{name}.self", cfg.dim, cfg.heads)
        self.deform = nn.DeformableAttention(store, f"{name}.deform", cfg)
        self.norm = nn.LayerNorm(store, f"{name}.norm", cfg.dim)
        self.ffn = nn.FFN(store, f"{name}.ffn", cfg.dim)

    def query_pos(self, q: QuerySet):
        dtype = q.features.dtype
        return self.pos(nn.Tensor(q.ref_points.astype(dtype))) + nn.gather_rows(self.view_embed, q.view_ids)

    def __call__(self, q: QuerySet, pyramid):
        dtype = q.features.dtype
        pos = self.query_pos(q)
        x = self.self_attn(q.features, pos=pos)
        parts, order = [], []
        for v in np.unique(q.view_ids):
            rows = np.nonzero(q.view_ids == v)[0]
            maps = [lvl[int(v)].transpose(1, 2, 0) for lvl in pyramid]
            map_pos = [self.pos(nn.Tensor(nn.level_pixel_centres(m.shape[0], m.shape[1]).astype(dtype)))
                       for m in maps]
            values = self.deform.project_values(maps, map_pos)
            xv = nn.gather_rows(x, rows)
            pv = nn.gather_rows(pos, rows)
            parts.append(xv + self.deform(xv + pv, values, q.ref_points[rows].astype(dtype)))
            order.append(rows)
        order = np.concatenate(order)
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        x = nn.gather_rows(nn.concat(parts, axis=0), inv)
        return q.with_features(self.ffn(self.norm(x)))


HEAD_OUTPUTS = (("cls", None), ("offset", 2), ("height", 1), ("log_size", 3), ("rot", 2), ("vel", 2))


class PredictionHead:
    """Six independent two-layer MLPs over query features."""

    def __init__(self, store, name, dim, num_classes):
        self.mlps = {}
        for key, width in HEAD_OUTPUTS:
            out = num_classes if width is None else width
            bias = PRIOR_BIAS if key == "cls" else "zeros"
            self.mlps[key] = nn.MLP(store, f"{name}.{key}", [dim, dim, out], last_bias_init=bias)

    def __call__(self, features):
        return {key: mlp(features) for key, mlp in self.mlps.items()}


def box_vector(out):
    """(N, 10) regression tensor in the shared layout, before the ref-point shift."""
    return nn.concat([out["offset"], out["height"], out["log_size"], out["rot"], out["vel"]], axis=1)


def lidar_pred_vector(out, ref, grid: BevGrid):
    """Predicted LiDAR-layout vector: ref cell position + offset, then the rest."""
    shift = np.zeros((len(ref), 10), dtype=out["offset"].dtype)
    shift[:, :2] = ref / grid.resolution
    return box_vector(out) + nn.Tensor(shift)


def perspective_pred_vector(out, ref, view_ids, cams):
    shift = np.zeros((len(ref), 10), dtype=out["offset"].dtype)
    sizes = np.array([[cams[v].width, cams[v].height] for v in view_ids]).reshape(-1, 2)
    shift[:, :2] = ref * sizes / PIXEL_UNIT
    return box_vector(out) + nn.Tensor(shift)


def scores_of(out):
    p = 1.0 / (1.0 + np.exp(-out["cls"].data.astype(np.float64)))
    return p.max(axis=1), p.argmax(axis=1)


@dataclass
class DecodedBoxes:
    centers: np.ndarray   # (N, 3)
    sizes: np.ndarray     # (N, 3)
    yaws: np.ndarray      # (N,)
    velocities: np.ndarray  # (N, 2)
    scores: np.ndarray
    categories: np.ndarray
    view_ids: Optional[np.ndarray] = None
    clamped: Optional[np.ndarray] = None
    uv: Optional[np.ndarray] = None


def decode_lidar(vec, scores, cats, grid: BevGrid):
    """vec: (N, 10) numpy in LiDAR layout."""
    vec = np.asarray(vec, dtype=np.float64)
    centers = np.concatenate([vec[:, :2] * grid.resolution, vec[:, 2:3]], axis=1)
    return DecodedBoxes(centers, np.exp(np.clip(vec[:, 3:6], -6.0, 6.0)), np.arctan2(vec[:, 6], vec[:, 7]),
                        vec[:, 8:10].copy(), scores, cats)


def decode_perspective(vec, scores, cats, view_ids, cams):
    """vec: (N, 10) numpy in perspective layout -> camera-frame boxes.

    Non-positive depths are clamped to 1 mm and flagged.
    """
    vec = np.asarray(vec, dtype=np.float64)
    uv = vec[:, :2] * PIXEL_UNIT
    depth = vec[:, 2] * DEPTH_UNIT
    clamped = depth <= 0
    depth = np.where(clamped, MIN_DEPTH, depth)
    centers = np.zeros((len(vec), 3))
    for v in np.unique(view_ids):
        rows = view_ids == v
        centers[rows] = backproject(uv[rows], depth[rows], cams[int(v)])
    return DecodedBoxes(centers, np.exp(np.clip(vec[:, 3:6], -6.0, 6.0)), np.arctan2(vec[:, 6], vec[:, 7]),
                        vec[:, 8:10].copy(), scores, cats, view_ids=np.asarray(view_ids), clamped=clamped, uv=uv)


def to_detections(boxes: DecodedBoxes, source, frame="lidar"):
    cls = Box3DLidar if frame == "lidar" else Box3DCam
    out = []
    for i in range(len(boxes.scores)):
        b = cls(boxes.centers[i], boxes.sizes[i], float(boxes.yaws[i]), boxes.velocities[i])
        view = -1 if boxes.view_ids is None else int(boxes.view_ids[i])
        out.append(Detection(int(boxes.categories[i]), float(boxes.scores[i]), b, source, view))
    return out
