"""Cross-modality transfer applied before the two detectors.

Geometric transfer turns projected LiDAR depth into features that are
merged into every image pyramid level.  Semantic transfer lifts image
features into the occupied BEV pillars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .geometry import BevGrid, CameraModel, project_points


@dataclass
class DepthMap:
    view_id: int
    grid: np.ndarray  # (Hd, Wd) metres, 0 = no return


@dataclass
class PillarSample:
    cells: np.ndarray     # flat BEV index row * W + col
    cols: np.ndarray
    rows: np.ndarray
    heights: np.ndarray   # median point height per pillar (m)
    counts: np.ndarray


def depth_map_shape(image_size, stride=4):
    w, h = image_size
    return math.ceil(h / stride), math.ceil(w / stride)


def render_sparse_depth(points, cam: CameraModel, stride=4) -> DepthMap:
    """Project points into a down-scaled depth raster; collisions keep the nearest."""
    hd, wd = depth_map_shape(cam.image_size, stride)
    out = np.full((hd, wd), np.inf)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, np.shape(points)[-1] if np.ndim(points) == 2 else 3)
    if len(pts):
        uv, depth, ok = project_points(pts[:, :3], cam)
        ok &= (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        col = np.floor(uv[ok, 0] / stride).astype(np.int64)
        row = np.floor(uv[ok, 1] / stride).astype(np.int64)
        np.minimum.at(out, (row, col), depth[ok])
    out[np.isinf(out)] = 0.0
    return DepthMap(cam.view_id, out)


def pillarize(points, grid: BevGrid) -> PillarSample:
    pts = np.asarray(points, dtype=np.float64)
    col, row, ok = grid.cells(pts[:, :2]) if len(pts) else (np.zeros(0, int), np.zeros(0, int), np.zeros(0, bool))
    cell = (row * grid.width + col)[ok]
    z = pts[ok, 2] if len(pts) else np.zeros(0)
    if len(cell) == 0:
        e = np.zeros(0, dtype=np.int64)
        return PillarSample(e, e, e, np.zeros(0), e)
    order = np.lexsort((z, cell))
    cs, zs = cell[order], z[order]
    uniq, start, count = np.unique(cs, return_index=True, return_counts=True)
    median = 0.5 * (zs[start + (count - 1) // 2] + zs[start + count // 2])
    return PillarSample(uniq, uniq % grid.width, uniq // grid.width, median, count)


def level_maps(pyramid, view):
    """Per-level (H_l, W_l, C) maps of one view from (V, C, H_l, W_l) tensors."""
    return [lvl[view].transpose(1, 2, 0) for lvl in pyramid]


def fetch_features(maps, ref):
    """Bilinear fetch at normalised points on every level, max-pooled over levels."""
    ref = np.asarray(ref)
    per_level = []
    for m in maps:
        h, w, _ = m.shape
        loc = (ref * np.array([w, h]) - 0.5).astype(m.dtype)
        per_level.append(nn.grid_sample(m.reshape(1, h, w, m.shape[2]), nn.Tensor(loc[None])).reshape(len(ref), m.shape[2]))
    return nn.amax(nn.stack(per_level, axis=0), axis=0)


class GeometricTransfer:
    """Depth stem, then per level: residual block, channel concat with the
    image level, 3x3 conv back to the level's width.

    The first residual block keeps stride 1 so its output lines up with
    level 1 (the depth raster already sits at the level-1 stride); later
    blocks halve the resolution like the image pyramid.
    """

    def __init__(self, store, name, dim, depth_channels=16, levels=4, depth_scale=30.0):
        self.depth_scale = depth_scale
        self.stem = nn.ConvNormAct(store, f"{name}.stem", 1, depth_channels)
        self.blocks, self.fuse = [], []
        c_in = depth_channels
        for lvl in range(levels):
            self.blocks.append(nn.ResidualBlock(store, f"{name}.block{lvl}", c_in, depth_channels,
                                                stride=1 if lvl == 0 else 2))
            self.fuse.append(nn.Conv2d(store, f"{name}.fuse{lvl}", depth_channels + dim, dim, 3))
            c_in = dim

    def __call__(self, pyramid, depth):
        """pyramid: list of (V, C, H_l, W_l); depth: (V, Hd, Wd) metres."""
        depth = np.asarray(depth)
        x = nn.Tensor((depth / self.depth_scale)[:, None].astype(pyramid[0].dtype))
        x = self.stem(x)
        out = []
        for lvl, (block, fuse) in enumerate(zip(self.blocks, self.fuse)):
            x = block(x)
            f = pyramid[lvl]
            if x.shape[0] != f.shape[0] or x.shape[2:] != f.shape[2:]:
                raise nn.ShapeError(f"depth features {x.shape} do not align with image level {lvl} {f.shape}")
            x = fuse(nn.concat([x, f], axis=1))
            out.append(x)
        return out


class SemanticTransfer:
    """Image semantics into occupied BEV pillars.

    For each view, every pillar whose (x, y, median z) projects into the
    image gets the level-max-pooled image feature added to its BEV feature,
    then one deformable-attention + FFN step against that view's pyramid.
    Views are merged by element-wise max and the result replaces the BEV
    feature at the pillar.  Other cells are copied unchanged.
    """

    def __init__(self, store, name, cfg: nn.AttentionConfig):
        self.cfg = cfg
        self.pos = nn.MLP(store, f"{name}.pos", [2, cfg.dim, cfg.dim])
        self.deform = nn.DeformableAttention(store, f"{name}.deform", cfg)
        self.norm = nn.LayerNorm(store, f"{name}.norm", cfg.dim)
        self.ffn = nn.FFN(store, f"{name}.ffn", cfg.dim)
        self.last_updated = np.zeros(0, dtype=np.int64)

    def __call__(self, bev, points, pyramid, cams, grid: BevGrid):
        _, c, h, w = bev.shape
        pillars = pillarize(points, grid)
        self.last_updated = np.zeros(0, dtype=np.int64)
        if len(pillars.cells) == 0:
            return bev
        centers = grid.cell_centers()[pillars.cells]
        xyz = np.concatenate([centers, pillars.heights[:, None]], axis=1)
        flat = bev.reshape(c, h * w).transpose(1, 0)
        dtype = bev.dtype
        per_view = []
        vis_any = np.zeros(len(xyz), dtype=bool)
        for v, cam in enumerate(cams):
            uv, _, ok = project_points(xyz, cam)
            ok &= (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
            per_view.append((np.nonzero(ok)[0], uv[ok] / np.array([cam.width, cam.height])))
            vis_any |= ok
        upd = np.nonzero(vis_any)[0]
        if len(upd) == 0:
            return bev
        slot = np.full(len(xyz), -1)
        slot[upd] = np.arange(len(upd))
        fill = nn.Tensor(np.full((len(upd), c), -1e30, dtype=dtype))
        merged = []
        for v, (idx, ref) in enumerate(per_view):
            if len(idx) == 0:
                continue
            maps = level_maps(pyramid, v)
            q = nn.gather_rows(flat, pillars.cells[idx]) + fetch_features(maps, ref)
            q_pos = self.pos(nn.Tensor(ref.astype(dtype)))
            map_pos = [self.pos(nn.Tensor(nn.level_pixel_centres(m.shape[0], m.shape[1]).astype(dtype)))
                       for m in maps]
            values = self.deform.project_values(maps, map_pos)
            q = self.norm(q + self.deform(q + q_pos, values, ref.astype(dtype)))
            q = self.ffn(q)
            merged.append(nn.scatter_rows(fill, slot[idx], q))
        agg = merged[0] if len(merged) == 1 else nn.amax(nn.stack(merged, axis=0), axis=0)
        self.last_updated = pillars.cells[upd]
        out = nn.scatter_rows(flat, pillars.cells[upd], agg)
        return out.transpose(1, 0).reshape(1, c, h, w)
