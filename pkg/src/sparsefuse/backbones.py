"""Small feature extractors standing in for the production backbones."""

from __future__ import annotations

import numpy as np

from . import nncore as nn
from .geometry import BevGrid


POINT_FEATURES = 9


class PillarBackbone:
    """Point-wise MLP, max-pool into BEV pillars, then a short conv stack.

    Returns the BEV feature map (1, C, H, W) and the occupied-cell mask (H, W).
    """

    def __init__(self, store, name, grid: BevGrid, dim):
        self.grid = grid
        self.point_mlp = nn.Linear(store, f"{name}.point", POINT_FEATURES, dim)
        self.conv = nn.ConvNormAct(store, f"{name}.conv", dim, dim)
        self.block1 = nn.ResidualBlock(store, f"{name}.block1", dim, dim)
        self.block2 = nn.ResidualBlock(store, f"{name}.block2", dim, dim)
        self.dim = dim

    def point_features(self, points):
        g = self.grid
        col, row, ok = g.cells(points[:, :2])
        pts = points[ok]
        col, row = col[ok], row[ok]
        cell = row * g.width + col
        cx = g.x_range[0] + (col + 0.5) * g.resolution
        cy = g.y_range[0] + (row + 0.5) * g.resolution
        # pillar statistics: member count and mean position
        count = np.bincount(cell, minlength=g.width * g.height)[cell]
        mean = np.stack([np.bincount(cell, weights=pts[:, i], minlength=g.width * g.height)[cell]
                         for i in range(3)], axis=1) / count[:, None]
        feats = np.stack([
            (pts[:, 0] - cx) / g.resolution,
            (pts[:, 1] - cy) / g.resolution,
            pts[:, 2],
            pts[:, 3],
            (pts[:, 0] - mean[:, 0]) / g.resolution,
            (pts[:, 1] - mean[:, 1]) / g.resolution,
            pts[:, 2] - mean[:, 2],
            np.log1p(count),
            np.hypot(pts[:, 0], pts[:, 1]) / 25.0,
        ], axis=1)
        return feats, cell

    def __call__(self, points, dtype=np.float32):
        g = self.grid
        feats, cell = self.point_features(np.asarray(points, dtype=np.float64))
        h, w = g.height, g.width
        mask = np.zeros(h * w, dtype=bool)
        mask[cell] = True
        pf = nn.relu(self.point_mlp(nn.Tensor(feats.astype(dtype))))
        bev = nn.segment_max(pf, cell, h * w)  # (H*W, C)
        x = bev.transpose(1, 0).reshape(1, self.dim, h, w)
        x = self.conv(x)
        x = self.block1(x)
        x = self.block2(x)
        return x, mask.reshape(h, w)


class ImageBackbone:
    """Strided conv stem plus one stride-2 residual block per pyramid level.

    Input (V, 3, H, W); output list of L maps (V, C, H_l, W_l) with strides
    4, 8, 16, 32 (sizes rounded up).
    """

    def __init__(self, store, name, dim, levels=4):
        stem = max(8, dim // 2)
        self.stem = nn.ConvNormAct(store, f"{name}.stem", 3, stem, stride=2)
        self.blocks = []
        c_in = stem
        for lvl in range(levels):
            self.blocks.append(nn.ResidualBlock(store, f"{name}.level{lvl}", c_in, dim, stride=2))
            c_in = dim

    def __call__(self, images):
        x = self.stem(images)
        out = []
        for block in self.blocks:
            x = block(x)
            out.append(x)
        return out
