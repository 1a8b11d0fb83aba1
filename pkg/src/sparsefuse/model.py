"""The full detector: both branches, the two transfers, view transform and fusion.

Parameter names are grouped by prefix so stages can freeze and checkpoints
can be compared group by group:

    lidar.backbone.*   pillar encoder (frozen in stage 2)
    lidar.*            heatmap head, category embedding, decoder, head
    semantic.*         camera -> BEV transfer
    camera.*           image backbone, geometric transfer, heatmap head, decoder, head
    transform.*        view transformation and its LiDAR-view head
    fusion.<strategy>.* / sequential.<mode>.*
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from . import nncore as nn
from .backbones import ImageBackbone, PillarBackbone
from .config import RunConfig
from .detector import (CameraDecoder, DecodedBoxes, HeatmapHead, LidarDecoder, PredictionHead, QuerySet,
                       decode_lidar, decode_perspective, init_queries_camera, init_queries_lidar,
                       lidar_pred_vector, perspective_pred_vector, scores_of)
from .fusion import FUSION_CLASSES, SequentialCameraStage, ViewTransform, clip_to_grid
from .transfer import GeometricTransfer, SemanticTransfer, render_sparse_depth

FROZEN_IN_STAGE2 = ("lidar.backbone.",)


@dataclass
class Branch:
    """One detector's queries, head outputs, regression tensor and decoded boxes."""
    queries: QuerySet
    out: dict
    vec: nn.Tensor
    boxes: DecodedBoxes


@dataclass
class ForwardResult:
    lidar_heat: nn.Tensor                    # (1, K, H, W) logits
    lidar: Branch
    camera_heat: Optional[list] = None       # per level (V, K, H_l, W_l) logits
    camera: Optional[Branch] = None          # perspective space, boxes in camera frames
    transformed: Optional[Branch] = None     # camera candidates after the view transform
    fused: Optional[Branch] = None


def images_tensor(scene, dtype):
    return nn.Tensor(np.stack([im.transpose(2, 0, 1) for im in scene.images]).astype(dtype))


class SparseFusionModel:
    def __init__(self, cfg: RunConfig, store: Optional[nn.ParamStore] = None):
        cfg.validate()
        self.cfg = cfg
        m = cfg.model
        k = cfg.num_classes
        grid = cfg.grid
        self.grid = grid
        self.store = store if store is not None else nn.ParamStore(cfg.train.seed)
        st = self.store
        att = nn.AttentionConfig(m.dim, m.heads, m.points, m.levels)
        self.att = att

        self.lidar_backbone = PillarBackbone(st, "lidar.backbone", grid, m.dim)
        self.lidar_heatmap = HeatmapHead(st, "lidar.heatmap", m.dim, k)
        self.lidar_embed = st.get_or_create("lidar.embed", (k, m.dim), init="normal")
        self.lidar_decoder = LidarDecoder(st, "lidar.decoder", att, grid)
        self.lidar_head = PredictionHead(st, "lidar.head", m.dim, k)

        self.semantic = SemanticTransfer(st, "semantic", att)

        self.image_backbone = ImageBackbone(st, "camera.backbone", m.dim, m.levels)
        self.geometric = GeometricTransfer(st, "camera.geometric", m.dim, m.depth_channels, m.levels, m.depth_scale)
        self.camera_heatmap = HeatmapHead(st, "camera.heatmap", m.dim, k)
        self.camera_embed = st.get_or_create("camera.embed", (k, m.dim), init="normal")
        self.camera_decoder = CameraDecoder(st, "camera.decoder", att, len(cfg.generator.camera_yaws))
        self.camera_head = PredictionHead(st, "camera.head", m.dim, k)
        # start depth predictions mid-range instead of at zero
        self.camera_head.mlps["height"].layers[-1].bias.data[:] = 1.5

        if m.sequential:
            self.sequential = SequentialCameraStage(st, f"sequential.{m.sequential}", att, grid, k, m.sequential)
            self.view_transform = None
            self.transform_head = None
            self.fusion = None
        else:
            self.sequential = None
            self.view_transform = ViewTransform(st, "transform", att, grid)
            self.transform_head = PredictionHead(st, "transform.head", m.dim, k)
            cls = FUSION_CLASSES[m.strategy]
            kwargs = {"iters": m.ipot_iters} if m.strategy == "optimal_transport" else {}
            self.fusion = cls(st, f"fusion.{m.strategy}", att, grid, k, **kwargs)
        self.freeze_lidar_backbone = False

    # ------------------------------------------------------------ pieces

    def _lidar_branch(self, bev):
        m = self.cfg.model
        heat = self.lidar_heatmap(bev)
        probs = expit(heat.data[0].astype(np.float64))
        q0 = init_queries_lidar(probs, bev, self.lidar_embed, self.grid, m.n_lidar, m.nms_kernel)
        q = self.lidar_decoder(q0, bev)
        out = self.lidar_head(q.features)
        vec = lidar_pred_vector(out, q.ref_points, self.grid)
        scores, cats = scores_of(out)
        return heat, Branch(q, out, vec, decode_lidar(vec.data, scores, cats, self.grid))

    def image_features(self, scene):
        dtype = self.store.dtype
        pyramid = self.image_backbone(images_tensor(scene, dtype))
        stride = self.cfg.model.depth_stride
        depth = np.stack([render_sparse_depth(scene.points, c, stride).grid for c in scene.cameras])
        return self.geometric(pyramid, depth)

    def bev_features(self, scene):
        ctx = nn.no_grad() if self.freeze_lidar_backbone else contextlib.nullcontext()
        with ctx:
            bev, mask = self.lidar_backbone(scene.points, self.store.dtype)
        if self.freeze_lidar_backbone:
            bev = nn.Tensor(bev.data)
        return bev, mask

    def _camera_branch(self, scene, pyramid):
        m = self.cfg.model
        heat = [self.camera_heatmap(level) for level in pyramid]
        probs = [expit(h.data.astype(np.float64)) for h in heat]
        q0 = init_queries_camera(probs, pyramid, self.camera_embed, m.n_camera, m.nms_kernel)
        q = self.camera_decoder(q0, pyramid)
        out = self.camera_head(q.features)
        vec = perspective_pred_vector(out, q.ref_points, q.view_ids, scene.cameras)
        scores, cats = scores_of(out)
        boxes = decode_perspective(vec.data, scores, cats, q.view_ids, scene.cameras)
        return heat, Branch(q, out, vec, boxes)

    def _bev_branch(self, q: QuerySet, head):
        out = head(q.features)
        vec = lidar_pred_vector(out, q.ref_points, self.grid)
        scores, cats = scores_of(out)
        return Branch(q, out, vec, decode_lidar(vec.data, scores, cats, self.grid))

    @staticmethod
    def _anchored(branch: Branch, grid):
        """Queries re-anchored at their branch's decoded BEV centres."""
        q = branch.queries
        ref = clip_to_grid(branch.boxes.centers[:, :2], grid)
        return QuerySet(q.features, ref, branch.boxes.categories, "bev", scores=branch.boxes.scores)

    # ------------------------------------------------------------ forward

    def forward_lidar(self, scene):
        """LiDAR-only pass (stage 1)."""
        bev, _ = self.bev_features(scene)
        if self.cfg.model.stage1_semantic_transfer:
            bev = self.semantic(bev, scene.points, self.image_features(scene), scene.cameras, self.grid)
        heat, lidar = self._lidar_branch(bev)
        return ForwardResult(heat, lidar)

    def forward(self, scene):
        """Full pass: both branches, transfers, view transform and fusion."""
        pyramid = self.image_features(scene)
        bev, _ = self.bev_features(scene)
        bev = self.semantic(bev, scene.points, pyramid, scene.cameras, self.grid)
        lidar_heat, lidar = self._lidar_branch(bev)
        camera_heat, camera = self._camera_branch(scene, pyramid)
        res = ForwardResult(lidar_heat, lidar, camera_heat, camera)
        q_l = self._anchored(lidar, self.grid)
        if self.sequential is not None:
            q_f, out = self.sequential(q_l, lidar.boxes.centers, pyramid, scene.cameras)
            vec = lidar_pred_vector(out, q_f.ref_points, self.grid)
            scores, cats = scores_of(out)
            res.fused = Branch(q_f, out, vec, decode_lidar(vec.data, scores, cats, self.grid))
            return res
        q_t = self.view_transform(camera.queries, camera.boxes, scene.cameras)
        res.transformed = self._bev_branch(q_t, self.transform_head)
        q_c = self._anchored(res.transformed, self.grid)
        q_f, out = self.fusion(q_l, q_c, lidar_scores=lidar.boxes.scores, camera_scores=res.transformed.boxes.scores)
        vec = lidar_pred_vector(out, q_f.ref_points, self.grid)
        scores, cats = scores_of(out)
        res.fused = Branch(q_f, out, vec, decode_lidar(vec.data, scores, cats, self.grid))
        return res
