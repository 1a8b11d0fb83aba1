"""Camera candidates into LiDAR space, then instance-level fusion.

Four fusion strategies share one interface: ``strategy(q_lidar, q_camera,
...) -> (fused QuerySet, head outputs)``.  The fused QuerySet's ref points
are BEV metres, so every strategy is decoded by a LiDAR-view head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import nncore as nn
from .detector import PredictionHead, QuerySet, DecodedBoxes
from .geometry import BevGrid, boxes_cam_to_lidar, project_points
from .transfer import fetch_features


def camera_embedding_input(cam):
    """21-vector for m(.): R (9), t (3), K (9) with K in units of image width."""
    return np.concatenate([cam.rotation.ravel(), cam.translation, cam.intrinsics.ravel() / cam.width])


def bev_box_input(centers, sizes, yaws, vel, grid: BevGrid):
    """10-vector for g(.) with the centre normalised to [-1, 1] over the grid."""
    xy = grid.normalize(centers[:, :2]) * 2.0 - 1.0
    return np.concatenate([xy, centers[:, 2:3], np.log(sizes), np.sin(yaws)[:, None],
                           np.cos(yaws)[:, None], vel], axis=1)


def clip_to_grid(xy, grid: BevGrid):
    eps = 1e-6
    return np.stack([np.clip(xy[:, 0], grid.x_range[0], grid.x_range[1] - eps),
                     np.clip(xy[:, 1], grid.y_range[0], grid.y_range[1] - eps)], axis=1)


@dataclass
class TransformedBoxes:
    centers: np.ndarray
    sizes: np.ndarray
    yaws: np.ndarray
    velocities: np.ndarray


def camera_boxes_to_lidar(decoded: DecodedBoxes, cams):
    """LiDAR-frame boxes of decoded perspective boxes, per view."""
    n = len(decoded.scores)
    centers, yaws, vel = np.zeros((n, 3)), np.zeros(n), np.zeros((n, 2))
    for v in np.unique(decoded.view_ids):
        rows = decoded.view_ids == v
        c, y, w = boxes_cam_to_lidar(decoded.centers[rows], decoded.yaws[rows], decoded.velocities[rows], cams[int(v)])
        centers[rows], yaws[rows], vel[rows] = c, y, w
    return TransformedBoxes(centers, decoded.sizes.copy(), yaws, vel)


class ViewTransform:
    """q = g(b^L) + h(q^P * m(camera)), then self-attention + FFN over all views."""

    def __init__(self, store, name, cfg: nn.AttentionConfig, grid: BevGrid):
        c = cfg.dim
        self.grid = grid
        self.g = nn.MLP(store, f"{name}.g", [10, c, c])
        self.h = nn.MLP(store, f"{name}.h", [c, c, c])
        self.m = nn.MLP(store, f"{name}.m", [21, c, c])
        self.pos = nn.MLP(store, f"{name}.pos", [4, c, c])
        self.attn = nn.AttentionBlock(store, f"{name}.attn", c, cfg.heads)
        self.ffn = nn.FFN(store, f"{name}.ffn", c)
        self.last_boxes = None

    def __call__(self, q: QuerySet, decoded: DecodedBoxes, cams):
        dtype = q.features.dtype
        boxes = camera_boxes_to_lidar(decoded, cams)
        self.last_boxes = boxes
        ref = clip_to_grid(boxes.centers[:, :2], self.grid)
        gin = bev_box_input(np.concatenate([ref, boxes.centers[:, 2:3]], 1), boxes.sizes, boxes.yaws,
                            boxes.velocities, self.grid)
        cam_in = np.stack([camera_embedding_input(c) for c in cams])
        m = nn.gather_rows(self.m(nn.Tensor(cam_in.astype(dtype))), q.view_ids)
        x = self.g(nn.Tensor(gin.astype(dtype))) + self.h(q.features * m)
        img = np.array([[u / cams[v].width, w / cams[v].height] for (u, w), v in zip(decoded.uv, q.view_ids)])
        img = np.clip(np.nan_to_num(img), -1.0, 2.0).reshape(-1, 2)
        pos = self.pos(nn.Tensor(np.concatenate([img, self.grid.normalize(ref)], 1).astype(dtype)))
        x = self.ffn(self.attn(x, pos=pos))
        return QuerySet(x, ref, q.categories, "bev", scores=q.scores)


class _Projectors:
    def __init__(self, store, name, dim):
        self.f_l = nn.Linear(store, f"{name}.f_l", dim, dim)
        self.f_l_norm = nn.LayerNorm(store, f"{name}.f_l_norm", dim)
        self.f_c = nn.Linear(store, f"{name}.f_c", dim, dim)
        self.f_c_norm = nn.LayerNorm(store, f"{name}.f_c_norm", dim)

    def project(self, q_l, q_c):
        return self.f_l_norm(self.f_l(q_l.features)), self.f_c_norm(self.f_c(q_c.features))


class SelfAttentionFusion(_Projectors):
    """Project both candidate sets, concatenate, self-attention + FFN."""

    def __init__(self, store, name, cfg: nn.AttentionConfig, grid: BevGrid, num_classes):
        super().__init__(store, name, cfg.dim)
        self.grid = grid
        self.pos = nn.MLP(store, f"{name}.pos", [2, cfg.dim, cfg.dim])
        self.attn = nn.AttentionBlock(store, f"{name}.attn", cfg.dim, cfg.heads)
        self.ffn = nn.FFN(store, f"{name}.ffn", cfg.dim)
        self.head = PredictionHead(store, f"{name}.head", cfg.dim, num_classes)

    def attention_weights(self):
        """(N, N) head-averaged weights of the last call."""
        return self.attn.attn.last_weights.mean(axis=0)

    def __call__(self, q_l: QuerySet, q_c: QuerySet, **_):
        a, b = self.project(q_l, q_c)
        ref = np.concatenate([q_l.ref_points, q_c.ref_points])
        x = nn.concat([a, b], axis=0)
        pos = self.pos(nn.Tensor(self.grid.normalize(ref).astype(x.dtype)))
        x = self.ffn(self.attn(x, pos=pos))
        q = QuerySet(x, ref, np.concatenate([q_l.categories, q_c.categories]), "bev")
        return q, self.head(x)


class MLPFusion(_Projectors):
    """Per-candidate MLP; no interaction between instances."""

    def __init__(self, store, name, cfg: nn.AttentionConfig, grid: BevGrid, num_classes):
        super().__init__(store, name, cfg.dim)
        self.ffn = nn.FFN(store, f"{name}.ffn", cfg.dim)
        self.head = PredictionHead(store, f"{name}.head", cfg.dim, num_classes)

    def __call__(self, q_l: QuerySet, q_c: QuerySet, **_):
        a, b = self.project(q_l, q_c)
        x = self.ffn(nn.concat([a, b], axis=0))
        ref = np.concatenate([q_l.ref_points, q_c.ref_points])
        q = QuerySet(x, ref, np.concatenate([q_l.categories, q_c.categories]), "bev")
        return q, self.head(x)


class CrossAttentionFusion:
    """LiDAR candidates attend to camera candidates."""

    def __init__(self, store, name, cfg: nn.AttentionConfig, grid: BevGrid, num_classes):
        self.grid = grid
        self.pos = nn.MLP(store, f"{name}.pos", [2, cfg.dim, cfg.dim])
        self.attn = nn.AttentionBlock(store, f"{name}.attn", cfg.dim, cfg.heads)
        self.ffn = nn.FFN(store, f"{name}.ffn", cfg.dim)
        self.head = PredictionHead(store, f"{name}.head", cfg.dim, num_classes)

    def __call__(self, q_l: QuerySet, q_c: QuerySet, **_):
        dtype = q_l.features.dtype
        pos_l = self.pos(nn.Tensor(self.grid.normalize(q_l.ref_points).astype(dtype)))
        pos_c = self.pos(nn.Tensor(self.grid.normalize(q_c.ref_points).astype(dtype)))
        x = self.attn(q_l.features, kv=q_c.features, pos=pos_l, pos_kv=pos_c)
        x = self.ffn(x)
        return q_l.with_features(x), self.head(x)


@dataclass
class TransportPlan:
    plan: np.ndarray
    p_lidar: np.ndarray
    p_camera: np.ndarray
    cost: np.ndarray

    @property
    def row_normalized(self):
        rows = self.plan.sum(axis=1, keepdims=True)
        uniform = np.full_like(self.plan, 1.0 / max(self.plan.shape[1], 1))
        # a row with no mass mixes all camera candidates evenly
        return np.where(rows > 0, self.plan / np.where(rows > 0, rows, 1.0), uniform)

    def marginal_error(self):
        return (np.abs(self.plan.sum(axis=1) - self.p_lidar).sum()
                + np.abs(self.plan.sum(axis=0) - self.p_camera).sum())


def _check_simplex(p, name, tol=1e-8):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < -tol) or abs(p.sum() - 1.0) > tol:
        raise ValueError(f"{name} is not a probability vector (sum {p.sum():.12g})")
    return np.clip(p, 0.0, None)


def ipot_solve(cost, p_l, p_c, iters=50, beta=1.0, inner=1, rounding=True):
    """Inexact proximal-point optimal transport, run in the log domain.

    Each outer step multiplies the previous plan by the Gibbs kernel
    exp(-cost / beta) and applies ``inner`` Sinkhorn sweeps toward the marginals.
    With one inner sweep the row sums still lag after 50 steps on metre-scale
    costs, so the result is rounded onto the marginals at the end.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or not np.all(np.isfinite(cost)) or np.any(cost < 0):
        raise ValueError("cost must be a finite nonnegative matrix")
    mu, nu = _check_simplex(p_l, "p_L"), _check_simplex(p_c, "p_C")
    if cost.shape != (len(mu), len(nu)):
        raise nn.ShapeError(f"cost {cost.shape} vs marginals {len(mu)}, {len(nu)}")
    with np.errstate(divide="ignore"):
        log_mu, log_nu = np.log(mu), np.log(nu)
    log_k = -cost / beta
    log_t = np.zeros_like(cost)
    log_b = np.zeros(len(nu))
    for _ in range(iters):
        log_q = log_k + log_t
        for _ in range(inner):
            log_a = log_mu - logsumexp(log_q + log_b[None, :], axis=1)
            log_b = log_nu - logsumexp(log_q + log_a[:, None], axis=0)
        log_t = log_a[:, None] + log_q + log_b[None, :]
        # keep zero-mass rows/cols from turning into NaN
        log_t = np.where(np.isfinite(log_t), log_t, -np.inf)
    plan = round_to_marginals(np.exp(log_t), mu, nu) if rounding else np.exp(log_t)
    return TransportPlan(plan, mu, nu, cost)


def round_to_marginals(plan, mu, nu):
    """Project a nonnegative plan onto the exact-marginal polytope.

    Scale down over-full rows, then over-full columns, then spread the
    remaining deficit as a rank-one nonnegative correction.
    """
    rows = plan.sum(axis=1)
    x = plan * np.minimum(1.0, mu / np.where(rows > 0, rows, 1.0))[:, None]
    cols = x.sum(axis=0)
    x = x * np.minimum(1.0, nu / np.where(cols > 0, cols, 1.0))[None, :]
    err_r = mu - x.sum(axis=1)
    err_c = nu - x.sum(axis=0)
    mass = err_r.sum()
    if mass > 0:
        x = x + np.outer(np.clip(err_r, 0, None), np.clip(err_c, 0, None)) / mass
    return x


def scores_to_simplex(scores):
    s = np.asarray(scores, dtype=np.float64)
    total = s.sum()
    if total <= 0:
        return np.full(len(s), 1.0 / len(s))
    return s / total


class OptimalTransportFusion:
    """Concatenate each LiDAR candidate with its transport-weighted camera mixture."""

    def __init__(self, store, name, cfg: nn.AttentionConfig, grid: BevGrid, num_classes, iters=50):
        self.iters = iters
        self.merge = nn.Linear(store, f"{name}.merge", 2 * cfg.dim, cfg.dim)
        self.ffn = nn.FFN(store, f"{name}.ffn", cfg.dim)
        self.head = PredictionHead(store, f"{name}.head", cfg.dim, num_classes)
        self.last_plan = None

    def __call__(self, q_l: QuerySet, q_c: QuerySet, lidar_scores=None, camera_scores=None, **_):
        cost = np.linalg.norm(q_l.ref_points[:, None, :] - q_c.ref_points[None, :, :], axis=2)
        p_l = scores_to_simplex(lidar_scores if lidar_scores is not None else np.ones(len(q_l)))
        p_c = scores_to_simplex(camera_scores if camera_scores is not None else np.ones(len(q_c)))
        plan = ipot_solve(cost, p_l, p_c, self.iters)
        self.last_plan = plan
        mixed = nn.Tensor(plan.row_normalized.astype(q_c.features.dtype)) @ q_c.features
        x = nn.relu(self.merge(nn.concat([q_l.features, mixed], axis=1)))
        x = self.ffn(x)
        return q_l.with_features(x), self.head(x)


FUSION_CLASSES = {
    "self_attention": SelfAttentionFusion,
    "mlp": MLPFusion,
    "cross_attention": CrossAttentionFusion,
    "optimal_transport": OptimalTransportFusion,
}


class SequentialCameraStage:
    """Camera detector run after the LiDAR detector.

    Each LiDAR candidate's decoded centre is projected into the view where it
    lands closest to the image centre.  ``inherit_feat`` keeps the LiDAR
    instance feature; ``reinit_feat`` replaces it with the image feature
    fetched at the projection.  One deformable-attention + FFN layer, then a
    LiDAR-view head anchored at the LiDAR centres.
    """

    def __init__(self, store, name, cfg: nn.AttentionConfig, grid: BevGrid, num_classes, mode):
        if mode not in ("inherit_feat", "reinit_feat"):
            raise ValueError(f"unknown sequential mode {mode!r}")
        self.mode = mode
        self.grid = grid
        self.pos = nn.MLP(store, f"{name}.pos", [2, cfg.dim, cfg.dim])
        self.deform = nn.DeformableAttention(store, f"{name}.deform", cfg)
        self.norm = nn.LayerNorm(store, f"{name}.norm", cfg.dim)
        self.ffn = nn.FFN(store, f"{name}.ffn", cfg.dim)
        self.head = PredictionHead(store, f"{name}.head", cfg.dim, num_classes)

    @staticmethod
    def assign_views(centers, cams):
        n = len(centers)
        views, refs = np.zeros(n, dtype=np.int64), np.full((n, 2), 0.5)
        best = np.full(n, np.inf)
        for v, cam in enumerate(cams):
            uv, _, ok = project_points(centers, cam)
            norm = np.where(ok[:, None], uv / np.array([cam.width, cam.height]), 0.5)
            dist = np.where(ok, np.abs(norm - 0.5).max(axis=1), np.inf)
            better = dist < best
            views[better], refs[better], best[better] = v, norm[better], dist[better]
        return views, np.clip(refs, 0.0, 1.0)

    def __call__(self, q_l: QuerySet, centers, pyramid, cams):
        dtype = q_l.features.dtype
        views, refs = self.assign_views(centers, cams)
        if self.mode == "inherit_feat":
            x = q_l.features
        else:
            parts, order = [], []
            for v in np.unique(views):
                rows = np.nonzero(views == v)[0]
                maps = [lvl[int(v)].transpose(1, 2, 0) for lvl in pyramid]
                parts.append(fetch_features(maps, refs[rows]))
                order.append(rows)
            x = _reorder(parts, order)
        parts, order = [], []
        for v in np.unique(views):
            rows = np.nonzero(views == v)[0]
            maps = [lvl[int(v)].transpose(1, 2, 0) for lvl in pyramid]
            map_pos = [self.pos(nn.Tensor(nn.level_pixel_centres(m.shape[0], m.shape[1]).astype(dtype)))
                       for m in maps]
            values = self.deform.project_values(maps, map_pos)
            xv = nn.gather_rows(x, rows)
            pv = self.pos(nn.Tensor(refs[rows].astype(dtype)))
            parts.append(xv + self.deform(xv + pv, values, refs[rows].astype(dtype)))
            order.append(rows)
        x = self.ffn(self.norm(_reorder(parts, order)))
        return q_l.with_features(x), self.head(x)


def _reorder(parts, order):
    order = np.concatenate(order)
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    return nn.gather_rows(nn.concat(parts, axis=0), inv)


def attention_rows(scene_id, weights, scores, n_lidar, threshold):
    """Rows (scene_id, det_index, src_index, src_modality, weight) for fused detections above threshold."""
    rows = []
    for i in np.nonzero(np.asarray(scores) >= threshold)[0]:
        for j in range(weights.shape[1]):
            rows.append((int(scene_id), int(i), int(j), "lidar" if j < n_lidar else "camera", float(weights[i, j])))
    return rows
