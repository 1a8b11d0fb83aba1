"""Training objectives and prediction-to-GT assignment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import nncore as nn

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class MatchResult:
    pairs: np.ndarray          # (k, 2) pred index, gt index
    unmatched: np.ndarray      # prediction indices without a GT
    cost: float

    @property
    def pred_idx(self):
        return self.pairs[:, 0]

    @property
    def gt_idx(self):
        return self.pairs[:, 1]


def hungarian_match(cost) -> MatchResult:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise nn.ShapeError(f"cost matrix must be 2-D, got {cost.shape}")
    n = cost.shape[0]
    if cost.size == 0:
        return MatchResult(np.zeros((0, 2), dtype=np.int64), np.arange(n), 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    pairs = np.stack([rows, cols], axis=1).astype(np.int64)
    unmatched = np.setdiff1d(np.arange(n), rows)
    return MatchResult(pairs, unmatched, float(cost[rows, cols].sum()))


def focal_class_cost(logits, gt_cats, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    """(N_pred, N_gt) cost: positive minus negative focal term at the GT class."""
    z = np.asarray(logits, dtype=np.float64)[:, gt_cats]
    p = 1.0 / (1.0 + np.exp(-z))
    pos = alpha * (1 - p) ** gamma * np.logaddexp(0, -z)
    neg = (1 - alpha) * p ** gamma * np.logaddexp(0, z)
    return pos - neg


def match_cost(logits, pred_vec, gt_cats, gt_vec, cls_weight=1.0, l1_weight=1.0):
    return (cls_weight * focal_class_cost(logits, gt_cats)
            + l1_weight * cdist(np.asarray(pred_vec, dtype=np.float64), gt_vec, "cityblock"))


def detection_loss(logits, pred_vec, gt_cats, gt_vec, cfg, rows=None):
    """Hungarian-matched focal classification + L1 regression.

    logits (N, K) and pred_vec (N, 10) are tensors; ``rows`` restricts the
    loss to a subset of predictions (used for per-view camera matching).
    Returns (loss tensor, MatchResult with indices into the subset).
    """
    if rows is not None:
        logits = nn.gather_rows(logits, rows)
        pred_vec = nn.gather_rows(pred_vec, rows)
    gt_cats = np.asarray(gt_cats, dtype=np.int64)
    gt_vec = np.asarray(gt_vec, dtype=np.float64).reshape(-1, 10)
    n, k = logits.shape
    if len(gt_cats):
        m = hungarian_match(match_cost(logits.data, pred_vec.data, gt_cats, gt_vec, cfg.cls_cost, cfg.l1_cost))
    else:
        m = MatchResult(np.zeros((0, 2), dtype=np.int64), np.arange(n), 0.0)
    target = np.zeros((n, k), dtype=logits.dtype)
    target[m.pred_idx, gt_cats[m.gt_idx]] = 1.0
    norm = 1.0 / max(1, len(gt_cats))
    loss = nn.sigmoid_focal_loss(logits, target, FOCAL_ALPHA, FOCAL_GAMMA) * (cfg.cls_weight * norm)
    if len(m.pairs):
        diff = nn.gather_rows(pred_vec, m.pred_idx) - nn.Tensor(gt_vec[m.gt_idx].astype(pred_vec.dtype))
        loss = loss + nn.tabs(diff).sum() * (cfg.l1_weight * norm)
    return loss, m


@dataclass
class LossBreakdown:
    l_init: float = 0.0
    l_detect_camera: float = 0.0
    l_detect_trans: float = 0.0
    l_detect_lidar: float = 0.0
    l_detect_fusion: float = 0.0
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 1.0
    total: float = 0.0
    tensor: object = field(default=None, repr=False)

    def as_dict(self):
        return {k: getattr(self, k) for k in ("l_init", "l_detect_camera", "l_detect_trans",
                                              "l_detect_lidar", "l_detect_fusion", "total")}


def _value(x):
    return float(x.data) if isinstance(x, nn.Tensor) else float(x)


def total_loss(l_init, camera=0.0, trans=0.0, lidar=0.0, fusion=0.0, alpha=0.1, beta=1.0, gamma=1.0):
    """alpha * l_init + beta * (gamma * camera + trans + lidar + fusion).

    Components may be tensors or plain numbers; the result's ``tensor``
    field is differentiable when any component is.
    """
    detect = gamma * camera + trans + lidar + fusion
    total = alpha * l_init + beta * detect
    return LossBreakdown(_value(l_init), _value(camera), _value(trans), _value(lidar), _value(fusion),
                         alpha, beta, gamma, _value(total), total)


def gaussian_focal_loss(pred_probs, target):
    """Heatmap loss on probabilities; see :func:`nncore.gaussian_focal_loss`."""
    return nn.gaussian_focal_loss(pred_probs, target)
