"""Centre-distance AP and the per-modality recall breakdown."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
RANGE_BINS = (0.0, 10.0, 20.0, 30.0, math.inf)
RECALL_RADIUS = 2.0


def match_greedy(pred_xy, pred_scores, pred_cats, gt_xy, gt_cats, threshold):
    """TP flags in score-descending order (stable for ties).

    Each prediction takes the nearest still-unmatched GT of its class within
    ``threshold`` metres.  Returns (order, flags).
    """
    pred_xy = np.asarray(pred_xy, dtype=np.float64).reshape(-1, 2)
    gt_xy = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    pred_cats, gt_cats = np.asarray(pred_cats), np.asarray(gt_cats)
    order = np.argsort(-np.asarray(pred_scores, dtype=np.float64), kind="stable")
    taken = np.zeros(len(gt_xy), dtype=bool)
    flags = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        d = np.linalg.norm(gt_xy - pred_xy[i], axis=1)
        d[(gt_cats != pred_cats[i]) | taken] = np.inf
        if len(d) and d.min() <= threshold:
            j = int(np.argmin(d))
            taken[j] = True
            flags[rank] = True
    return order, flags


def average_precision(flags, n_gt):
    """All-points interpolated area under the precision-recall curve."""
    flags = np.asarray(flags, dtype=bool)
    if n_gt <= 0 or len(flags) == 0:
        return 0.0
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, len(flags) + 1)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


@dataclass
class BranchDetections:
    """Flat arrays for one scene's detections in the LiDAR frame."""
    xy: np.ndarray
    scores: np.ndarray
    categories: np.ndarray

    @classmethod
    def from_detections(cls, dets):
        if not dets:
            return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=np.int64))
        return cls(np.array([d.box.center[:2] for d in dets]), np.array([d.score for d in dets]),
                   np.array([d.category for d in dets], dtype=np.int64))


def _gt_arrays(objects):
    if not objects:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    return (np.array([o.box.center[:2] for o in objects]),
            np.array([o.category for o in objects], dtype=np.int64))


def evaluate(scene_dets, scene_objects, num_classes, thresholds=THRESHOLDS):
    """Per-class AP at each threshold and their mean.

    scene_dets: per scene, a BranchDetections (or list of Detection);
    scene_objects: per scene, list of ObjectSpec.  Classes with no GT in the
    whole set are left out of the mean.
    """
    ap = {}
    for k in range(num_classes):
        n_gt = 0
        per_thr = {t: ([], []) for t in thresholds}
        for dets, objs in zip(scene_dets, scene_objects):
            if not isinstance(dets, BranchDetections):
                dets = BranchDetections.from_detections(dets)
            gxy, gcat = _gt_arrays(objs)
            gmask = gcat == k
            n_gt += int(gmask.sum())
            pmask = dets.categories == k
            for t in thresholds:
                order, flags = match_greedy(dets.xy[pmask], dets.scores[pmask], dets.categories[pmask],
                                            gxy[gmask], gcat[gmask], t)
                per_thr[t][0].append(dets.scores[pmask][order])
                per_thr[t][1].append(flags)
        if n_gt == 0:
            continue
        ap[k] = {}
        for t in thresholds:
            scores = np.concatenate(per_thr[t][0]) if per_thr[t][0] else np.zeros(0)
            flags = np.concatenate(per_thr[t][1]) if per_thr[t][1] else np.zeros(0, dtype=bool)
            rank = np.argsort(-scores, kind="stable")
            ap[k][t] = average_precision(flags[rank], n_gt)
    return MetricReport(ap, tuple(thresholds))


@dataclass
class MetricReport:
    ap: dict  # class -> threshold -> AP

    thresholds: tuple = THRESHOLDS

    def map_at(self, threshold):
        vals = [self.ap[k][threshold] for k in self.ap]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def map(self):
        vals = [self.ap[k][t] for k in self.ap for t in self.thresholds]
        return float(np.mean(vals)) if vals else 0.0

    def to_dict(self):
        return {
            "mAP": self.map,
            "mAP_by_threshold": {f"{t:g}": self.map_at(t) for t in self.thresholds},
            "AP": {str(k): {f"{t:g}": self.ap[k][t] for t in self.thresholds} for k in sorted(self.ap)},
        }


def _recalled(dets: BranchDetections, xy, cat, radius):
    if len(dets.scores) == 0:
        return False
    m = dets.categories == cat
    if not m.any():
        return False
    return bool(np.linalg.norm(dets.xy[m] - xy, axis=1).min() <= radius)


CELLS = ("lidar_only", "camera_only", "both", "neither")


def modality_recall(lidar_dets, camera_dets, objects_per_scene, num_classes,
                    radius=RECALL_RADIUS, bins=RANGE_BINS):
    """Per class and range ring, how many GT objects each branch recalls.

    A GT is recalled by a branch when that branch has any prediction of the
    right class within ``radius`` metres of its BEV centre (scores ignored).
    Returns {"by_class": {k: {cell: n}}, "by_range": {label: {cell: n}}, "total": {cell: n}}.
    """
    def empty():
        return {c: 0 for c in CELLS}

    by_class = {k: empty() for k in range(num_classes)}
    labels = [f"{lo:g}-{hi:g}" for lo, hi in zip(bins[:-1], bins[1:])]
    by_range = {lab: empty() for lab in labels}
    total = empty()
    for ld, cd, objs in zip(lidar_dets, camera_dets, objects_per_scene):
        if not isinstance(ld, BranchDetections):
            ld = BranchDetections.from_detections(ld)
        if not isinstance(cd, BranchDetections):
            cd = BranchDetections.from_detections(cd)
        for o in objs:
            xy = o.box.center[:2]
            a = _recalled(ld, xy, o.category, radius)
            b = _recalled(cd, xy, o.category, radius)
            cell = "both" if a and b else "lidar_only" if a else "camera_only" if b else "neither"
            r = float(np.hypot(*xy))
            lab = labels[int(np.searchsorted(bins, r, side="right")) - 1]
            by_class[o.category][cell] += 1
            by_range[lab][cell] += 1
            total[cell] += 1
    return {"by_class": {str(k): v for k, v in by_class.items()}, "by_range": by_range, "total": total}


def has_nan(obj):
    if isinstance(obj, dict):
        return any(has_nan(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return any(has_nan(v) for v in obj)
    return isinstance(obj, float) and math.isnan(obj)


def dumps_report(report: dict) -> str:
    """Report JSON with keys in insertion order (callers build them in a fixed order)."""
    return json.dumps(report, indent=2) + "\n"
