"""Two-stage training, prediction and checkpoint handling."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .nncore import checkpoint as ckpt
from .config import RunConfig
from .detector import (camera_targets, level_shapes_of, lidar_box_vectors, splat_gt_heatmap,
                       splat_image_heatmaps)
from .evaluation import BranchDetections, evaluate, modality_recall
from .fusion import camera_boxes_to_lidar
from .losses import detection_loss, total_loss
from .model import FROZEN_IN_STAGE2, SparseFusionModel
from .scenegen import generate_split, make_split, read_dataset

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


# ------------------------------------------------------------------ targets

@dataclass
class SceneTargets:
    lidar_heat: np.ndarray         # (K, H, W)
    lidar_cats: np.ndarray
    lidar_vec: np.ndarray          # (M, 10)
    camera_heat: list              # per level (V, K, H_l, W_l)
    camera_cats: list              # per view
    camera_vec: list               # per view (M_v, 10)


def build_targets(scene, cfg: RunConfig, level_shapes=None):
    k = cfg.num_classes
    objs = scene.objects
    lidar_heat = splat_gt_heatmap(objs, cfg.grid, k)
    cats = np.array([o.category for o in objs], dtype=np.int64)
    vec = lidar_box_vectors(objs, cfg.grid)
    if level_shapes is None:
        level_shapes = level_shapes_of(cfg.generator.image_size, cfg.model.levels)
    thr = cfg.scaled_thresholds()
    per_view_heat, cam_cats, cam_vec = [], [], []
    for cam in scene.cameras:
        tg = camera_targets(objs, cam, thr)
        per_view_heat.append(splat_image_heatmaps(tg, cam.image_size, level_shapes, k))
        cam_cats.append(np.array([t.category for t in tg], dtype=np.int64))
        cam_vec.append(np.array([t.box_vector for t in tg]).reshape(-1, 10))
    camera_heat = [np.stack([v[lvl] for v in per_view_heat]) for lvl in range(len(level_shapes))]
    return SceneTargets(lidar_heat, cats, vec, camera_heat, cam_cats, cam_vec)


# ------------------------------------------------------------------ losses

def heat_probs(logits):
    return nn.sigmoid(logits)


def lidar_stage_loss(res, tg: SceneTargets, cfg: RunConfig):
    l_init = nn.gaussian_focal_loss(heat_probs(res.lidar_heat.reshape(*tg.lidar_heat.shape)), tg.lidar_heat)
    l_lidar, _ = detection_loss(res.lidar.out["cls"], res.lidar.vec, tg.lidar_cats, tg.lidar_vec, cfg.loss)
    return total_loss(l_init, lidar=l_lidar, alpha=cfg.loss.alpha, beta=cfg.loss.beta, gamma=cfg.loss.gamma)


def full_loss(res, tg: SceneTargets, cfg: RunConfig):
    lc = cfg.loss
    pred = nn.concat([res.lidar_heat.reshape(-1)] + [h.reshape(-1) for h in res.camera_heat], axis=0)
    target = np.concatenate([tg.lidar_heat.ravel()] + [h.ravel() for h in tg.camera_heat])
    l_init = nn.gaussian_focal_loss(heat_probs(pred), target)
    l_lidar, _ = detection_loss(res.lidar.out["cls"], res.lidar.vec, tg.lidar_cats, tg.lidar_vec, lc)
    view_ids = res.camera.queries.view_ids
    l_cam = 0.0
    for v in range(len(tg.camera_cats)):
        rows = np.nonzero(view_ids == v)[0]
        if len(rows) == 0:
            continue
        lv, _ = detection_loss(res.camera.out["cls"], res.camera.vec, tg.camera_cats[v], tg.camera_vec[v],
                               lc, rows=rows)
        l_cam = lv if isinstance(l_cam, float) else l_cam + lv
    l_trans = 0.0
    if res.transformed is not None:
        l_trans, _ = detection_loss(res.transformed.out["cls"], res.transformed.vec, tg.lidar_cats,
                                    tg.lidar_vec, lc)
    l_fused, _ = detection_loss(res.fused.out["cls"], res.fused.vec, tg.lidar_cats, tg.lidar_vec, lc)
    return total_loss(l_init, l_cam, l_trans, l_lidar, l_fused, lc.alpha, lc.beta, lc.gamma)


# ------------------------------------------------------------------ data

def load_scenes(cfg: RunConfig):
    """(train scenes, val scenes): read from data_dir when set, else generated in memory."""
    t = cfg.train
    if t.data_dir and os.path.exists(os.path.join(t.data_dir, "split.json")):
        split, scenes = read_dataset(t.data_dir)
    else:
        split = make_split(t.n_train, t.n_val, t.data_seed)
        scenes = generate_split(split, cfg.generator)
    return [scenes[i] for i in split.train], [scenes[i] for i in split.val]


# ------------------------------------------------------------------ training

@dataclass
class EpochLog:
    stage: int
    epoch: int
    loss: float
    parts: dict


def _check_finite(value, what):
    if not np.isfinite(value):
        raise NumericalError(f"{what} is not finite ({value})")


def run_epochs(model: SparseFusionModel, scenes, targets, stage, epochs, cfg: RunConfig, on_epoch=None):
    t = cfg.train
    store = model.store
    opt = nn.AdamW(store, lr=t.lr, weight_decay=t.weight_decay)
    forward = model.forward_lidar if stage == 1 else model.forward
    loss_fn = lidar_stage_loss if stage == 1 else full_loss
    history = []
    trainable = [name for name, _ in store.trainable()]
    for epoch in range(epochs):
        rng = np.random.default_rng([t.seed, stage, epoch])
        order = rng.permutation(len(scenes))
        total, parts_sum = 0.0, {}
        for start in range(0, len(order), t.batch_size):
            batch = order[start:start + t.batch_size]
            grads = {}
            for i in batch:
                store.zero_grad()
                res = forward(scenes[i])
                br = loss_fn(res, targets[i], cfg)
                _check_finite(br.total, f"stage {stage} loss")
                (br.tensor * (1.0 / len(batch))).backward()
                for name in trainable:
                    g = store[name].grad
                    if g is None:
                        g = np.zeros_like(store[name].data)
                    grads[name] = g if name not in grads else grads[name] + g
                total += br.total
                for k, v in br.as_dict().items():
                    parts_sum[k] = parts_sum.get(k, 0.0) + v
            opt.step(grads)
        n = max(1, len(scenes))
        entry = EpochLog(stage, epoch, total / n, {k: v / n for k, v in parts_sum.items()})
        history.append(entry)
        log.info("stage %d epoch %d loss %.4f", stage, epoch, entry.loss)
        if on_epoch is not None:
            on_epoch(entry)
    return history


def train_stage1(cfg: RunConfig, scenes=None, targets=None, on_epoch=None):
    if scenes is None:
        scenes, _ = load_scenes(cfg)
    model = SparseFusionModel(cfg)
    # only the LiDAR branch (plus semantic transfer when enabled) learns in stage 1
    live = ("lidar.", "semantic.", "camera.backbone.", "camera.geometric.") \
        if cfg.model.stage1_semantic_transfer else ("lidar.",)
    groups = {name.split(".")[0] + "." for name in model.store.params}
    groups |= {".".join(name.split(".")[:2]) + "." for name in model.store.params if name.startswith("camera.")}
    for g in sorted(groups):
        if not any(g.startswith(p) or p.startswith(g) for p in live):
            model.store.frozen_prefixes.add(g)
    if targets is None:
        targets = [build_targets(s, cfg) for s in scenes]
    history = run_epochs(model, scenes, targets, 1, cfg.train.stage1_epochs, cfg, on_epoch)
    return model, history


def train_stage2(cfg: RunConfig, stage1_state, scenes=None, targets=None, on_epoch=None):
    """Load stage-1 LiDAR weights, freeze the pillar encoder, train everything else."""
    if scenes is None:
        scenes, _ = load_scenes(cfg)
    model = SparseFusionModel(cfg)
    keep = ("lidar.", "semantic.", "camera.backbone.", "camera.geometric.") \
        if cfg.model.stage1_semantic_transfer else ("lidar.",)
    lidar_only = {k: v for k, v in stage1_state.items() if k.startswith(keep)}
    model.store.load_state(lidar_only, strict=False)
    for prefix in FROZEN_IN_STAGE2:
        model.store.frozen_prefixes.add(prefix)
    model.freeze_lidar_backbone = True
    if targets is None:
        targets = [build_targets(s, cfg) for s in scenes]
    history = run_epochs(model, scenes, targets, 2, cfg.train.stage2_epochs, cfg, on_epoch)
    return model, history


# ------------------------------------------------------------------ prediction / evaluation

@dataclass
class ScenePredictions:
    lidar: BranchDetections
    camera: BranchDetections = None        # before view transform, LiDAR frame
    camera_vt: BranchDetections = None     # after view transform
    fused: BranchDetections = None


def _branch(boxes):
    return BranchDetections(boxes.centers[:, :2].copy(), np.asarray(boxes.scores, dtype=np.float64),
                            np.asarray(boxes.categories, dtype=np.int64))


def predict(model: SparseFusionModel, scene, full=True):
    with nn.no_grad():
        res = model.forward(scene) if full else model.forward_lidar(scene)
    pred = ScenePredictions(_branch(res.lidar.boxes))
    if full:
        cam = camera_boxes_to_lidar(res.camera.boxes, scene.cameras)
        pred.camera = BranchDetections(cam.centers[:, :2], np.asarray(res.camera.boxes.scores, dtype=np.float64),
                                       np.asarray(res.camera.boxes.categories, dtype=np.int64))
        if res.transformed is not None:
            pred.camera_vt = _branch(res.transformed.boxes)
        pred.fused = _branch(res.fused.boxes)
    return pred, res


def evaluate_model(model: SparseFusionModel, scenes, full=True):
    """Metric report dict with a fixed key order."""
    preds = [predict(model, s, full)[0] for s in scenes]
    objs = [s.objects for s in scenes]
    k = model.cfg.num_classes
    report = {"num_scenes": len(scenes), "branches": {}}
    names = ("lidar", "camera", "camera_vt", "fused") if full else ("lidar",)
    for name in names:
        dets = [getattr(p, name) for p in preds]
        if any(d is None for d in dets):
            continue
        report["branches"][name] = evaluate(dets, objs, k).to_dict()
    if full:
        n_l = model.cfg.model.n_lidar
        lidar_part = [BranchDetections(p.fused.xy[:n_l], p.fused.scores[:n_l], p.fused.categories[:n_l])
                      if p.camera_vt is not None else p.lidar for p in preds]
        camera_part = [BranchDetections(p.fused.xy[n_l:], p.fused.scores[n_l:], p.fused.categories[n_l:])
                       if p.camera_vt is not None else p.camera for p in preds]
        if model.cfg.model.strategy in ("self_attention", "mlp") and not model.cfg.model.sequential:
            report["modality_recall"] = modality_recall(lidar_part, camera_part, objs, k)
        else:
            report["modality_recall"] = modality_recall([p.lidar for p in preds], [p.camera for p in preds], objs, k)
    return report


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(path, store: nn.ParamStore, cfg: RunConfig, stage):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    ckpt.save(path, store.state())
    meta = {"config_hash": cfg.hash(), "stage": stage, "format": "sparsefuse-checkpoint-1"}
    with open(path + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_checkpoint(path, cfg: RunConfig = None, override=False):
    """(state dict, meta).  Rejects a config-hash mismatch unless ``override``."""
    state = ckpt.load(path)
    meta_path = path + ".meta.json"
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
    if cfg is not None and not override and meta.get("config_hash") not in (None, cfg.hash()):
        raise CheckpointMismatch(f"checkpoint {path} was written for config {meta['config_hash']}, "
                                 f"not {cfg.hash()}")
    return state, meta
