"""Command-line entry point: gen, train, eval, infer, gradcheck, ablate.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 failed check.
SPARSEFUSE_THREADS caps BLAS threads and the scene-generation worker pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradsuite
from .config import STRATEGIES, SEQUENTIAL_MODES, ConfigError, RunConfig, load_config
from .evaluation import BranchDetections, dumps_report, evaluate, has_nan
from .fusion import attention_rows
from .model import SparseFusionModel
from .nncore.checkpoint import CheckpointError
from .scenegen import SceneParseError, generate_scene, make_split, scene_seed, write_dataset
from .training import (CheckpointMismatch, NumericalError, evaluate_model, load_checkpoint, load_scenes,
                       predict, save_checkpoint, train_stage1, train_stage2)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("sparsefuse")


class CheckFailed(RuntimeError):
    pass


def thread_cap():
    raw = os.environ.get("SPARSEFUSE_THREADS", "")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SPARSEFUSE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("SPARSEFUSE_THREADS must be at least 1")
    return n


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        key = "data_seed" if args.command == "gen" else "seed"
        cfg = cfg.replace(train={key: args.seed})
    print("# effective config", file=sys.stderr)
    sys.stderr.write(cfg.to_json())
    return cfg


def _write(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def _write_report(path, report):
    if has_nan(report):
        raise NumericalError(f"report for {path} contains NaN")
    _write(path, dumps_report(report))


# ------------------------------------------------------------------ commands

def _gen_one(job):
    seed, sid, gen_cfg = job
    return generate_scene(seed, gen_cfg, scene_id=sid)


def cmd_gen(cfg: RunConfig, args):
    t = cfg.train
    split = make_split(t.n_train, t.n_val, t.data_seed)
    ids = list(split.train + split.val)
    jobs = [(scene_seed(split.seed, sid), sid, cfg.generator) for sid in ids]
    workers = thread_cap() or 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            made = list(ex.map(_gen_one, jobs, chunksize=8))
    else:
        made = [_gen_one(j) for j in jobs]
    write_dataset(args.out, split, dict(zip(ids, made)))
    log.info("wrote %d train / %d val scenes to %s", len(split.train), len(split.val), args.out)


def _history_rows(history):
    return [{"stage": h.stage, "epoch": h.epoch, "loss": h.loss, "parts": h.parts} for h in history]


def cmd_train(cfg: RunConfig, args):
    train, val = load_scenes(cfg)
    out = args.out
    history = []
    if args.stage in ("1", "all"):
        model, hist = train_stage1(cfg, train)
        history += _history_rows(hist)
        save_checkpoint(os.path.join(out, "stage1.ckpt"), model.store, cfg, 1)
        _write_report(os.path.join(out, "metrics_stage1.json"), evaluate_model(model, val, full=False))
        stage1_state = model.store.state()
    else:
        if not args.init:
            raise ConfigError("--stage 2 needs --init <stage-1 checkpoint>")
        stage1_state, _ = load_checkpoint(args.init, cfg, args.override)
    if args.stage in ("2", "all"):
        model, hist = train_stage2(cfg, stage1_state, train)
        history += _history_rows(hist)
        save_checkpoint(os.path.join(out, "stage2.ckpt"), model.store, cfg, 2)
        _write_report(os.path.join(out, "metrics_stage2.json"), evaluate_model(model, val, full=True))
    _write(os.path.join(out, "history.json"), json.dumps(history, indent=2) + "\n")


def _load_model(cfg, args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    state, meta = load_checkpoint(args.checkpoint, cfg, args.override)
    model = SparseFusionModel(cfg)
    model.store.load_state(state, strict=False)
    return model, int(meta.get("stage", 2))


def oracle_report(scenes, num_classes):
    """Metrics for predictions copied from the ground truth (sanity baseline)."""
    dets = []
    for s in scenes:
        xy = np.array([o.box.center[:2] for o in s.objects]).reshape(-1, 2)
        cats = np.array([o.category for o in s.objects], dtype=np.int64)
        dets.append(BranchDetections(xy, np.ones(len(cats)), cats))
    return {"num_scenes": len(scenes),
            "branches": {"oracle": evaluate(dets, [s.objects for s in scenes], num_classes).to_dict()}}


def cmd_eval(cfg: RunConfig, args):
    _, val = load_scenes(cfg)
    if args.oracle:
        report = oracle_report(val, cfg.num_classes)
        branch = "oracle"
    else:
        model, stage = _load_model(cfg, args)
        report = evaluate_model(model, val, full=stage >= 2)
        branch = "fused" if stage >= 2 else "lidar"
    _write_report(os.path.join(args.out, "metrics.json"), report)
    got = report["branches"][branch]["mAP_by_threshold"]["2"]
    print(f"{branch} mAP@2m {got:.4f}")
    if args.require_map is not None and got < args.require_map:
        raise CheckFailed(f"{branch} mAP@2m {got:.4f} < required {args.require_map}")


def cmd_infer(cfg: RunConfig, args):
    _, val = load_scenes(cfg)
    scenes = val[:args.num_scenes] if args.num_scenes else val
    model, stage = _load_model(cfg, args)
    full = stage >= 2
    if args.dump_attention and (not full or cfg.model.sequential or cfg.model.strategy != "self_attention"):
        raise ConfigError("--dump-attention needs a stage-2 self_attention checkpoint")
    det_lines = ["scene_id\tdet_index\tsource\tcategory\tscore\tx\ty"]
    att_lines = ["scene_id\tdet_index\tsrc_index\tsrc_modality\tweight"]
    for s in scenes:
        pred, res = predict(model, s, full)
        branch = pred.fused if full else pred.lidar
        source = "fused" if full else "lidar"
        for i in range(len(branch.scores)):
            det_lines.append(f"{s.scene_id}\t{i}\t{source}\t{branch.categories[i]}\t{branch.scores[i]:.6f}"
                             f"\t{branch.xy[i, 0]:.4f}\t{branch.xy[i, 1]:.4f}")
        if args.dump_attention:
            w = model.fusion.attention_weights()
            for row in attention_rows(s.scene_id, w, branch.scores, cfg.model.n_lidar, args.threshold):
                att_lines.append("{}\t{}\t{}\t{}\t{:.6f}".format(*row))
    _write(os.path.join(args.out, "detections.tsv"), "\n".join(det_lines) + "\n")
    if args.dump_attention:
        _write(os.path.join(args.out, "attention.tsv"), "\n".join(att_lines) + "\n")
    log.info("wrote detections for %d scenes", len(scenes))


def cmd_gradcheck(cfg: RunConfig, args):
    lines = []
    results = gradsuite.run_suite(seed=cfg.train.seed, reps=args.reps)
    ok = gradsuite.main_report(results, out=lines.append)
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    _write(os.path.join(args.out, "gradcheck.txt"), text)
    if not ok:
        raise CheckFailed("gradient check failed")


ABLATION_VARIANTS = [("strategy", s) for s in STRATEGIES] + [("sequential", m) for m in SEQUENTIAL_MODES]


def cmd_ablate(cfg: RunConfig, args):
    train, val = load_scenes(cfg)
    if args.init:
        stage1_state, _ = load_checkpoint(args.init, cfg, args.override)
    else:
        stage1_state = train_stage1(cfg, train)[0].store.state()
    rows = []
    for kind, name in ABLATION_VARIANTS:
        change = {"strategy": name, "sequential": ""} if kind == "strategy" else {"sequential": name}
        vcfg = cfg.replace(model=change)
        model, _ = train_stage2(vcfg, stage1_state, train)
        report = evaluate_model(model, val, full=True)
        fused = report["branches"]["fused"]
        lidar = report["branches"]["lidar"]
        rows.append((kind, name, fused["mAP"], fused["mAP_by_threshold"]["2"], lidar["mAP_by_threshold"]["2"],
                     len(predict(model, val[0])[1].fused.boxes.scores) if val else 0))
    header = "kind\tvariant\tmAP\tmAP@2m\tlidar_mAP@2m\toutputs"
    text = "\n".join([header] + ["{}\t{}\t{:.4f}\t{:.4f}\t{:.4f}\t{}".format(*r) for r in rows]) + "\n"
    sys.stdout.write(text)
    _write(os.path.join(args.out, "ablation.tsv"), text)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def build_parser():
    p = argparse.ArgumentParser(prog="sparsefuse")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="overrides train.seed (data_seed for gen)")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--override", action="store_true", help="accept checkpoints from another config")

    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="two-stage training")
    t.add_argument("--stage", choices=("1", "2", "all"), default="all")
    t.add_argument("--init", help="stage-1 checkpoint for --stage 2")
    e = sub.add_parser("eval", parents=[common], help="metrics on the val split")
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="score ground truth as predictions")
    e.add_argument("--require-map", type=float, help="exit 4 when mAP@2m falls below this")
    i = sub.add_parser("infer", parents=[common], help="per-detection dump on val scenes")
    i.add_argument("--checkpoint")
    i.add_argument("--num-scenes", type=int, default=0)
    i.add_argument("--dump-attention", action="store_true")
    i.add_argument("--threshold", type=float, default=0.3, help="score threshold for the attention dump")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--reps", type=int, default=5, help="random configurations per case")
    a = sub.add_parser("ablate", parents=[common], help="fusion strategy / sequential comparison")
    a.add_argument("--init", help="stage-1 checkpoint (trained when omitted)")
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        with threadpool_limits(limits=thread_cap()):
            COMMANDS[args.command](cfg, args)
    except (ConfigError, CheckpointMismatch, CheckpointError, SceneParseError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK
