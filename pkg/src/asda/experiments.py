"""Experiment orchestration: train, evaluate, ablation sweeps."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from asda.config import ExperimentConfig
from asda.evaluation import evaluate_retrieval, groundtruth_from_labels
from asda.model import ASDAModel
from asda.plotting import plot_ablation, plot_training
from asda.postprocess import apply_whitening, fit_whitening, matched_pairs, multiscale_descriptor
from asda.synth import SMALL_AREA, SynthDataset, generate_dataset, split
from asda.training import EpochMetrics, OptimizerConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"
EVAL_MODES = ("ss", "ms", "lw", "ms+lw")
ABLATION_AXES = {
    "L": ("scale_count", (0, 1, 2, 3, 4, 5)),
    "dim": ("dim", (8, 16, 32, 64)),
    "proposal": ("proposal", ("hda", "sda", "asda")),
    "pooling": ("pooling", ("avg", "gem", "mac")),
    "postprocess": (None, ("ss", "ms+lw")),
}


def build_model(cfg: ExperimentConfig) -> ASDAModel:
    return ASDAModel.build(channels=cfg.channels, steps=cfg.effective_steps, theta=cfg.theta,
                           scales=cfg.scale_count, dim=cfg.effective_dim, pooling=cfg.pooling,
                           gem_p=cfg.gem_p, proposal="hard" if cfg.proposal == "hda" else "soft",
                           seed=cfg.seed, trainable_backbone=cfg.trainable_backbone)


def optimizer_config(cfg: ExperimentConfig) -> OptimizerConfig:
    return OptimizerConfig(lr=cfg.lr, lr_decay=cfg.lr_decay, beta1=cfg.beta1, beta2=cfg.beta2,
                           weight_decay=cfg.weight_decay, margin=cfg.margin, batch_size=cfg.batch_size,
                           negatives=cfg.negatives)


def load_data(cfg: ExperimentConfig):
    ds = generate_dataset(cfg.seed, cfg.n_instances, cfg.views_per_instance, cfg.image_size)
    return ds, split(ds, cfg.holdout_fraction, cfg.seed)


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str]):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})
    os.replace(tmp, path)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def load_model_checkpoint(cfg: ExperimentConfig, model: ASDAModel, path) -> dict:
    state = load_checkpoint(path)
    if state["config_hash"] != cfg.hash():
        raise ValueError(f"checkpoint {path} was written for config hash {state['config_hash']}, "
                         f"current config hashes to {cfg.hash()}")
    model.load_state_dict(state["model"])
    return state


@dataclass
class TrainResult:
    model: ASDAModel
    history: list
    checkpoint: Path | None
    metrics_csv: Path | None


def run_train(cfg: ExperimentConfig, out_dir=None, resume: bool = False, data=None) -> TrainResult:
    """Generate data, train, and write checkpoint + per-epoch metrics."""
    cfg.validate()
    ds, sp = data or load_data(cfg)
    model = build_model(cfg)
    start, opt_state = 0, None
    ckpt = metrics_csv = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
        ckpt = out / CHECKPOINT_NAME
        metrics_csv = out / "metrics.csv"
        if resume and ckpt.exists():
            state = load_model_checkpoint(cfg, model, ckpt)
            start, opt_state = state["epoch"], state["optimizer"]
            log.info("resuming from %s at epoch %d", ckpt, start)
        elif metrics_csv.exists():
            metrics_csv.unlink()

    def on_epoch(m: EpochMetrics):
        if metrics_csv is None:
            return
        new = not metrics_csv.exists()
        with open(metrics_csv, "a", newline="") as fh:
            if new:
                fh.write("epoch,lr,train_loss,val_loss\n")
            fh.write(f"{m.epoch},{m.lr!r},{m.train_loss!r},{m.val_loss!r}\n")

    history = train(model, ds.images, ds.labels, sp.train, optimizer_config(cfg), cfg.epochs, seed=cfg.seed,
                    val_idx=sp.validation, checkpoint_path=ckpt, config_hash=cfg.hash(), start_epoch=start,
                    optimizer_state=opt_state, on_epoch=on_epoch)
    if ckpt is not None and not ckpt.exists():
        save_checkpoint(ckpt, model, None, start, cfg.hash())
    if out_dir is not None and history:
        plot_training(history, Path(out_dir) / "training.png", title=f"{cfg.proposal.upper()} training")
    return TrainResult(model, history, ckpt, metrics_csv)


def compute_descriptors(model: ASDAModel, images, multiscale: bool = False, scales=None, chunk: int = 64) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(images), chunk):
            x = images[s:s + chunk]
            d = multiscale_descriptor(x, model, scales) if multiscale else model(x)
            out.append(d.numpy())
    return np.concatenate(out, axis=0)


def synthetic_groundtruth(ds: SynthDataset, queries, database, setup: str = "M"):
    """Same-instance database views are positives; small-object views count as 'hard'."""
    gts, kept = [], []
    for q in queries:
        same = [int(j) for j in database if ds.labels[j] == ds.labels[q]]
        hard = [j for j in same if ds.area_fractions[j] <= SMALL_AREA]
        easy = [j for j in same if ds.area_fractions[j] > SMALL_AREA]
        gt = groundtruth_from_labels(int(q), easy, hard, (), setup)
        if gt.positives:
            gts.append(gt)
            kept.append(int(q))
    return kept, gts


def evaluate_model(model: ASDAModel, cfg: ExperimentConfig, ds: SynthDataset, sp, modes=("ss", "ms+lw"),
                   setups=("M", "H")) -> dict:
    """mAP per (mode, setup) on the held-out queries/database."""
    for m in modes:
        if m not in EVAL_MODES:
            raise ValueError(f"unknown evaluation mode {m!r}; expected one of {EVAL_MODES}")
    cache = {}

    def descs(ms: bool, idx):
        if ms not in cache:
            cache[ms] = {}
        missing = [i for i in idx if i not in cache[ms]]
        if missing:
            d = compute_descriptors(model, ds.images[missing], multiscale=ms, scales=cfg.ms_scales)
            cache[ms].update(zip(missing, d))
        return np.stack([cache[ms][i] for i in idx])

    results = {}
    for mode in modes:
        ms = "ms" in mode
        Q, X = descs(ms, list(sp.queries)), descs(ms, list(sp.database))
        if "lw" in mode:
            T = descs(ms, list(sp.train))
            proj = fit_whitening(matched_pairs(ds.labels[sp.train], T, max_pairs=5000, seed=cfg.seed), T,
                                 cfg.whitening_dim or None)
            Q, X = apply_whitening(Q, proj), apply_whitening(X, proj)
        for setup in setups:
            kept, gts = synthetic_groundtruth(ds, sp.queries, sp.database, setup)
            if not gts:
                results[(mode, setup)] = (None, [])
                continue
            rows = [list(sp.queries).index(q) for q in kept]
            m, aps = evaluate_retrieval(Q[rows], X, kept, [int(i) for i in sp.database], gts)
            results[(mode, setup)] = (m, aps)
    return results


def run_eval(cfg: ExperimentConfig, checkpoint=None, out_dir=None, modes=("ss", "ms+lw"),
             setups=("M", "H"), data=None, model: ASDAModel | None = None) -> dict:
    """Evaluate a checkpoint (or the random-init model) and write CSV/JSON reports."""
    cfg.validate()
    ds, sp = data or load_data(cfg)
    if model is None:
        model = build_model(cfg)
        if checkpoint is not None:
            load_model_checkpoint(cfg, model, checkpoint)
    res = evaluate_model(model, cfg, ds, sp, modes, setups)
    report = {
        "config_hash": cfg.hash(),
        "checkpoint": str(checkpoint) if checkpoint else None,
        "queries": int(len(sp.queries)),
        "database": int(len(sp.database)),
        "map": {f"{mode}/{setup}": v[0] for (mode, setup), v in res.items()},
        "per_query_ap": {f"{mode}/{setup}": v[1] for (mode, setup), v in res.items()},
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "eval.json", json.dumps(report, indent=2))
        rows = [{"mode": mode.upper(), "setup": setup, "map": v[0]} for (mode, setup), v in res.items()]
        _write_csv(out / "eval.csv", rows, ["mode", "setup", "map"])
    return report


def run_ablation(cfg: ExperimentConfig, axis: str, out_dir=None, values: Sequence | None = None) -> list[dict]:
    """One row per setting of ``axis``, all rows from the same seed and data.

    Rows report mAP under the Medium and Hard setups; trends are recorded in
    the JSON summary but not judged.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {tuple(ABLATION_AXES)}")
    cfg.validate()
    key, default = ABLATION_AXES[axis]
    values = tuple(values) if values is not None else default
    data = load_data(cfg)
    rows = []
    if axis == "postprocess":
        result = run_train(cfg, data=data)
        res = evaluate_model(result.model, cfg, *data, modes=values)
        for v in values:
            rows.append(_row(axis, v, res[(v, "M")][0], res[(v, "H")][0], result.history))
    else:
        base = cfg
        if axis == "proposal":
            # one shared descriptor budget: SDA/HDA have K=1, so D <= C
            base = cfg.with_overrides(dim=min(cfg.dim, cfg.channels[-1]))
        for v in values:
            if key in ("scale_count", "dim"):
                v = int(v)
            rc = base.with_overrides(**{key: v})
            result = run_train(rc, data=data)
            res = evaluate_model(result.model, rc, *data, modes=("ss",))
            rows.append(_row(axis, v, res[("ss", "M")][0], res[("ss", "H")][0], result.history,
                             dim=rc.effective_dim))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["axis", "setting", "dim", "map_m", "map_h", "final_train_loss"]
        _write_csv(out / f"ablation_{axis}.csv", rows, cols)
        plot_ablation(rows, axis, out / f"ablation_{axis}.png")
        summary = {"axis": axis, "config_hash": cfg.hash(), "rows": rows, "trend": _trend(rows)}
        _atomic_write(out / f"ablation_{axis}.json", json.dumps(summary, indent=2))
    return rows


def _row(axis, setting, map_m, map_h, history, dim=None) -> dict:
    label = setting.upper() if isinstance(setting, str) else setting
    return {"axis": axis, "setting": label, "dim": dim, "map_m": map_m, "map_h": map_h,
            "final_train_loss": history[-1].train_loss if history else None}


def _trend(rows) -> dict:
    scored = [r for r in rows if r["map_m"] is not None]
    if not scored:
        return {}
    best = max(scored, key=lambda r: r["map_m"])
    vals = [r["map_m"] for r in scored]
    diffs = np.diff(vals)
    return {
        "best_setting_m": best["setting"],
        "monotone_increasing_m": bool(np.all(diffs >= 0)) if len(diffs) else None,
        "spread_m": float(max(vals) - min(vals)),
    }
