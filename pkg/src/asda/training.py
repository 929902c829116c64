"""Contrastive training over (query, positive, negatives) tuples."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np
import torch


log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ASDACKPT1\n"


class NonFiniteError(FloatingPointError):
    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        super().__init__(f"non-finite values first appear at stage '{stage}'" + (f": {detail}" if detail else ""))


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, checkpoint: Path | None):
        self.epoch = epoch
        self.checkpoint = checkpoint
        super().__init__(f"loss became non-finite in epoch {epoch}; last good checkpoint: {checkpoint}")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-6
    lr_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    margin: float = 0.75
    batch_size: int = 5
    negatives: int = 5

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if not self.margin > 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.batch_size < 1 or self.negatives < 1:
            raise ValueError("batch_size and negatives must be >= 1")

    def learning_rate(self, epoch: int) -> float:
        return self.lr * math.exp(-self.lr_decay * epoch)


class TrainingTuple(NamedTuple):
    query: int
    positive: int
    negatives: tuple


def _safe_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    sq = ((a - b) ** 2).sum(dim=-1)
    return torch.where(sq == 0, torch.zeros_like(sq), sq.clamp_min(1e-300).sqrt())


def contrastive_loss(rep_q, rep_p, rep_n, margin: float = 0.75) -> torch.Tensor:
    """``||q - p||^2 + sum_n max(0, margin - ||q - n||)^2`` for one tuple.

    ``rep_n`` is ``(N, D)`` (or a list of ``D``-vectors); leading batch dims
    on all three inputs are allowed and kept.
    """
    rep_q, rep_p = torch.as_tensor(rep_q), torch.as_tensor(rep_p)
    if isinstance(rep_n, (list, tuple)):
        rep_n = torch.stack([torch.as_tensor(n) for n in rep_n], dim=-2)
    rep_n = torch.as_tensor(rep_n)
    if rep_n.ndim == rep_q.ndim:
        rep_n = rep_n.unsqueeze(-2)
    if rep_q.shape != rep_p.shape or rep_n.shape[-1] != rep_q.shape[-1]:
        raise ValueError(f"descriptor dims differ: q {tuple(rep_q.shape)}, p {tuple(rep_p.shape)}, "
                         f"n {tuple(rep_n.shape)}")
    pos = ((rep_q - rep_p) ** 2).sum(dim=-1)
    dn = _safe_distance(rep_q.unsqueeze(-2), rep_n)
    hinge = torch.clamp(margin - dn, min=0.0) ** 2
    return pos + hinge.sum(dim=-1)


def build_tuples(labels: Sequence[int], indices: Sequence[int], seed: int, negatives: int = 5,
                 epoch: int = 0) -> list[TrainingTuple]:
    """One tuple per image in ``indices`` (shuffled), reproducible per ``(seed, epoch)``."""
    labels = np.asarray(labels)
    indices = np.asarray(indices)
    pool = labels[indices]
    inst, counts = np.unique(pool, return_counts=True)
    if (counts >= 2).sum() < 1 or len(inst) < 2:
        raise ValueError("tuple mining needs >= 2 instances with >= 2 views each among the given images")
    rng = np.random.default_rng([seed, epoch, 0x7E])
    out = []
    for q in rng.permutation(indices):
        same = indices[(pool == labels[q]) & (indices != q)]
        if len(same) == 0:
            continue
        other = indices[pool != labels[q]]
        p = int(rng.choice(same))
        negs = rng.choice(other, size=negatives, replace=len(other) < negatives)
        out.append(TrainingTuple(int(q), p, tuple(int(n) for n in negs)))
    return out


def batches(tuples: Sequence[TrainingTuple], size: int) -> Iterator[list[TrainingTuple]]:
    for start in range(0, len(tuples), size):
        yield list(tuples[start:start + size])


def batch_loss(model, images, batch: Sequence[TrainingTuple], margin: float, check: bool = True) -> torch.Tensor:
    """Mean contrastive loss of ``batch``; each distinct image is described once."""
    if not batch:
        raise ValueError("empty batch")
    needed = sorted({i for t in batch for i in (t.query, t.positive, *t.negatives)})
    pos = {i: n for n, i in enumerate(needed)}
    x = torch.as_tensor(np.asarray(images)[needed], dtype=model.dtype)
    feats = model.features(x)
    desc = model.describe_features(feats)
    q = desc[torch.tensor([pos[t.query] for t in batch])]
    p = desc[torch.tensor([pos[t.positive] for t in batch])]
    n = desc[torch.tensor([[pos[i] for i in t.negatives] for t in batch])]
    loss = contrastive_loss(q, p, n, margin).mean()
    if check and not torch.isfinite(loss):
        _diagnose(model, x, feats, desc)
    return loss


def _diagnose(model, x, feats, desc):
    if not torch.isfinite(x).all():
        raise NonFiniteError("images")
    for name, prm in model.named_parameters():
        if not torch.isfinite(prm).all():
            raise NonFiniteError("parameters", name)
    if not torch.isfinite(feats).all():
        raise NonFiniteError("backbone features")
    with torch.no_grad():
        maps = model.detector(feats)
    if not torch.isfinite(maps).all():
        raise NonFiniteError("semantic maps")
    if not torch.isfinite(desc).all():
        raise NonFiniteError("descriptors")
    raise NonFiniteError("loss")


def compute_gradients(model, images, batch: Sequence[TrainingTuple], margin: float = 0.75):
    """Returns ``(loss, {param_name: grad})`` for the mean batch loss."""
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, images, batch, margin)
    loss.backward()
    grads = {}
    for name, prm in model.named_parameters():
        if prm.requires_grad:
            grads[name] = prm.grad.detach().clone() if prm.grad is not None else torch.zeros_like(prm)
    return float(loss.detach()), grads


def make_optimizer(model, cfg: OptimizerConfig) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


def evaluate_loss(model, images, tuples: Sequence[TrainingTuple], cfg: OptimizerConfig) -> float:
    if not tuples:
        return float("nan")
    total = 0.0
    with torch.no_grad():
        for b in batches(tuples, cfg.batch_size):
            total += float(batch_loss(model, images, b, cfg.margin)) * len(b)
    return total / len(tuples)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


def save_checkpoint(path, model, optimizer=None, epoch: int = 0, config_hash: str = "", extra: dict | None = None):
    """Write ``ASDACKPT1`` header followed by a torch-serialized state dict."""
    state = {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "config_hash": config_hash,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(state, buf)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an ASDA checkpoint (bad header)")
    return torch.load(io.BytesIO(data[len(CHECKPOINT_MAGIC):]), weights_only=True)


def train(model, images, labels, train_idx, cfg: OptimizerConfig, epochs: int, seed: int = 0,
          val_idx=None, checkpoint_path=None, config_hash: str = "", start_epoch: int = 0,
          optimizer_state: dict | None = None,
          on_epoch: Callable[[EpochMetrics], None] | None = None) -> list[EpochMetrics]:
    """Adam with ``lr_i = lr_0 * exp(-decay * i)``; checkpoints after every epoch.

    ``images`` is indexable by dataset index. Epochs are numbered from
    ``start_epoch`` so that a resumed run continues its schedule.
    """
    history: list[EpochMetrics] = []
    if epochs <= 0:
        return history
    opt = make_optimizer(model, cfg)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    val_tuples = build_tuples(labels, val_idx, seed + 7919, cfg.negatives) if val_idx is not None and len(val_idx) else []
    last_good = checkpoint_path if checkpoint_path and Path(checkpoint_path).exists() else None
    good_state = {k: v.clone() for k, v in model.state_dict().items()}
    model.train()
    for epoch in range(start_epoch, start_epoch + epochs):
        lr = cfg.learning_rate(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        tuples = build_tuples(labels, train_idx, seed, cfg.negatives, epoch=epoch)
        total, count = 0.0, 0
        for b in batches(tuples, cfg.batch_size):
            opt.zero_grad(set_to_none=True)
            loss = batch_loss(model, images, b, cfg.margin, check=False)
            if not torch.isfinite(loss):
                model.load_state_dict(good_state)
                raise TrainingDiverged(epoch, last_good)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(b)
            count += len(b)
        metrics = EpochMetrics(epoch, lr, total / max(count, 1), evaluate_loss(model, images, val_tuples, cfg))
        good_state = {k: v.clone() for k, v in model.state_dict().items()}
        if checkpoint_path is not None:
            last_good = save_checkpoint(checkpoint_path, model, opt, epoch + 1, config_hash)
        history.append(metrics)
        log.info("epoch %d lr %.3g train %.4f val %.4f", epoch, lr, metrics.train_loss, metrics.val_loss)
        if on_epoch is not None:
            on_epoch(metrics)
    return history


def metrics_rows(history: Sequence[EpochMetrics]) -> list[dict]:
    return [asdict(m) for m in history]
