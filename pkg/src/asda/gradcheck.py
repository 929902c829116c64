"""Central finite-difference checks of autograd gradients.

Parameters whose perturbation flips an erasing mask or moves a negative
pair across the hinge are excluded: the loss is not differentiable there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import numpy as np
import torch

from asda.training import TrainingTuple, _safe_distance, batch_loss


@dataclass(frozen=True)
class GradCheckRecord:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float
    excluded: bool


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(loss_fn: Callable[[], torch.Tensor], params: dict, picks: Sequence[tuple],
                    h: float = 1e-6, state_fn: Callable[[], Hashable] | None = None,
                    floor: float = 1e-6) -> list[GradCheckRecord]:
    """Compare autograd against central differences at ``picks`` = [(name, flat index)]."""
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for n, p in params.items()}
    base_state = state_fn() if state_fn else None
    out = []
    with torch.no_grad():
        for name, idx in picks:
            flat = params[name].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + h
            lp = float(loss_fn())
            sp = state_fn() if state_fn else None
            flat[idx] = orig - h
            lm = float(loss_fn())
            sm = state_fn() if state_fn else None
            flat[idx] = orig
            num = (lp - lm) / (2 * h)
            a = float(analytic[name].view(-1)[idx])
            excluded = state_fn is not None and (sp != base_state or sm != base_state)
            out.append(GradCheckRecord(name, int(idx), a, num, relative_error(a, num, floor), excluded))
    return out


def sample_parameters(params: dict, n: int, seed: int = 0) -> list[tuple]:
    """``n`` distinct (name, flat index) picks, uniform over all scalar entries."""
    names = list(params)
    sizes = np.array([params[k].numel() for k in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = []
    for f in np.sort(flat):
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        picks.append((names[k], int(f - offsets[k])))
    return picks


def model_loss_fn(model, images, batch: Sequence[TrainingTuple], margin: float):
    return lambda: batch_loss(model, images, batch, margin)


def model_state_fn(model, images, batch: Sequence[TrainingTuple], margin: float):
    """Snapshot of the erasing masks and the active hinge set for ``batch``."""
    needed = sorted({i for t in batch for i in (t.query, t.positive, *t.negatives)})
    pos = {i: n for n, i in enumerate(needed)}
    x = torch.as_tensor(np.asarray(images)[needed], dtype=model.dtype)

    def state():
        with torch.no_grad():
            f = model.features(x)
            maps = model.detector(f) if model.proposal == "soft" else None
            desc = model.describe_features(f)
        masks = b"" if maps is None else (maps[..., :-1, :, :] < model.detector.theta).numpy().tobytes()
        q = desc[torch.tensor([pos[t.query] for t in batch])]
        n = desc[torch.tensor([[pos[i] for i in t.negatives] for t in batch])]
        active = (_safe_distance(q.unsqueeze(-2), n) < margin).numpy().tobytes()
        return masks, active

    return state
