"""Multi-scale descriptor pooling and learned (supervised) whitening."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from asda.aggregation import l2_normalize
from asda.features import as_image_batch

log = logging.getLogger(__name__)

DEFAULT_SCALES = (1.0, 1.0 / math.sqrt(2.0), 0.5)


def resize_images(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Bilinear resize of ``(B, H, W, 3)``; scale 1 returns the input untouched."""
    h, w = x.shape[1:3]
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) == (h, w):
        return x
    y = F.interpolate(x.permute(0, 3, 1, 2), size=(nh, nw), mode="bilinear", align_corners=False,
                      antialias=scale < 1)
    return y.clamp(0.0, 1.0).permute(0, 2, 3, 1)


def multiscale_descriptor(images, model, scales=DEFAULT_SCALES) -> torch.Tensor:
    """Average per-scale descriptors and renormalize.

    Scales whose resized image falls below the backbone minimum are skipped
    with a warning; if every scale is skipped a ``ValueError`` is raised.
    """
    x = as_image_batch(images, dtype=model.dtype)
    single = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images).ndim == 3
    min_side = model.backbone.min_input_size
    acc, used = None, []
    for s in scales:
        if s <= 0:
            raise ValueError(f"scales must be positive, got {s}")
        xs = resize_images(x, s)
        if min(xs.shape[1:3]) < min_side:
            warnings.warn(f"scale {s:.4g} gives {xs.shape[1]}x{xs.shape[2]} images, below the "
                          f"{min_side}px minimum; skipped", stacklevel=2)
            continue
        d = model(xs)
        acc = d if acc is None else acc + d
        used.append(s)
    if acc is None:
        raise ValueError(f"every scale in {tuple(scales)} produces images below {min_side}px")
    out = l2_normalize(acc / len(used))
    return out[0] if single else out


@dataclass(frozen=True)
class WhiteningProjection:
    mean: np.ndarray
    projection: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "WhiteningProjection":
        return cls(np.zeros(dim), np.eye(dim))


def _sym_inv_sqrt(c: np.ndarray, floor: float, strict: bool) -> np.ndarray:
    vals, vecs = np.linalg.eigh(c)
    low = vals < floor
    if low.any():
        msg = (f"intra-pair scatter has {int(low.sum())} eigenvalue(s) below the floor {floor:.3g} "
               f"(min {vals.min():.3g}); the matched pairs do not span all {len(vals)} dims")
        if strict:
            raise ValueError(msg)
        warnings.warn(msg + "; clamping to the floor", stacklevel=3)
        vals = np.maximum(vals, floor)
    return (vecs / np.sqrt(vals)) @ vecs.T


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def projection_from_scatters(mean, intra_scatter, total_scatter, out_dim: int | None = None,
                             strict: bool = False) -> WhiteningProjection:
    """Whiten the intra-pair scatter, then rotate onto the top total-scatter axes."""
    cs = np.asarray(intra_scatter, dtype=np.float64)
    cd = np.asarray(total_scatter, dtype=np.float64)
    d = cs.shape[0]
    out_dim = d if out_dim is None else int(out_dim)
    if not 1 <= out_dim <= d:
        raise ValueError(f"whitening output dim must lie in 1..{d}, got {out_dim}")
    floor = 1e-10 * np.trace(cs) / d
    w = _sym_inv_sqrt(cs, floor, strict)
    vals, vecs = np.linalg.eigh(w @ cd @ w)
    order = np.argsort(-vals, kind="stable")
    rot = _fix_signs(vecs[:, order[:out_dim]])
    return WhiteningProjection(np.asarray(mean, dtype=np.float64), rot.T @ w)


def fit_whitening(pairs, descriptors, out_dim: int | None = None, strict: bool = False) -> WhiteningProjection:
    """Fit from matched pairs ``(P, 2, D)`` and the full descriptor set ``(N, D)``."""
    pairs = np.asarray(_np(pairs), dtype=np.float64)
    X = np.asarray(_np(descriptors), dtype=np.float64)
    if pairs.ndim != 3 or pairs.shape[1] != 2:
        raise ValueError(f"pairs must be shaped (P, 2, D), got {pairs.shape}")
    d = X.shape[1]
    if pairs.shape[2] != d:
        raise ValueError(f"pairs have dim {pairs.shape[2]}, descriptors have dim {d}")
    if out_dim is not None and out_dim > d:
        raise ValueError(f"whitening output dim {out_dim} exceeds input dim {d}")
    mu = X.mean(axis=0)
    diff = pairs[:, 0] - pairs[:, 1]
    cs = diff.T @ diff / len(diff)
    xc = X - mu
    cd = xc.T @ xc / len(X)
    return projection_from_scatters(mu, cs, cd, out_dim, strict)


def apply_whitening(desc, proj: WhiteningProjection) -> np.ndarray:
    """``normalize(P @ (d - mean))`` for one descriptor or a stack."""
    d = np.asarray(_np(desc), dtype=np.float64)
    if d.shape[-1] != proj.in_dim:
        raise ValueError(f"descriptor dim {d.shape[-1]} does not match projection input {proj.in_dim}")
    y = (d - proj.mean) @ proj.projection.T
    n = np.linalg.norm(y, axis=-1, keepdims=True)
    return np.divide(y, n, out=np.zeros_like(y), where=n != 0)


def matched_pairs(labels, descriptors, max_pairs: int | None = None, seed: int = 0) -> np.ndarray:
    """All same-label pairs (optionally subsampled) as a ``(P, 2, D)`` array."""
    labels = np.asarray(labels)
    X = np.asarray(_np(descriptors), dtype=np.float64)
    idx = [(i, j) for i in range(len(labels)) for j in range(i + 1, len(labels)) if labels[i] == labels[j]]
    if max_pairs is not None and len(idx) > max_pairs:
        rng = np.random.default_rng(seed)
        idx = [idx[k] for k in np.sort(rng.choice(len(idx), max_pairs, replace=False))]
    if not idx:
        raise ValueError("no matched pairs: every label occurs once")
    a, b = zip(*idx)
    return np.stack([X[list(a)], X[list(b)]], axis=1)


def _np(x):
    return x.detach().cpu().numpy() if torch.is_tensor(x) else x
