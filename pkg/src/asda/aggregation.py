"""Soft-region-weighted pooling and descriptor assembly.

Two routes produce the descriptor. :func:`describe` crops the semantic map
and the feature map separately for every (region, step) pair and weights
the crops. :func:`describe_efficient` weights the whole feature map once
per step and then only crops. Both are exact and must agree to rounding.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from asda.detector import DetectorStack, compute_semantic_maps
from asda.regions import CandidateRegion, crop_soft_region_proposal

POOLING = ("mac", "avg", "gem")
DEFAULT_GEM_P = 3.0
DESCRIPTOR_MAGIC = b"ASDADSC1"

_TINY = 1e-300


def _check_strategy(strategy: str, p: float) -> str:
    s = strategy.lower()
    if s not in POOLING:
        raise ValueError(f"unknown pooling strategy {strategy!r}; expected one of {POOLING}")
    if s == "gem" and p < 1:
        raise ValueError(f"GeM exponent must be >= 1, got {p}")
    return s


def _pool(weighted: torch.Tensor, strategy: str, p: float) -> torch.Tensor:
    """Reduce the spatial dims of ``(..., h, w, C)`` to ``(..., C)``."""
    if strategy == "mac":
        return weighted.amax(dim=(-3, -2))
    if strategy == "avg":
        return weighted.mean(dim=(-3, -2))
    # scale by the (detached) max so large p cannot overflow; exact identity
    top = weighted.detach().amax(dim=(-3, -2), keepdim=True)
    safe_top = torch.where(top > 0, top, torch.ones_like(top))
    mean_p = ((weighted / safe_top) ** p).mean(dim=(-3, -2))
    root = torch.where(mean_p == 0, torch.zeros_like(mean_p), mean_p.clamp_min(_TINY) ** (1.0 / p))
    return root * safe_top.squeeze(-2).squeeze(-2)


def pool_region(srp: torch.Tensor, crop: torch.Tensor, strategy: str = "mac", p: float = DEFAULT_GEM_P) -> torch.Tensor:
    """Pool ``srp * crop`` per channel; ``srp`` is ``(..., h, w)``, ``crop`` ``(..., h, w, C)``."""
    strategy = _check_strategy(strategy, p)
    if srp.shape[-2:] != crop.shape[-3:-1]:
        raise ValueError(f"proposal {tuple(srp.shape[-2:])} and crop {tuple(crop.shape[-3:-1])} differ in shape")
    return _pool(srp.unsqueeze(-1) * crop, strategy, p)


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    """Unit-normalize along the last dim; all-zero vectors stay exactly zero."""
    sq = (x * x).sum(dim=-1, keepdim=True)
    norm = sq.clamp_min(_TINY).sqrt()
    # NaN must propagate, so test for exact zero rather than positivity
    return torch.where(sq == 0, torch.zeros_like(x), x / norm)


def aggregate_map(reps) -> torch.Tensor:
    """Sum regional vectors (``(..., I, C)`` or a list of ``(..., C)``) and normalize."""
    if isinstance(reps, (list, tuple)):
        if not reps:
            raise ValueError("cannot aggregate an empty list of regional representations")
        reps = torch.stack(list(reps), dim=-2)
    if reps.shape[-2] == 0:
        raise ValueError("cannot aggregate an empty list of regional representations")
    return l2_normalize(reps.sum(dim=-2))


class ReductionLayer(nn.Module):
    """Fully connected ``K*C -> D`` projection, initialised with orthonormal rows."""

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0, dtype=torch.float64):
        super().__init__()
        if not 1 <= out_dim <= in_dim:
            raise ValueError(f"output dim D must satisfy 1 <= D <= {in_dim}, got {out_dim}")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.seed = int(seed)
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(out_dim, dtype=dtype))
        self.reset_parameters()

    def reset_parameters(self):
        gen = torch.Generator().manual_seed(self.seed)
        a = torch.randn(self.in_dim, self.out_dim, generator=gen, dtype=torch.float64)
        q, r = torch.linalg.qr(a)
        q = q * torch.sign(torch.diagonal(r))
        with torch.no_grad():
            self.weight.copy_(q.T)
            self.bias.zero_()

    @classmethod
    def identity(cls, dim: int, dtype=torch.float64) -> "ReductionLayer":
        layer = cls(dim, dim, dtype=dtype)
        with torch.no_grad():
            layer.weight.copy_(torch.eye(dim, dtype=dtype))
        return layer

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        return g @ self.weight.T + self.bias


def concat_and_reduce(gs: torch.Tensor, reduction: ReductionLayer) -> torch.Tensor:
    """Concatenate per-step vectors ``(..., K, C)`` and project to a unit ``D``-vector."""
    if isinstance(gs, (list, tuple)):
        gs = torch.stack(list(gs), dim=-2)
    g = gs.reshape(*gs.shape[:-2], gs.shape[-2] * gs.shape[-1])
    if g.shape[-1] != reduction.in_dim:
        raise ValueError(f"concatenated vector has length {g.shape[-1]}, reduction expects {reduction.in_dim}")
    return l2_normalize(reduction(g))


def _proposal_maps(f: torch.Tensor, stack: DetectorStack, proposal: str) -> torch.Tensor:
    if proposal == "soft":
        return compute_semantic_maps(f, stack)
    if proposal == "hard":
        return f.new_ones(*f.shape[:-3], stack.steps, *f.shape[-3:-1])
    raise ValueError(f"proposal must be 'soft' or 'hard', got {proposal!r}")


def _check_regions(regions: Sequence[CandidateRegion], h: int, w: int):
    if not regions:
        raise ValueError("at least one candidate region is required")
    for r in regions:
        if not r.fits(h, w):
            raise ValueError(f"region {r} lies outside the {h}x{w} feature map")


def describe(f, stack: DetectorStack, regions: Sequence[CandidateRegion], strategy: str = "mac",
             reduction: ReductionLayer | None = None, p: float = DEFAULT_GEM_P,
             proposal: str = "soft") -> torch.Tensor:
    """Reference route: crop map and features per (region, step), then pool.

    ``f`` is ``(..., H, W, C)``. Without a ``reduction`` the normalized
    concatenation is returned.
    """
    f = torch.as_tensor(f)
    strategy = _check_strategy(strategy, p)
    _check_regions(regions, *f.shape[-3:-1])
    m = _proposal_maps(f, stack, proposal)
    gs = []
    for k in range(stack.steps):
        mk = m[..., k, :, :]
        reps = []
        for r in regions:
            srp = crop_soft_region_proposal(mk, r)
            ys, xs = r.slices()
            reps.append(pool_region(srp, f[..., ys, xs, :], strategy, p))
        gs.append(aggregate_map(reps))
    gs = torch.stack(gs, dim=-2)
    if reduction is None:
        return l2_normalize(gs.reshape(*gs.shape[:-2], -1))
    return concat_and_reduce(gs, reduction)


def describe_efficient(f, stack: DetectorStack, regions: Sequence[CandidateRegion], strategy: str = "mac",
                       reduction: ReductionLayer | None = None, p: float = DEFAULT_GEM_P,
                       proposal: str = "soft") -> torch.Tensor:
    """Weight the feature map once per step, then crop and pool each region."""
    f = torch.as_tensor(f)
    strategy = _check_strategy(strategy, p)
    _check_regions(regions, *f.shape[-3:-1])
    m = _proposal_maps(f, stack, proposal)
    weighted = m.unsqueeze(-1) * f.unsqueeze(-4)  # (..., K, H, W, C)
    reps = []
    for r in regions:
        ys, xs = r.slices()
        reps.append(_pool(weighted[..., ys, xs, :], strategy, p))
    gs = aggregate_map(torch.stack(reps, dim=-2))
    if reduction is None:
        return l2_normalize(gs.reshape(*gs.shape[:-2], -1))
    return concat_and_reduce(gs, reduction)


def save_descriptor(path, desc) -> None:
    arr = np.ascontiguousarray(_numpy(desc), dtype="<f8").ravel()
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC)
        fh.write(struct.pack("<I", arr.size))
        fh.write(arr.tobytes())


def load_descriptor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    n = len(DESCRIPTOR_MAGIC)
    if data[:n] != DESCRIPTOR_MAGIC:
        raise ValueError(f"{path}: not a descriptor file (bad magic)")
    (d,) = struct.unpack("<I", data[n:n + 4])
    payload = data[n + 4:]
    if len(payload) != 8 * d:
        raise ValueError(f"{path}: expected {8 * d} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64)


def save_descriptors_csv(path, ids, descs) -> None:
    descs = np.atleast_2d(_numpy(descs))
    with open(path, "w") as fh:
        fh.write("id," + ",".join(f"d{i}" for i in range(descs.shape[1])) + "\n")
        for i, row in zip(ids, descs):
            fh.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")


def is_unit_or_zero(desc, tol: float = 1e-9) -> bool:
    n = float(np.linalg.norm(_numpy(desc)))
    return n == 0.0 or math.isclose(n, 1.0, abs_tol=tol)


def _numpy(x) -> np.ndarray:
    return x.detach().cpu().numpy() if torch.is_tensor(x) else np.asarray(x)
