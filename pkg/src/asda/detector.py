"""Adversarial detector: K 1x1-conv detectors with step-wise erasing."""

from __future__ import annotations

import math

import torch
import torch.nn as nn


class DetectorStack(nn.Module):
    """Per-step 1x1 detectors ``m_k = sigmoid(f_k @ w_k + b_k)``.

    ``weight`` is ``(K, C)``, ``bias`` is ``(K,)``. ``theta`` is the erasing
    threshold: positions where a map reaches ``theta`` are zeroed in the
    input stream of every later step.
    """

    def __init__(self, channels: int, steps: int, theta: float, seed: int = 0, dtype=torch.float64):
        super().__init__()
        if steps < 1:
            raise ValueError(f"number of steps K must be >= 1, got {steps}")
        if not 0.0 < theta < 1.0:
            raise ValueError(f"theta must lie in (0, 1), got {theta}")
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        self.channels = int(channels)
        self.steps = int(steps)
        self.theta = float(theta)
        self.seed = int(seed)
        self.weight = nn.Parameter(torch.empty(steps, channels, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(steps, dtype=dtype))
        self.reset_parameters()

    def reset_parameters(self):
        gen = torch.Generator().manual_seed(self.seed)
        with torch.no_grad():
            w = torch.randn(self.steps, self.channels, generator=gen, dtype=torch.float64)
            self.weight.copy_(w / math.sqrt(self.channels))
            self.bias.zero_()

    def forward(self, f: torch.Tensor, return_streams: bool = False):
        return compute_semantic_maps(f, self, return_streams=return_streams)

    def extra_repr(self) -> str:
        return f"channels={self.channels}, steps={self.steps}, theta={self.theta}"


def init_detector_stack(channels: int, steps: int, theta: float, seed: int = 0, dtype=torch.float64) -> DetectorStack:
    return DetectorStack(channels, steps, theta, seed=seed, dtype=dtype)


def residual_mask(m: torch.Tensor, theta: float) -> torch.Tensor:
    """Binary mask of positions that survive erasing: ``m < theta`` (strict)."""
    m = torch.as_tensor(m)
    return (m < theta).to(m.dtype if m.is_floating_point() else torch.float64)


def compute_semantic_maps(f: torch.Tensor, stack: DetectorStack, return_streams: bool = False):
    """Run the K detection/erasing steps over ``f`` shaped ``(..., H, W, C)``.

    Returns the maps stacked as ``(..., K, H, W)``. With ``return_streams`` the
    erased input streams ``(..., K, H, W, C)`` are returned as well. The
    erasing mask is computed from detached values, so no gradient flows
    through the threshold comparison.
    """
    if f.shape[-1] != stack.channels:
        raise ValueError(f"feature map has {f.shape[-1]} channels, detector expects {stack.channels}")
    maps, streams = [], []
    fk = f
    for k in range(stack.steps):
        if k > 0:
            keep = residual_mask(maps[-1].detach(), stack.theta)
            fk = fk * keep.unsqueeze(-1)
        streams.append(fk)
        maps.append(torch.sigmoid(fk @ stack.weight[k] + stack.bias[k]))
    m = torch.stack(maps, dim=-3)
    if return_streams:
        return m, torch.stack(streams, dim=-4)
    return m
