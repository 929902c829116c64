"""Toy convolutional backbone and feature-map I/O.

Feature maps are laid out as ``(H, W, C)`` (or ``(B, H, W, C)`` for a batch)
so that a semantic map of shape ``(H, W)`` broadcasts over channels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

FEATURE_MAP_MAGIC = b"ASDAFM1"
MIN_IMAGE_SIDE = 16


@dataclass(frozen=True)
class BackboneConfig:
    channels: Sequence[int] = (16, 32, 32)
    kernel_size: int = 3
    stride: int = 2
    pool: str = "avg"
    trainable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 1:
            raise ValueError("backbone needs at least one conv block")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"channel counts must be positive, got {self.channels}")
        if self.channels[-1] < 4:
            raise ValueError(f"output channels must be >= 4, got {self.channels[-1]}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.pool not in ("avg", "max"):
            raise ValueError(f"pool must be 'avg' or 'max', got {self.pool!r}")

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    @property
    def total_stride(self) -> int:
        return self.stride ** len(self.channels)


class Backbone(nn.Module):
    """Blocks of (conv -> ReLU -> downsample).

    Convolutions use replicate padding, so a constant image maps to a
    constant feature map (no border artefacts from zero padding).
    """

    def __init__(self, config: BackboneConfig, seed: int = 0, dtype=torch.float64):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        self.convs = nn.ModuleList()
        in_ch = 3
        for out_ch in config.channels:
            self.convs.append(
                nn.Conv2d(in_ch, out_ch, config.kernel_size, padding=config.kernel_size // 2,
                          padding_mode="replicate", dtype=dtype)
            )
            in_ch = out_ch
        self.reset_parameters()
        self.requires_grad_(config.trainable)

    def reset_parameters(self):
        gen = torch.Generator().manual_seed(self.seed)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                w = torch.randn(conv.weight.shape, generator=gen, dtype=torch.float64)
                conv.weight.copy_(w * math.sqrt(2.0 / fan_in))
                conv.bias.fill_(0.01)

    @property
    def total_stride(self) -> int:
        return self.config.total_stride

    @property
    def min_input_size(self) -> int:
        return max(MIN_IMAGE_SIDE, self.total_stride)

    @property
    def out_channels(self) -> int:
        return self.config.out_channels

    def output_shape(self, height: int, width: int) -> tuple[int, int]:
        h, w = height, width
        for _ in self.convs:
            h, w = h // self.config.stride, w // self.config.stride
        return h, w

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, H, W, 3)`` images -> ``(B, H/s, W/s, C)`` non-negative features."""
        x = images.permute(0, 3, 1, 2)
        s = self.config.stride
        for conv in self.convs:
            x = F.relu(conv(x))
            if s > 1:
                x = F.avg_pool2d(x, s) if self.config.pool == "avg" else F.max_pool2d(x, s)
        return x.permute(0, 2, 3, 1)


def build_backbone(config: BackboneConfig | None = None, seed: int = 0, dtype=torch.float64) -> Backbone:
    return Backbone(config or BackboneConfig(), seed=seed, dtype=dtype)


def as_image_batch(images, dtype=torch.float64) -> torch.Tensor:
    """Coerce one ``(H, W, 3)`` image or a ``(B, H, W, 3)`` stack to a tensor batch."""
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images, dtype=dtype)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected image(s) shaped (H, W, 3) or (B, H, W, 3), got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("image contains non-finite values")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return x


def extract_feature_map(backbone: Backbone, image) -> torch.Tensor:
    """Feature map(s) for one image ``(H, W, 3)`` or a batch ``(B, H, W, 3)``.

    Returns ``(H', W', C)`` for a single image and ``(B, H', W', C)`` otherwise.
    """
    dtype = next(backbone.parameters()).dtype
    single = (torch.as_tensor(np.asarray(image)) if not torch.is_tensor(image) else image).ndim == 3
    x = as_image_batch(image, dtype=dtype)
    h, w = x.shape[1:3]
    m = backbone.min_input_size
    if h < m or w < m:
        raise ValueError(f"image is {h}x{w}; the backbone needs at least {m}x{m} pixels")
    f = backbone(x)
    return f[0] if single else f


def save_feature_map(path, fmap) -> None:
    """Write an ``(H, W, C)`` map as magic + three LE uint32 + LE float64 payload."""
    arr = np.ascontiguousarray(_to_numpy(fmap), dtype="<f8")
    if arr.ndim != 3:
        raise ValueError(f"feature map must be (H, W, C), got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAP_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(arr.tobytes(order="C"))


def load_feature_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    n = len(FEATURE_MAP_MAGIC)
    if data[:n] != FEATURE_MAP_MAGIC:
        raise ValueError(f"{path}: not a feature-map file (bad magic)")
    if len(data) < n + 12:
        raise ValueError(f"{path}: truncated header")
    h, w, c = struct.unpack("<III", data[n:n + 12])
    if min(h, w, c) < 1:
        raise ValueError(f"{path}: invalid dims {h}x{w}x{c}")
    payload = data[n + 12:]
    if len(payload) != h * w * c * 8:
        raise ValueError(f"{path}: expected {h * w * c * 8} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f8").reshape(h, w, c).astype(np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{path}: non-finite values in feature map")
    return arr


def _to_numpy(x) -> np.ndarray:
    if torch.is_tensor(x):
        return x.detach().cpu().numpy()
    return np.asarray(x)
