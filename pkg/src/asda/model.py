"""End-to-end descriptor network: backbone -> detector -> regions -> reduction."""

from __future__ import annotations

from functools import lru_cache

import torch
import torch.nn as nn

from asda.aggregation import DEFAULT_GEM_P, ReductionLayer, describe, describe_efficient
from asda.detector import DetectorStack
from asda.features import Backbone, BackboneConfig, as_image_batch
from asda.regions import generate_candidate_regions


@lru_cache(maxsize=256)
def _regions(h: int, w: int, scales: int):
    return tuple(generate_candidate_regions(h, w, scales))


class ASDAModel(nn.Module):
    """Trainable descriptor model.

    ``backbone`` may be ``None`` when the model only consumes precomputed
    feature maps (see :meth:`describe_features`).
    """

    def __init__(self, backbone: Backbone | None, detector: DetectorStack, reduction: ReductionLayer,
                 scales: int = 4, pooling: str = "mac", gem_p: float = DEFAULT_GEM_P,
                 proposal: str = "soft"):
        super().__init__()
        if reduction.in_dim != detector.steps * detector.channels:
            raise ValueError(f"reduction input {reduction.in_dim} != K*C = {detector.steps * detector.channels}")
        if backbone is not None and backbone.out_channels != detector.channels:
            raise ValueError(f"backbone emits {backbone.out_channels} channels, detector expects {detector.channels}")
        self.backbone = backbone
        self.detector = detector
        self.reduction = reduction
        self.scales = int(scales)
        self.pooling = pooling
        self.gem_p = float(gem_p)
        self.proposal = proposal

    @classmethod
    def build(cls, channels=(16, 32, 32), steps: int = 4, theta: float = 0.7, scales: int = 4,
              dim: int = 128, pooling: str = "mac", gem_p: float = DEFAULT_GEM_P, proposal: str = "soft",
              seed: int = 0, trainable_backbone: bool = True, dtype=torch.float64) -> "ASDAModel":
        cfg = BackboneConfig(channels=channels, trainable=trainable_backbone)
        backbone = Backbone(cfg, seed=seed, dtype=dtype)
        c = cfg.out_channels
        detector = DetectorStack(c, steps, theta, seed=seed + 1, dtype=dtype)
        reduction = ReductionLayer(steps * c, min(dim, steps * c), seed=seed + 2, dtype=dtype)
        return cls(backbone, detector, reduction, scales=scales, pooling=pooling, gem_p=gem_p, proposal=proposal)

    @property
    def dim(self) -> int:
        return self.reduction.out_dim

    @property
    def dtype(self):
        return self.detector.weight.dtype

    def regions_for(self, h: int, w: int):
        return _regions(h, w, self.scales)

    def describe_features(self, f: torch.Tensor, efficient: bool = True) -> torch.Tensor:
        f = torch.as_tensor(f, dtype=self.dtype)
        fn = describe_efficient if efficient else describe
        return fn(f, self.detector, self.regions_for(*f.shape[-3:-1]), self.pooling,
                  self.reduction, self.gem_p, self.proposal)

    def features(self, images) -> torch.Tensor:
        if self.backbone is None:
            raise RuntimeError("model has no backbone; use describe_features on precomputed maps")
        x = as_image_batch(images, dtype=self.dtype)
        m = self.backbone.min_input_size
        if min(x.shape[1:3]) < m:
            raise ValueError(f"image is {x.shape[1]}x{x.shape[2]}; the backbone needs at least {m}x{m} pixels")
        return self.backbone(x)

    def forward(self, images) -> torch.Tensor:
        """``(B, H, W, 3)`` images -> ``(B, D)`` unit descriptors."""
        return self.describe_features(self.features(images))
