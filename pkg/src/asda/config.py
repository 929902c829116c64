"""Experiment configuration: typed flat ``key = value`` files."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from asda.aggregation import POOLING
from asda.regions import MAX_SCALES

PROPOSALS = ("hda", "sda", "asda")

# keys that determine parameter shapes and data; a checkpoint is tied to these
MODEL_KEYS = ("seed", "n_instances", "views_per_instance", "image_size", "holdout_fraction", "channels",
              "steps", "theta", "scale_count", "pooling", "gem_p", "dim", "proposal")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # synthetic data
    n_instances: int = 20
    views_per_instance: int = 10
    image_size: int = 64
    holdout_fraction: float = 0.2
    # model
    channels: tuple = (16, 32, 32)
    trainable_backbone: bool = True
    steps: int = 4
    theta: float = 0.7
    scale_count: int = 4
    pooling: str = "mac"
    gem_p: float = 3.0
    dim: int = 512
    proposal: str = "asda"
    # optimisation
    margin: float = 0.75
    lr: float = 1e-3
    lr_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    batch_size: int = 5
    negatives: int = 5
    epochs: int = 30
    # test-time post-processing
    ms_scales: tuple = (1.0, 1.0 / math.sqrt(2.0), 0.5)
    whitening_dim: int = 0

    def validate(self) -> "ExperimentConfig":
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(key, msg)

        need(self.n_instances >= 2, "n_instances", f"must be >= 2, got {self.n_instances}")
        need(self.views_per_instance >= 2, "views_per_instance", f"must be >= 2, got {self.views_per_instance}")
        need(self.image_size >= 24, "image_size", f"must be >= 24, got {self.image_size}")
        need(0 < self.holdout_fraction < 1, "holdout_fraction", f"must lie in (0, 1), got {self.holdout_fraction}")
        n_hold = round(self.holdout_fraction * self.n_instances)
        need(n_hold >= 2 and self.n_instances - n_hold >= 2, "holdout_fraction",
             f"leaves {n_hold} held-out / {self.n_instances - n_hold} training instances; both need >= 2")
        need(len(self.channels) >= 1 and all(c >= 1 for c in self.channels), "channels",
             f"need >= 1 positive channel counts, got {self.channels}")
        need(self.channels[-1] >= 4, "channels", f"last block needs >= 4 channels, got {self.channels[-1]}")
        need(self.image_size >= 2 ** len(self.channels), "image_size",
             f"{self.image_size}px is smaller than the backbone stride {2 ** len(self.channels)}")
        need(self.steps >= 1, "steps", f"K must be >= 1, got {self.steps}")
        need(0 < self.theta < 1, "theta", f"must lie in (0, 1), got {self.theta}")
        need(0 <= self.scale_count <= MAX_SCALES, "scale_count", f"L must lie in 0..{MAX_SCALES}, got {self.scale_count}")
        need(self.pooling in POOLING, "pooling", f"must be one of {POOLING}, got {self.pooling!r}")
        need(self.gem_p >= 1, "gem_p", f"must be >= 1, got {self.gem_p}")
        need(self.dim >= 1, "dim", f"must be >= 1, got {self.dim}")
        need(self.proposal in PROPOSALS, "proposal", f"must be one of {PROPOSALS}, got {self.proposal!r}")
        need(self.margin > 0, "margin", f"must be > 0, got {self.margin}")
        need(self.lr > 0, "lr", f"must be > 0, got {self.lr}")
        need(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "beta1", "Adam betas must lie in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.negatives >= 1, "negatives", "must be >= 1")
        need(self.epochs >= 0, "epochs", "must be >= 0")
        need(len(self.ms_scales) >= 1 and all(s > 0 for s in self.ms_scales), "ms_scales",
             f"need >= 1 positive scale, got {self.ms_scales}")
        need(self.whitening_dim >= 0, "whitening_dim", "must be >= 0 (0 keeps the descriptor dim)")
        return self

    @property
    def effective_steps(self) -> int:
        """HDA and SDA use one proposal map; only ASDA erases over K steps."""
        return self.steps if self.proposal == "asda" else 1

    @property
    def effective_dim(self) -> int:
        return min(self.dim, self.effective_steps * self.channels[-1])

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw).validate()

    def hash(self) -> str:
        body = "\n".join(f"{k}={_format(getattr(self, k))}" for k in MODEL_KEYS)
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("?", f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(key, f"{source}:{lineno}: unknown key")
            values[key] = parse_value(key, val, types[key])
        return cls(**values).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), str(path))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key: str, text: str, typ: str):
    try:
        if typ == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
        if typ == "tuple":
            items = [s.strip() for s in text.split(",") if s.strip()]
            if key == "channels":
                return tuple(int(s) for s in items)
            return tuple(float(s) for s in items)
        return text.strip().lower()
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def config_field_types() -> dict:
    return {f.name: f.type for f in fields(ExperimentConfig)}
