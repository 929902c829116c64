import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asda.config import ConfigError, ExperimentConfig


def test_defaults():
    cfg = ExperimentConfig()
    assert (cfg.steps, cfg.theta, cfg.scale_count, cfg.pooling, cfg.dim, cfg.margin) == (4, 0.7, 4, "mac", 512, 0.75)
    assert cfg.ms_scales == (1.0, 1 / math.sqrt(2), 0.5)
    assert cfg.effective_dim == 4 * 32


def test_single_map_proposals():
    cfg = ExperimentConfig(proposal="sda")
    assert cfg.effective_steps == 1 and cfg.effective_dim == 32


@given(seed=st.integers(0, 2**31 - 1), steps=st.integers(1, 6), theta=st.floats(0.01, 0.99),
       scales=st.integers(0, 5), pooling=st.sampled_from(["mac", "avg", "gem"]),
       lr=st.floats(1e-8, 1.0), ms=st.lists(st.floats(0.1, 2.0), min_size=1, max_size=4))
@settings(max_examples=80, deadline=None)
def test_text_round_trip(seed, steps, theta, scales, pooling, lr, ms):
    cfg = ExperimentConfig(seed=seed, steps=steps, theta=theta, scale_count=scales, pooling=pooling,
                           lr=lr, ms_scales=tuple(ms)).validate()
    back = ExperimentConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.hash() == cfg.hash()


def test_hash_tracks_model_keys_only():
    base = ExperimentConfig()
    assert base.hash() != base.with_overrides(theta=0.6).hash()
    assert base.hash() == base.with_overrides(epochs=3, lr=0.1).hash()


def test_file_round_trip(tmp_path):
    cfg = ExperimentConfig(epochs=3, channels=(4, 8, 8))
    cfg.save(tmp_path / "c.txt")
    assert ExperimentConfig.load(tmp_path / "c.txt") == cfg


@pytest.mark.parametrize("text,key", [
    ("bogus = 1", "bogus"),
    ("theta = 1.5", "theta"),
    ("steps = 0", "steps"),
    ("steps = two", "steps"),
    ("pooling = median", "pooling"),
    ("scale_count = 6", "scale_count"),
    ("trainable_backbone = maybe", "trainable_backbone"),
    ("holdout_fraction = 0.05", "holdout_fraction"),
    ("image_size = 16", "image_size"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_text(text)
    assert exc.value.key == key
    assert key in str(exc.value)


def test_missing_equals():
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        ExperimentConfig.from_text("theta 0.5")
