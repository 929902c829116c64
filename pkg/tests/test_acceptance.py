"""Acceptance gate: each criterion is checked at its stated tolerance.

Every test records one PASS/FAIL line; the lines are repeated in the
pytest terminal summary. Run standalone with ``python3 tests/test_acceptance.py``.
"""

import math
import time
import warnings

import numpy as np
import pytest
import torch

from acceptance_log import record
from asda.aggregation import ReductionLayer, describe, describe_efficient, pool_region
from asda.config import ExperimentConfig
from asda.detector import compute_semantic_maps, init_detector_stack
from asda.evaluation import RetrievalGroundTruth, average_precision
from asda.experiments import ABLATION_AXES, build_model, evaluate_model, load_data, run_ablation, run_train
from asda.gradcheck import check_gradients, model_loss_fn, model_state_fn, sample_parameters
from asda.model import ASDAModel
from asda.postprocess import DEFAULT_SCALES, fit_whitening, multiscale_descriptor
from asda.regions import crop_soft_region_proposal, generate_candidate_regions, long_axis_counts, overlap_violations
from asda.synth import generate_dataset
from asda.training import build_tuples
from oracles import brute_force_ap, random_ap_case


def test_c01_path_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for n in range(100):
        h, w = (int(v) for v in rng.integers(1, 17, size=2))
        c, k, scales = int(rng.integers(1, 33)), int(rng.integers(1, 5)), int(rng.integers(0, 4))
        strategy = ["mac", "avg", "gem"][n % 3]
        f = torch.as_tensor(rng.uniform(0, 2, size=(h, w, c)))
        stack = init_detector_stack(c, k, float(rng.uniform(0.3, 0.9)), seed=n)
        regions = generate_candidate_regions(h, w, scales)
        red = ReductionLayer(k * c, int(rng.integers(1, k * c + 1)), seed=n)
        with torch.no_grad():
            a = describe(f, stack, regions, strategy, red)
            b = describe_efficient(f, stack, regions, strategy, red)
        worst = max(worst, float((a - b).abs().max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 30
    record("1 path equivalence", ok, f"max |naive - efficient| = {worst:.3g} (< 1e-9) in {elapsed:.1f}s (< 30s)")
    assert ok


def test_c02_gradient_oracle():
    start = time.perf_counter()
    model = ASDAModel.build(channels=(4, 4, 4), steps=2, theta=0.7, scales=1, dim=8, seed=0)
    ds = generate_dataset(0, 4, 3, 64)
    with torch.no_grad():
        fshape = tuple(model.features(ds.images[:1]).shape[1:])
    batch = build_tuples(ds.labels, np.arange(len(ds)), seed=0, negatives=2)[:2]
    params = dict(model.named_parameters())
    picks = sample_parameters(params, 200, seed=0)
    recs = check_gradients(model_loss_fn(model, ds.images, batch, 0.75), params, picks, h=1e-6,
                           state_fn=model_state_fn(model, ds.images, batch, 0.75))
    kept = [r for r in recs if not r.excluded]
    worst = max(r.rel_error for r in kept)
    elapsed = time.perf_counter() - start
    ok = fshape == (8, 8, 4) and len(picks) == 200 and worst < 1e-3 and elapsed < 120
    record("2 gradient oracle", ok,
           f"features {fshape}, {len(kept)}/{len(recs)} params checked ({len(recs) - len(kept)} at a "
           f"mask/hinge flip), max rel err = {worst:.3g} (< 1e-3) in {elapsed:.1f}s (< 120s)")
    assert ok


def test_c03_erasing_invariant():
    rng = np.random.default_rng(3)
    violations = checked = 0
    for n in range(50):
        h, w, c = (int(v) for v in rng.integers(2, 12, size=3))
        k = int(rng.integers(2, 6))
        theta = float(rng.uniform(0.2, 0.9))
        f = torch.as_tensor(rng.normal(0, 2, size=(h, w, c)))
        m, streams = compute_semantic_maps(f, init_detector_stack(c, k, theta, seed=n), return_streams=True)
        for step in range(1, k):
            claimed = (m[:step] >= theta).any(dim=0)
            checked += int(claimed.sum())
            violations += int((streams[step][claimed] != 0).any(dim=-1).sum())
    ok = violations == 0 and checked > 0
    record("3 erasing invariant", ok, f"{checked} claimed positions checked, {violations} non-zero (exact)")
    assert ok


def test_c04_ap_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        ids, pos, ign = random_ap_case(rng)
        got = average_precision(ids, RetrievalGroundTruth("q", frozenset(pos), frozenset(ign)))
        worst = max(worst, abs(got - brute_force_ap(ids, pos, ign)))
    hand = average_precision(["a", "x", "b"], RetrievalGroundTruth("q", frozenset({"a", "b"})))
    ok = worst < 1e-12 and abs(hand - 5 / 6) < 1e-15
    record("4 AP oracle", ok, f"max |AP - brute force| over 1000 cases = {worst:.3g} (< 1e-12); "
                              f"ranks {{1,3}} -> {hand:.6f}")
    assert ok


def _weighted_crops(seed, n_maps=20):
    """Strictly positive (proposal, crop) pairs as the pipeline produces them."""
    rng = np.random.default_rng(seed)
    out = []
    for n in range(n_maps):
        f = torch.as_tensor(rng.uniform(0.05, 1.0, size=(8, 8, 4)))
        with torch.no_grad():
            m = compute_semantic_maps(f, init_detector_stack(4, 2, 0.7, seed=n))
        for r in generate_candidate_regions(8, 8, 3):
            ys, xs = r.slices()
            out.append((crop_soft_region_proposal(m[0], r), f[ys, xs]))
    return out


def test_c05a_gem1_is_avg():
    worst = max(float((pool_region(s, c, "gem", p=1.0) - pool_region(s, c, "avg")).abs().max())
                for s, c in _weighted_crops(5))
    ok = worst < 1e-9
    record("5a GeM(p=1) = AVG", ok, f"max |GeM1 - AVG| = {worst:.3g} (< 1e-9)")
    assert ok


def test_c05b_gem100_near_mac():
    worst, worst_bound = 0.0, 0.0
    for s, c in _weighted_crops(5):
        mac = pool_region(s, c, "mac")
        gap = float((pool_region(s, c, "gem", p=100.0) - mac).abs().max())
        worst = max(worst, gap)
        # GeM_p >= N^(-1/p) * MAC, so the gap can legitimately reach this much
        worst_bound = max(worst_bound, float(mac.max()) * (1 - (s.numel()) ** (-1 / 100)))
    ok = worst < 1e-3
    record("5b GeM(p=100) ~ MAC", ok, f"max |GeM100 - MAC| = {worst:.3g} (< 1e-3); "
                                      f"analytic worst case for these crops {worst_bound:.3g}")
    assert ok


def test_c05c_zero_proposal():
    rng = np.random.default_rng(55)
    crop = torch.as_tensor(rng.uniform(0.1, 1.0, size=(5, 5, 8)))
    nonzero = sum(int(torch.count_nonzero(pool_region(torch.zeros(5, 5), crop, s))) for s in ("mac", "avg", "gem"))
    ok = nonzero == 0
    record("5c zero proposal", ok, f"{nonzero} non-zero entries over MAC/AVG/GeM (exact)")
    assert ok


@pytest.mark.slow
def test_c06_learning_signal():
    start = time.perf_counter()
    cfg = ExperimentConfig(seed=0, n_instances=20, views_per_instance=10, image_size=64).validate()
    data = load_data(cfg)
    base = evaluate_model(build_model(cfg), cfg, *data, modes=("ss",), setups=("M",))[("ss", "M")][0]
    result = run_train(cfg, data=data)
    trained = evaluate_model(result.model, cfg, *data, modes=("ss",), setups=("M",))[("ss", "M")][0]
    elapsed = time.perf_counter() - start
    ok = cfg.epochs <= 30 and trained - base >= 0.10 and elapsed < 20 * 60
    record("6 learning signal", ok, f"held-out mAP {base:.4f} -> {trained:.4f} after {cfg.epochs} epochs "
                                    f"(+{trained - base:.4f}, need >= 0.10) in {elapsed:.0f}s (< 1200s)")
    assert ok


ABLATION_TOY = dict(seed=0, n_instances=10, views_per_instance=4, image_size=32, channels=(8, 16, 16),
                    epochs=2, dim=64)


@pytest.mark.slow
@pytest.mark.filterwarnings("ignore:intra-pair scatter")
def test_c07_ablation_tables(tmp_path):
    cfg = ExperimentConfig(**ABLATION_TOY).validate()
    expected = {
        "L": [0, 1, 2, 3, 4, 5],
        "dim": [8, 16, 32, 64],
        "proposal": ["HDA", "SDA", "ASDA"],
        "pooling": ["AVG", "GEM", "MAC"],
        "postprocess": ["SS", "MS+LW"],
    }
    problems = []
    for axis, settings in expected.items():
        first = run_ablation(cfg, axis, tmp_path)
        again = run_ablation(cfg, axis)
        lines = (tmp_path / f"ablation_{axis}.csv").read_text().splitlines()
        if [r["setting"] for r in first] != settings or len(lines) != len(settings) + 1:
            problems.append(f"{axis}: rows {[r['setting'] for r in first]}")
        if any(r[k] is None or not math.isfinite(r[k]) for r in first for k in ("map_m", "map_h")):
            problems.append(f"{axis}: empty mAP cell")
        if first != again:
            problems.append(f"{axis}: rerun differs")
        if not (tmp_path / f"ablation_{axis}.png").exists():
            problems.append(f"{axis}: missing figure")
    assert set(expected) == set(ABLATION_AXES)
    ok = not problems
    record("7 ablation tables", ok, "5 axes complete and reproducible" if ok else "; ".join(problems))
    assert ok


def test_c08_whitening():
    rng = np.random.default_rng(8)
    base = rng.normal(size=(500, 16))
    mix = rng.normal(size=(16, 16))
    pairs = np.stack([base + rng.normal(size=(500, 16)) @ mix, base + rng.normal(size=(500, 16)) @ mix], axis=1)
    proj = fit_whitening(pairs, pairs.reshape(-1, 16))
    diff = (pairs[:, 0] - pairs[:, 1]) @ proj.projection.T
    dev = float(np.abs(diff.T @ diff / len(diff) - np.eye(16)).max())
    ok = dev < 1e-6
    record("8 whitening", ok, f"max |cov(P(x_i - x_j)) - I| = {dev:.3g} (< 1e-6), 500 pairs, D=16")
    assert ok


def test_c09_multiscale_degenerate():
    model = ASDAModel.build(channels=(8, 16, 16), steps=4, scales=3, dim=32, seed=9).eval()
    images = generate_dataset(9, 2, 2, 64).images
    with torch.no_grad():
        dev = float((multiscale_descriptor(images, model, (1, 1, 1)) - model(images)).abs().max())
    defaults_ok = np.allclose(DEFAULT_SCALES, (1, 1 / math.sqrt(2), 0.5), rtol=0, atol=1e-15)
    ok = dev < 1e-9 and defaults_ok
    record("9 multi-scale (1,1,1)", ok, f"max |MS - SS| = {dev:.3g} (< 1e-9); default scales {DEFAULT_SCALES}")
    assert ok


def test_c10_sliding_windows():
    regions = generate_candidate_regions(32, 64, 5)
    counts = long_axis_counts(regions, 32, 64)
    bad = overlap_violations(regions)
    stable = regions == generate_candidate_regions(32, 64, 5)
    ok = tuple(counts.values()) == (2, 3, 4, 5, 6) and not bad and stable
    record("10 sliding windows", ok, f"32x64 long-axis counts {tuple(counts.values())}, "
                                     f"{len(bad)} overlap violations, deterministic={stable}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
