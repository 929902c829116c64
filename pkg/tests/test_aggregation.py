import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from asda.aggregation import (
    ReductionLayer,
    aggregate_map,
    concat_and_reduce,
    describe,
    describe_efficient,
    is_unit_or_zero,
    l2_normalize,
    load_descriptor,
    pool_region,
    save_descriptor,
    save_descriptors_csv,
)
from asda.detector import DetectorStack, compute_semantic_maps, init_detector_stack
from asda.regions import CandidateRegion, generate_candidate_regions


def _random_case(seed, h=6, w=9, c=5, k=3, scales=2):
    g = np.random.default_rng(seed)
    f = torch.as_tensor(g.uniform(size=(h, w, c)))
    stack = init_detector_stack(c, k, 0.6, seed=seed)
    return f, stack, generate_candidate_regions(h, w, scales)


class TestPooling:
    def test_hand_example(self):
        srp = torch.tensor([[1.0, 0.5]])
        crop = torch.tensor([[[2.0], [4.0]]])
        assert pool_region(srp, crop, "mac").item() == 2.0
        assert pool_region(srp, crop, "avg").item() == 2.0

    @pytest.mark.parametrize("strategy", ["mac", "avg", "gem"])
    def test_zero_proposal_gives_zero_vector(self, strategy, rng):
        crop = torch.as_tensor(rng.uniform(size=(3, 4, 6)))
        out = pool_region(torch.zeros(3, 4), crop, strategy)
        assert torch.count_nonzero(out) == 0

    def test_gem_one_is_avg(self, rng):
        srp = torch.as_tensor(rng.uniform(size=(4, 4)))
        crop = torch.as_tensor(rng.uniform(size=(4, 4, 8)))
        np.testing.assert_allclose(pool_region(srp, crop, "gem", p=1.0), pool_region(srp, crop, "avg"),
                                   rtol=0, atol=1e-12)

    def test_gem_three_matches_direct_formula(self, rng):
        x = rng.uniform(0.1, 2.0, size=(3, 5, 4))
        got = pool_region(torch.ones(3, 5), torch.as_tensor(x), "gem", p=3.0).numpy()
        np.testing.assert_allclose(got, np.mean(x ** 3, axis=(0, 1)) ** (1 / 3), rtol=1e-13)

    @given(st.integers(1, 40), st.floats(1.0, 200.0))
    @settings(max_examples=60, deadline=None)
    def test_gem_between_mean_bound_and_max(self, n, p):
        g = np.random.default_rng(n)
        x = torch.as_tensor(g.uniform(0.01, 3.0, size=(1, n, 3)))
        gem = pool_region(torch.ones(1, n), x, "gem", p=p)
        mac = pool_region(torch.ones(1, n), x, "mac")
        assert (gem <= mac * (1 + 1e-12)).all()
        assert (gem >= mac * n ** (-1.0 / p) * (1 - 1e-12)).all()

    def test_gem_large_p_approaches_mac(self, rng):
        x = torch.as_tensor(rng.uniform(0.01, 1.0, size=(4, 4, 6)))
        srp = torch.ones(4, 4)
        gaps = [float((pool_region(srp, x, "mac") - pool_region(srp, x, "gem", p=p)).abs().max())
                for p in (10, 100, 1000)]
        assert gaps[0] > gaps[1] > gaps[2]

    def test_gem_large_p_is_finite(self):
        x = torch.full((2, 2, 3), 1e6)
        out = pool_region(torch.ones(2, 2), x, "gem", p=300.0)
        np.testing.assert_allclose(out, 1e6, rtol=1e-12)

    def test_shape_mismatch_and_unknown_strategy(self):
        with pytest.raises(ValueError, match="differ"):
            pool_region(torch.ones(2, 2), torch.ones(3, 2, 1))
        with pytest.raises(ValueError, match="unknown"):
            pool_region(torch.ones(2, 2), torch.ones(2, 2, 1), "median")
        with pytest.raises(ValueError, match=">= 1"):
            pool_region(torch.ones(2, 2), torch.ones(2, 2, 1), "gem", p=0.5)

    def test_mac_monotone_in_region(self, rng):
        m = torch.as_tensor(rng.uniform(size=(6, 6)))
        f = torch.as_tensor(rng.uniform(size=(6, 6, 4)))
        small, big = CandidateRegion(1, 1, 2, 2), CandidateRegion(0, 0, 4, 4)
        a = pool_region(m[1:3, 1:3], f[1:3, 1:3], "mac")
        b = pool_region(m[:4, :4], f[:4, :4], "mac")
        assert small.fits(6, 6) and big.fits(6, 6)
        assert (b >= a).all()


class TestAggregation:
    def test_single_region(self):
        v = torch.tensor([3.0, 4.0])
        np.testing.assert_allclose(aggregate_map([v]), [0.6, 0.8])

    def test_two_identical_vectors(self):
        v = torch.tensor([1.0, 2.0, 2.0])
        np.testing.assert_allclose(aggregate_map([v, v]), aggregate_map([v]), rtol=1e-15)

    def test_all_zero_regions_stay_zero(self):
        out = aggregate_map(torch.zeros(4, 5))
        assert torch.count_nonzero(out) == 0 and torch.isfinite(out).all()

    def test_zero_vector_has_finite_gradient(self):
        x = torch.zeros(3, requires_grad=True)
        l2_normalize(x).sum().backward()
        assert torch.isfinite(x.grad).all()

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_map([])


class TestReduction:
    def test_concat_length(self):
        r = ReductionLayer(128, 128)
        out = concat_and_reduce(torch.ones(4, 32), r)
        assert out.shape == (128,)

    def test_identity_projection(self, rng):
        g = torch.as_tensor(rng.normal(size=(3, 4)))
        out = concat_and_reduce(g, ReductionLayer.identity(12))
        np.testing.assert_allclose(out.detach(), l2_normalize(g.reshape(-1)), rtol=1e-15)

    def test_orthonormal_rows(self):
        w = ReductionLayer(24, 8, seed=3).weight.detach()
        np.testing.assert_allclose(w @ w.T, torch.eye(8), atol=1e-12)

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            ReductionLayer(8, 9)
        with pytest.raises(ValueError, match="length"):
            concat_and_reduce(torch.ones(2, 3), ReductionLayer(8, 4))


class TestDescribe:
    def test_single_region_single_step_collapse(self, rng):
        f = torch.as_tensor(rng.uniform(size=(5, 7, 4)))
        stack = init_detector_stack(4, 1, 0.7, seed=0)
        regions = generate_candidate_regions(5, 7, 0)
        m = compute_semantic_maps(f, stack)[0]
        expected = l2_normalize((m.unsqueeze(-1) * f).amax(dim=(0, 1)))
        got = describe(f, stack, regions, "mac", ReductionLayer.identity(4))
        np.testing.assert_allclose(got.detach(), expected.detach(), rtol=1e-14)

    @pytest.mark.parametrize("strategy", ["mac", "avg", "gem"])
    @pytest.mark.parametrize("seed", range(4))
    def test_routes_agree(self, strategy, seed):
        f, stack, regions = _random_case(seed)
        red = ReductionLayer(stack.steps * f.shape[-1], 7, seed=seed)
        a = describe(f, stack, regions, strategy, red)
        b = describe_efficient(f, stack, regions, strategy, red)
        assert (a - b).abs().max().item() < 1e-12

    def test_routes_agree_batched_and_hard(self, rng):
        f = torch.as_tensor(rng.uniform(size=(3, 6, 6, 4)))
        stack = init_detector_stack(4, 2, 0.7)
        regions = generate_candidate_regions(6, 6, 3)
        for proposal in ("soft", "hard"):
            a = describe(f, stack, regions, proposal=proposal)
            b = describe_efficient(f, stack, regions, proposal=proposal)
            assert a.shape == (3, 8)
            np.testing.assert_allclose(a.detach(), b.detach(), atol=1e-13)

    def test_routes_have_equal_gradients(self):
        f, stack, regions = _random_case(9)
        red = ReductionLayer(stack.steps * f.shape[-1], 6, seed=1)
        probe = torch.linspace(-1, 1, 6)
        grads = []
        for fn in (describe, describe_efficient):
            stack.zero_grad()
            red.zero_grad()
            ff = f.clone().requires_grad_()
            (fn(ff, stack, regions, "gem", red) * probe).sum().backward()
            grads.append([ff.grad.clone(), stack.weight.grad.clone(), red.weight.grad.clone()])
        for a, b in zip(*grads):
            np.testing.assert_allclose(a, b, atol=1e-12)

    @pytest.mark.parametrize("strategy", ["mac", "avg", "gem"])
    def test_unit_norm(self, strategy):
        f, stack, regions = _random_case(2)
        d = describe_efficient(f, stack, regions, strategy, ReductionLayer(15, 10))
        assert abs(d.norm().item() - 1.0) < 1e-12

    def test_positions_outside_every_proposal_do_not_matter(self, rng):
        # one step, a hand-set detector that fires only on channel 0
        stack = DetectorStack(3, 1, 0.7)
        with torch.no_grad():
            stack.weight.copy_(torch.tensor([[60.0, 0.0, 0.0]]))
            stack.bias.fill_(-30.0)
        f = torch.as_tensor(rng.uniform(size=(6, 6, 3)))
        f[:, :, 0] = 0.0
        f[2:4, 2:4, 0] = 1.0
        regions = generate_candidate_regions(6, 6, 2)
        base = describe(f, stack, regions)
        g = f.clone()
        g[0, :, 1:] += 5.0  # background rows the detector scores as sigmoid(-30)
        np.testing.assert_allclose(describe(g, stack, regions).detach(), base.detach(), atol=1e-11)

    def test_region_outside_map_rejected(self, rng):
        f, stack, _ = _random_case(0)
        with pytest.raises(ValueError, match="outside"):
            describe(f, stack, [CandidateRegion(5, 5, 6, 6, 1)])
        with pytest.raises(ValueError):
            describe(f, stack, [])

    def test_deterministic(self):
        f, stack, regions = _random_case(4)
        a = describe_efficient(f, stack, regions)
        b = describe_efficient(f, stack, regions)
        assert a.detach().numpy().tobytes() == b.detach().numpy().tobytes()


def test_descriptor_file_round_trip(tmp_path, rng):
    d = rng.normal(size=12)
    save_descriptor(tmp_path / "d.bin", d)
    assert load_descriptor(tmp_path / "d.bin").tobytes() == d.tobytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXXXXXX\x01\x00\x00\x00")
    with pytest.raises(ValueError):
        load_descriptor(tmp_path / "bad.bin")


def test_descriptor_csv(tmp_path):
    save_descriptors_csv(tmp_path / "d.csv", ["a", "b"], np.eye(2))
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].split(",") == ["id", "d0", "d1"]
    assert lines[1].startswith("a,1")


def test_is_unit_or_zero():
    assert is_unit_or_zero(np.array([0.6, 0.8]))
    assert is_unit_or_zero(np.zeros(3))
    assert not is_unit_or_zero(np.array([1.0, 1.0]))
