import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rbplan.diffusion import forward_diffuse, make_schedule
from rbplan.ood import (UncertaintyConfig, certify_bound, estimate_lipschitz, half_sq_dists, lemma1_constant,
                        log_perturbed_density, min_distance_sq, ood_identity_residual, ood_penalty,
                        run_theory_suite, smoothed_distance_sq, softmin_sandwich_violations,
                        uncertainty_bound, uncertainty_report, verify_lemma1)


def test_single_point_dataset_reduces_to_half_squared_distance():
    data = np.array([[1.0, 2.0]])
    q = np.array([4.0, 6.0])
    assert smoothed_distance_sq(q, data, 0.3) == pytest.approx(12.5)
    assert smoothed_distance_sq(q, data, 0.3, C1=0.0) == pytest.approx(12.5)
    assert min_distance_sq(q, data) == (12.5, 0)


def test_duplicate_points_shift_by_log_count():
    data = np.array([[0.0], [0.0], [0.0]])
    sig = 0.5
    # explicit sum form: -sigma^2 log(3 exp(-v/sigma^2)) = v - sigma^2 log 3
    assert smoothed_distance_sq(np.array([1.0]), data, sig, C1=0.0) == pytest.approx(0.5 - 0.25 * np.log(3))
    assert smoothed_distance_sq(np.array([1.0]), data, sig) == pytest.approx(0.5)


def test_far_query_does_not_underflow():
    data = np.array([[0.0, 0.0], [1.0, 0.0]])
    q = np.array([1e4, 0.0])
    d = smoothed_distance_sq(q, data, 0.01, C1=0.0)
    assert np.isfinite(d) and d == pytest.approx(0.5 * (1e4 - 1) ** 2, rel=1e-12)


def test_lemma1_matches_scipy_density():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(20, 3))
    assert verify_lemma1(data, 0.4, 50, rng) <= 1e-9
    assert verify_lemma1(data, 0.4, 0, rng) == 0.0
    m, n, sig = 20, 3, 0.4
    q = rng.normal(size=(5, 3))
    lhs = -sig ** 2 * log_perturbed_density(q, data, sig)
    rhs = smoothed_distance_sq(q, data, sig, C1=0.0) + lemma1_constant(m, n, sig)
    assert np.allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 30), n=st.integers(1, 6), sigma=st.floats(0.05, 1.0), seed=st.integers(0, 10_000))
def test_sandwich_property(m, n, sigma, seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(m, n))
    queries = rng.normal(size=(20, n)) * 3
    assert softmin_sandwich_violations(queries, data, sigma) == 0


def test_small_sigma_limit():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(16, 2))
    q = rng.normal(size=(50, 2))
    d_min = min_distance_sq(q, data)[0]
    for sig in (1e-1, 1e-3, 1e-6):
        gap = np.abs(smoothed_distance_sq(q, data, sig) - d_min)
        assert gap.max() <= sig ** 2 * np.log(16) + 1e-12


def test_lipschitz_estimate_examples():
    pts = np.array([[0.0], [1.0], [3.0]])
    assert estimate_lipschitz(pts, np.array([0.0, 2.0, 3.0])) == pytest.approx(2.0)
    assert estimate_lipschitz(np.array([[0.0], [0.0], [1.0]]), np.array([0.0, 5.0, 1.0])) == pytest.approx(4.0)
    with pytest.raises(ValueError, match="fewer-than-two"):
        estimate_lipschitz(np.array([[1.0], [1.0]]), np.array([0.0, 1.0]))


def test_bound_is_tight_on_data_and_respects_constants():
    data = np.array([[0.0], [1.0]])
    rep = uncertainty_report(np.array([0.0]), data, 0.1, 2.0, 0.5)
    assert rep.closest_index == 0 and rep.C2 == 0.0
    assert rep.bound == pytest.approx(0.5 + np.sqrt(2) * 2.0 * np.sqrt(rep.d_sigma_sq))
    assert uncertainty_bound(np.array([0.0]), data, 0.1, 0.0, 0.5) == 0.5
    with pytest.raises(ValueError):
        uncertainty_report(np.array([0.0]), data, 0.1, -1.0, 0.5)
    # C1 enters d_sigma and C2 with opposite signs, so the bound does not depend on it
    q = np.array([0.4])
    assert uncertainty_bound(q, data, 0.1, 1.0, 0.0, C1=10.0) == pytest.approx(uncertainty_bound(q, data, 0.1, 1.0, 0.0))


def test_certify_sine_bound():
    rng = np.random.default_rng(0)
    pts = np.sort(rng.uniform(0, 2 * np.pi, 50))[:, None]
    qs = rng.uniform(0, 2 * np.pi, (2000, 1))
    out = certify_bound(lambda s: np.abs(np.sin(s)), pts, qs, 0.1)
    assert out["violations"] == 0 and out["min_slack"] >= 0


def test_config_validation_and_empty_data():
    with pytest.raises(ValueError):
        UncertaintyConfig(sigma=0.0)
    with pytest.raises(ValueError):
        UncertaintyConfig(zeta=-1.0)
    with pytest.raises(ValueError, match="empty-dataset"):
        smoothed_distance_sq(np.zeros(2), np.zeros((0, 2)), 0.1)
    assert half_sq_dists(np.zeros(2), np.ones((3, 2))).shape == (1, 3)


def test_penalty_identity_and_gradient_path():
    sched = make_schedule(32)
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(5, 6, 3, generator=gen, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    k = torch.randint(1, 33, (5,), generator=gen)
    x_k = forward_diffuse(x0, k, eps, sched).requires_grad_(True)
    eps_hat = (eps + 0.2).requires_grad_(True)
    assert ood_identity_residual(x0, x_k, eps, eps_hat, k, sched) <= 1e-12
    pen = ood_penalty(x0, x_k, eps_hat, k, sched)
    pen.backward()
    assert x_k.grad is None and eps_hat.grad is not None
    assert torch.all(eps_hat.grad[:, 0] == 0)  # observed row excluded
    assert ood_penalty(x0, forward_diffuse(x0, k, eps, sched), eps, k, sched).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError, match="cache-shape-mismatch"):
        ood_penalty(x0, x_k, eps_hat[:, :3], k, sched)


def test_theory_suite_default_and_vacuous():
    rep = run_theory_suite(n_instances=10, n_queries=100)
    assert rep["ok"] and all(c["violations"] == 0 for c in rep["checks"].values())
    empty = run_theory_suite(n_queries=0)
    assert empty["ok"] and empty["checks"] == {}


def test_clamped_penalty_is_bounded_and_exact_inside_the_range():
    sched = make_schedule(64)
    gen = torch.Generator().manual_seed(1)
    x0 = torch.rand(4, 5, 3, generator=gen, dtype=torch.float64) * 2 - 1
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    k = torch.full((4,), 64)
    x_k = forward_diffuse(x0, k, eps, sched)
    wild = eps + 3.0
    assert ood_penalty(x0, x_k, wild, k, sched).item() > 1e3
    clipped = ood_penalty(x0, x_k, wild, k, sched, clip=1.0).item()
    assert 0 < clipped <= 4.0 * 4 * 3  # each entry of s - clamp(s_hat) is at most 2 in size
    k1 = torch.ones(4, dtype=torch.long)
    near = forward_diffuse(x0 * 0.5, k1, eps, sched)
    small = eps + 1e-3
    assert ood_penalty(x0 * 0.5, near, small, k1, sched, clip=1.0).item() == pytest.approx(
        ood_penalty(x0 * 0.5, near, small, k1, sched).item(), rel=1e-12)
