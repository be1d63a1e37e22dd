import math

import numpy as np
import pytest

from dtameta.engine import (
    AdaptationFailure,
    ModelDensity,
    NonFiniteDensity,
    SamplerConfig,
    check_gradient,
    leapfrog,
    nuts_sample,
)


def _std_normal(dim):
    def eval_fn(theta):
        return float(-0.5 * theta @ theta), -theta

    return ModelDensity(dim=dim, eval=eval_fn)


def test_check_gradient_quadratic():
    m = _std_normal(4)
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert check_gradient(m, rng.standard_normal(4), 1e-6) < 1e-8


def test_check_gradient_detects_wrong_gradient():
    def eval_fn(theta):
        return float(-0.5 * theta @ theta), -2.0 * theta  # wrong by a factor 2

    m = ModelDensity(dim=3, eval=eval_fn)
    assert check_gradient(m, np.ones(3), 1e-6) > 0.1


def test_check_gradient_nonfinite():
    def eval_fn(theta):
        return float("nan"), theta

    with pytest.raises(NonFiniteDensity):
        check_gradient(ModelDensity(dim=2, eval=eval_fn), np.zeros(2), 1e-6)
    with pytest.raises(NonFiniteDensity):
        check_gradient(_std_normal(2), np.array([np.inf, 0.0]), 1e-6)


def test_leapfrog_reversibility():
    m = _std_normal(3)
    rng = np.random.default_rng(1)
    q = rng.standard_normal(3)
    r = rng.standard_normal(3)
    mass = np.array([1.0, 2.0, 0.5])
    q1, r1 = leapfrog(m, q, r, 0.3, mass)
    q2, r2 = leapfrog(m, q1, -r1, 0.3, mass)
    assert np.allclose(q2, q, atol=1e-12)
    assert np.allclose(-r2, r, atol=1e-12)


def test_leapfrog_energy_conservation_harmonic():
    m = _std_normal(1)
    q = np.array([1.0])
    r = np.array([0.5])
    mass = np.array([1.0])
    h0 = 0.5 * (q @ q) + 0.5 * (r @ r)
    step = 0.01
    for _ in range(1000):
        q, r = leapfrog(m, q, r, step, mass)
    h1 = 0.5 * (q @ q) + 0.5 * (r @ r)
    assert abs(h1 - h0) < 1e-3


def test_leapfrog_zero_momentum_zero_gradient():
    def eval_fn(theta):
        return 0.0, np.zeros_like(theta)

    m = ModelDensity(dim=2, eval=eval_fn)
    q, r = leapfrog(m, np.array([1.0, -1.0]), np.zeros(2), 0.5, np.ones(2))
    assert np.array_equal(q, np.array([1.0, -1.0]))
    assert np.array_equal(r, np.zeros(2))


def test_leapfrog_rejects_bad_mass():
    with pytest.raises(ValueError):
        leapfrog(_std_normal(2), np.zeros(2), np.zeros(2), 0.1, np.array([1.0, 0.0]))


def test_nuts_standard_normal_moments():
    cfg = SamplerConfig(chains=4, warmup=1000, samples=1000, seed=42)
    raw = nuts_sample(_std_normal(2), cfg)
    draws = raw.draws.reshape(-1, 2)
    assert np.all(np.abs(draws.mean(axis=0)) < 0.05)
    assert np.all(np.abs(draws.std(axis=0) - 1.0) < 0.05)
    assert raw.n_divergent == 0


def test_nuts_determinism_and_thread_equivalence():
    cfg = SamplerConfig(chains=3, warmup=200, samples=200, seed=9)
    m = _std_normal(3)
    a = nuts_sample(m, cfg)
    b = nuts_sample(m, cfg)
    c = nuts_sample(m, cfg, threads=3)
    assert np.array_equal(a.draws, b.draws)
    assert np.array_equal(a.draws, c.draws)
    d = nuts_sample(m, SamplerConfig(chains=3, warmup=200, samples=200, seed=10))
    assert not np.array_equal(a.draws, d.draws)


def test_nuts_detailed_balance_ks():
    from scipy.stats import norm

    cfg = SamplerConfig(chains=4, warmup=500, samples=1000, seed=3)
    raw = nuts_sample(_std_normal(1), cfg)
    draws = np.sort(raw.draws.reshape(-1))
    n = draws.size
    empirical = np.arange(1, n + 1) / n
    ks = np.max(np.abs(empirical - norm.cdf(draws)))
    assert ks < 0.02


def test_nuts_divergences_on_gradient_cliff():
    # density with a discontinuous gradient wall: exp(-|x|*scale) for x<0
    def eval_fn(theta):
        x = theta[0]
        if x < 0:
            return float(1000.0 * x), np.array([1000.0])
        return float(-0.5 * x * x), np.array([-x])

    m = ModelDensity(dim=1, eval=eval_fn)
    cfg = SamplerConfig(chains=2, warmup=300, samples=300, seed=1)
    raw = nuts_sample(m, cfg)
    assert raw.n_divergent > 0  # pathological geometry must be flagged
    assert raw.draws.shape == (2, 300, 1)  # run still completes


def test_nuts_all_draws_finite_density():
    m = _std_normal(2)
    cfg = SamplerConfig(chains=2, warmup=200, samples=200, seed=5)
    raw = nuts_sample(m, cfg)
    for chain in raw.chains:
        for q in chain.draws[::37]:
            value, _ = m.eval(q)
            assert math.isfinite(value)


def test_nuts_nonfinite_initialization():
    def eval_fn(theta):
        return float("-inf"), np.zeros_like(theta)

    m = ModelDensity(dim=2, eval=eval_fn)
    with pytest.raises(NonFiniteDensity):
        nuts_sample(m, SamplerConfig(chains=1, warmup=10, samples=10, seed=0))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(chains=0)
    with pytest.raises(ValueError):
        SamplerConfig(target_accept=1.5)
    with pytest.raises(ValueError):
        SamplerConfig(warmup=0)


def test_progress_callback_counts():
    calls = []
    cfg = SamplerConfig(chains=2, warmup=50, samples=50, seed=2)
    nuts_sample(_std_normal(1), cfg, progress=lambda c, i, t: calls.append((c, i, t)))
    per_chain = [sorted(i for c, i, t in calls if c == chain) for chain in range(2)]
    assert per_chain[0] == list(range(1, 101))
    assert per_chain[1] == list(range(1, 101))
    assert all(t == 100 for _, _, t in calls)
