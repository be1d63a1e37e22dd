import numpy as np
import pytest

from dtameta.diagnostics import (
    DegenerateDraws,
    UnknownParameter,
    diagnostics_summary,
    ess,
    split_rhat,
    summarize_draws,
    trace_density_data,
)


def test_rhat_separated_chains():
    rng = np.random.default_rng(0)
    chains = np.stack([rng.normal(0, 1, 1000), rng.normal(10, 1, 1000)])
    assert split_rhat(chains) > 3.0


def test_rhat_iid_chains():
    rng = np.random.default_rng(1)
    chains = rng.standard_normal((4, 1000))
    r = split_rhat(chains)
    assert 1.0 <= r < 1.01


def test_rhat_within_chain_drift():
    # stationary halves differ -> split rhat flags it even with one chain shape
    drift = np.concatenate([np.random.default_rng(2).normal(0, 1, 500),
                            np.random.default_rng(3).normal(5, 1, 500)])
    assert split_rhat(drift[None, :]) > 2.0


def test_rhat_degenerate():
    with pytest.raises(DegenerateDraws):
        split_rhat(np.ones((2, 100)))


def test_rhat_affine_invariance():
    rng = np.random.default_rng(4)
    chains = rng.standard_normal((4, 500))
    a = split_rhat(chains)
    b = split_rhat(3.5 * chains - 11.0)
    assert a == pytest.approx(b, rel=1e-12)


def test_rhat_rank_normalized_variant():
    rng = np.random.default_rng(5)
    chains = np.exp(rng.standard_normal((4, 500)))  # heavy tail
    r = split_rhat(chains, rank_normalized=True)
    assert 1.0 <= r < 1.02


def test_ess_iid():
    rng = np.random.default_rng(6)
    chains = rng.standard_normal((4, 1000))
    e = ess(chains)
    assert 3400 <= e <= 4600


def test_ess_ar1_analytic():
    # AR(1) with coefficient a has ESS ~ n (1-a)/(1+a)
    rng = np.random.default_rng(7)
    a = 0.9
    n, m = 20_000, 2
    chains = np.empty((m, n))
    for c in range(m):
        x = 0.0
        noise = rng.standard_normal(n)
        for i in range(n):
            x = a * x + noise[i]
            chains[c, i] = x
    expected = m * n * (1 - a) / (1 + a)
    e = ess(chains)
    assert abs(e - expected) / expected < 0.30


def test_ess_cap_relative_to_draws():
    rng = np.random.default_rng(8)
    chains = rng.standard_normal((4, 1000))
    assert ess(chains) <= 1.5 * 4000


def test_ess_degenerate():
    with pytest.raises(DegenerateDraws):
        ess(np.zeros((2, 100)))


def test_summarize_quantiles_type7():
    draws = {"x": np.arange(1.0, 101.0).reshape(1, 100)}
    row = summarize_draws(draws, ["x"])[0]
    assert row.median == pytest.approx(50.5)
    assert row.q2_5 == pytest.approx(3.475)
    assert row.q97_5 == pytest.approx(97.525)


def test_summarize_constant_and_unknown():
    draws = {"x": np.full((2, 50), 7.0)}
    row = summarize_draws(draws, ["x"])[0]
    assert row.median == row.q2_5 == row.q97_5 == 7.0
    assert row.rhat != row.rhat  # NaN for degenerate draws
    with pytest.raises(UnknownParameter):
        summarize_draws(draws, ["y"])


def test_summarize_monotone_quantiles():
    rng = np.random.default_rng(9)
    draws = {"x": rng.standard_normal((4, 250))}
    row = summarize_draws(draws, ["x"])[0]
    assert row.q2_5 <= row.median <= row.q97_5


def test_trace_density_conservation():
    rng = np.random.default_rng(10)
    draws = {"x": rng.standard_normal((3, 200))}
    data = trace_density_data(draws, "x", bins=17)
    assert sum(data.counts) == 600
    assert len(data.chains) == 3 and len(data.chains[0]) == 200
    assert len(data.bin_edges) == 18


def test_trace_density_single_bin_and_symmetry():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 4000))
    sym = trace_density_data({"x": x}, "x", bins=1)
    assert len(sym.counts) == 1 and sym.counts[0] == 8000
    data = trace_density_data({"x": np.concatenate([x, -x], axis=1)}, "x", bins=10)
    counts = np.array(data.counts, dtype=float)
    assert np.allclose(counts, counts[::-1], rtol=0, atol=0)  # exactly symmetric draws


def test_trace_density_unknown():
    with pytest.raises(UnknownParameter):
        trace_density_data({"x": np.zeros((1, 10))}, "y")


def test_diagnostics_summary_gate():
    rng = np.random.default_rng(12)
    good = {"a": rng.standard_normal((4, 400)), "b": rng.standard_normal((4, 400))}
    summary = diagnostics_summary(good, n_divergent=0, n_max_treedepth=0)
    assert summary.ok
    assert not diagnostics_summary(good, n_divergent=1, n_max_treedepth=0).ok
    bad = {"a": np.stack([rng.normal(0, 1, 400), rng.normal(8, 1, 400)])}
    assert not diagnostics_summary(bad, 0, 0).ok
