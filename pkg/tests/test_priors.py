import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from dtameta.priors import (
    BadInterval,
    BadLevel,
    LkjPrior,
    NormalPrior,
    PriorSpec,
    lkj2x2_interval,
    lkj2x2_logpdf,
    logit_normal_from_prob_interval,
    prior_predictive_summary,
    prob_interval_of_logit_normal,
)


def test_default_prior_interval_matches_probability_scale():
    lo, hi = prob_interval_of_logit_normal(NormalPrior(0.0, 1.5), 0.95)
    assert lo == pytest.approx(0.050, abs=0.005)
    assert hi == pytest.approx(0.950, abs=0.005)


def test_interval_unit_sd():
    # z = 1.95996..., expit(+-z)
    lo, hi = prob_interval_of_logit_normal(NormalPrior(0.0, 1.0), 0.95)
    z = norm.ppf(0.975)
    assert lo == pytest.approx(1 / (1 + np.exp(z)), abs=1e-12)
    assert (lo, hi) == pytest.approx((0.123, 0.877), abs=5e-4)


def test_interval_degenerate_sd():
    lo, hi = prob_interval_of_logit_normal(NormalPrior(0.0, 1e-12), 0.95)
    assert lo == pytest.approx(0.5, abs=1e-9)
    assert hi == pytest.approx(0.5, abs=1e-9)


def test_interval_bad_level():
    with pytest.raises(BadLevel):
        prob_interval_of_logit_normal(NormalPrior(0.0, 1.5), 1.2)


def test_elicitation_from_prob_interval():
    p = logit_normal_from_prob_interval(0.43, 0.96, 0.95)
    # logit(0.43) = -0.28185, logit(0.96) = 3.17805
    assert p.mean == pytest.approx(1.448, abs=1e-3)
    assert p.sd == pytest.approx(0.883, abs=1e-3)
    lo, hi = prob_interval_of_logit_normal(p, 0.95)
    assert lo == pytest.approx(0.43, abs=1e-12)
    assert hi == pytest.approx(0.96, abs=1e-12)


def test_elicitation_round_trip_default():
    # (0.05, 0.95) is the paper's rounding of the N(0, 1.5) interval;
    # the exact inversion gives sd = logit(0.95)/z = 1.5023
    p = logit_normal_from_prob_interval(0.05, 0.95, 0.95)
    assert p.mean == pytest.approx(0.0, abs=1e-12)
    assert p.sd == pytest.approx(1.5, abs=3e-3)


def test_elicitation_bad_interval():
    with pytest.raises(BadInterval):
        logit_normal_from_prob_interval(0.9, 0.4, 0.95)
    with pytest.raises(BadInterval):
        logit_normal_from_prob_interval(0.0, 0.5, 0.95)


def _lkj_cdf_oracle(rho, eta):
    """Quadrature of the normalized marginal density (independent of the beta CDF)."""
    total, _ = quad(lambda t: (1 - t * t) ** (eta - 1), -1, 1)
    part, _ = quad(lambda t: (1 - t * t) ** (eta - 1), -1, rho)
    return part / total


def test_lkj_interval_analytic_and_oracle():
    lo, hi = lkj2x2_interval(LkjPrior(2.0), 0.95)
    assert hi == pytest.approx(0.811, abs=2e-3)
    assert lo == pytest.approx(-hi, abs=1e-12)
    # oracle: the CDF at the bound is 0.975
    assert _lkj_cdf_oracle(hi, 2.0) == pytest.approx(0.975, abs=1e-9)
    # the closed-form cubic from the 2x2 case: F(rho) = 1/2 + 3/4 (rho - rho^3/3)
    assert 0.5 + 0.75 * (hi - hi**3 / 3) == pytest.approx(0.975, abs=1e-9)


def test_lkj_uniform_case():
    lo, hi = lkj2x2_interval(LkjPrior(1.0), 0.95)
    assert (lo, hi) == pytest.approx((-0.95, 0.95), abs=1e-12)


def test_lkj_level_zero():
    assert lkj2x2_interval(LkjPrior(2.0), 0.0) == pytest.approx((0.0, 0.0), abs=1e-12)


def test_lkj_density_integrates_to_one():
    for eta in (0.5, 1.0, 2.0, 4.0):
        total, err = quad(lambda t: np.exp(lkj2x2_logpdf(t, eta)), -1, 1)
        assert total == pytest.approx(1.0, abs=1e-8)


def test_prior_predictive_default_interval():
    summary = prior_predictive_summary(PriorSpec(), "bivariate", 50_000, seed=1)
    rows = {r.name: r for r in summary.rows}
    se = rows["pooled logit Se"]
    assert se.prob_q2_5 == pytest.approx(0.050, abs=0.01)
    assert se.prob_q97_5 == pytest.approx(0.950, abs=0.01)
    rho = rows["between-study correlation"]
    assert rho.q2_5 == pytest.approx(-0.811, abs=0.02)
    assert rho.q97_5 == pytest.approx(0.811, abs=0.02)


def test_prior_predictive_deterministic():
    a = prior_predictive_summary(PriorSpec(), "tlcm", 2000, seed=9)
    b = prior_predictive_summary(PriorSpec(), "tlcm", 2000, seed=9)
    assert a == b
    c = prior_predictive_summary(PriorSpec(), "tlcm", 2000, seed=10)
    assert c != a


def test_prior_predictive_ranges():
    summary = prior_predictive_summary(PriorSpec(), "tlcm", 5000, seed=3)
    for r in summary.rows:
        assert r.q2_5 <= r.median <= r.q97_5
        if r.prob_median is not None:
            assert 0.0 <= r.prob_q2_5 <= r.prob_median <= r.prob_q97_5 <= 1.0
        if "SD" in r.name:
            assert r.q2_5 >= 0.0


def test_prior_predictive_rejects_tiny_draw_count():
    with pytest.raises(ValueError):
        prior_predictive_summary(PriorSpec(), "bivariate", 10, seed=0)


def test_priors_file_round_trip():
    spec = PriorSpec.from_dict(
        {
            "bivariate": {
                "mu_se": {"prob_interval": [0.3, 0.99]},
                "sigma_se": {"sd": 0.8},
                "rho": {"eta": 4.0},
            },
            "tlcm": {
                "ref_se_by_type": {"DSM-IV": {"mean": 2.0, "sd": 0.5}},
                "prevalence": {"a": 2.0, "b": 5.0},
            },
        }
    )
    assert spec.bivariate.sigma_se.sd == 0.8
    assert spec.bivariate.sigma_se.truncated_at_zero
    assert spec.bivariate.rho.eta == 4.0
    lo, hi = prob_interval_of_logit_normal(spec.bivariate.mu_se, 0.95)
    assert (lo, hi) == pytest.approx((0.3, 0.99), abs=1e-12)
    se_prior, sp_prior = spec.tlcm.ref_prior("DSM-IV")
    assert se_prior.mean == 2.0
    other_se, _ = spec.tlcm.ref_prior("other")
    assert other_se.mean == pytest.approx(1.448, abs=1e-3)
    # defaults documented in to_dict survive a round trip
    again = PriorSpec.from_dict(spec.to_dict())
    assert again.bivariate == spec.bivariate
    assert again.tlcm.prevalence == spec.tlcm.prevalence
