"""Latent class meta-analysis without a gold standard.

Two tests (index and reference) are cross-classified per study; disease status
is latent with per-study prevalence. Within each disease class the tests'
covariance is constrained by cell nonnegativity to a feasible interval; the
conditional-dependence model places a shared fraction of that interval per
class, which keeps every study's 2x2 cell probabilities valid for any random
effects. Reference tests may differ by study via a categorical covariate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import expit as _expit
from scipy.special import gammaln

from .data import Dataset, dataset_hash
from .engine import ModelDensity, SamplerConfig, nuts_sample
from .priors import PriorSpec, lkj2x2_logpdf
from .results import FitResult, build_fit_result
from .bivariate import BadCovariate, _halfnormal_const, _normal_const

__all__ = [
    "OutOfDomain",
    "InfeasibleCovariance",
    "ZeroMargin",
    "MissingRefType",
    "TlcmConfig",
    "CorrelationResidual",
    "covariance_bounds",
    "cell_probabilities",
    "phi_coefficient",
    "tlcm_density",
    "tlcm_log_posterior",
    "fit_tlcm",
    "correlation_residuals",
]

_LOG_2PI = math.log(2 * math.pi)


class OutOfDomain(ValueError):
    pass


class InfeasibleCovariance(ValueError):
    pass


class ZeroMargin(ValueError):
    pass


class MissingRefType(ValueError):
    pass


@dataclass(frozen=True)
class TlcmConfig:
    index_effects: str = "random"    # "fixed" | "random"
    ref_effects: str = "fixed"       # "fixed" | "random"
    dependence: str = "independent"  # "independent" | "dependent"
    ref_test_column: str | None = None
    # correlated (logit Se, logit Sp) random effects; False gives independent
    # normal effects per component
    correlated_effects: bool = True

    def __post_init__(self):
        if self.index_effects not in ("fixed", "random"):
            raise ValueError(f"bad index_effects {self.index_effects!r}")
        if self.ref_effects not in ("fixed", "random"):
            raise ValueError(f"bad ref_effects {self.ref_effects!r}")
        if self.dependence not in ("independent", "dependent"):
            raise ValueError(f"bad dependence {self.dependence!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TlcmConfig":
        return cls(
            index_effects=d.get("index", d.get("index_effects", "random")),
            ref_effects=d.get("refs", d.get("ref_effects", "fixed")),
            dependence=d.get("dependence", "independent"),
            ref_test_column=d.get("ref_column", d.get("ref_test_column")),
            correlated_effects=d.get("correlated_effects", True),
        )


@dataclass(frozen=True)
class CorrelationResidual:
    study_id: str
    observed_phi: float
    median: float
    lo: float
    hi: float


def covariance_bounds(a: float, b: float):
    """Feasible within-class covariance between two tests with accuracies a, b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any((a <= 0) | (a >= 1) | (b <= 0) | (b >= 1)):
        raise OutOfDomain("accuracies must lie strictly inside (0, 1)")
    lo = np.maximum(-a * b, -(1 - a) * (1 - b))
    hi = np.minimum(a * (1 - b), (1 - a) * b)
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi


def cell_probabilities(p, se1, sp1, se2, sp2, cov_d=0.0, cov_nd=0.0):
    """Joint cell probabilities for (index, reference) = (+,+), (+,-), (-,+), (-,-)."""
    lo_d, hi_d = covariance_bounds(se1, se2)
    lo_nd, hi_nd = covariance_bounds(sp1, sp2)
    tol = 1e-12
    if np.any(np.asarray(cov_d) < np.asarray(lo_d) - tol) or np.any(
        np.asarray(cov_d) > np.asarray(hi_d) + tol
    ):
        raise InfeasibleCovariance(f"cov_d={cov_d} outside [{lo_d}, {hi_d}]")
    if np.any(np.asarray(cov_nd) < np.asarray(lo_nd) - tol) or np.any(
        np.asarray(cov_nd) > np.asarray(hi_nd) + tol
    ):
        raise InfeasibleCovariance(f"cov_nd={cov_nd} outside [{lo_nd}, {hi_nd}]")
    p = np.asarray(p, dtype=float)
    q11 = p * (se1 * se2 + cov_d) + (1 - p) * ((1 - sp1) * (1 - sp2) + cov_nd)
    q10 = p * (se1 * (1 - se2) - cov_d) + (1 - p) * ((1 - sp1) * sp2 - cov_nd)
    q01 = p * ((1 - se1) * se2 - cov_d) + (1 - p) * (sp1 * (1 - sp2) - cov_nd)
    q00 = p * ((1 - se1) * (1 - se2) + cov_d) + (1 - p) * (sp1 * sp2 + cov_nd)
    if p.ndim == 0:
        return float(q11), float(q10), float(q01), float(q00)
    return q11, q10, q01, q00


def phi_coefficient(tp, fp, fn, tn) -> float:
    """Fourfold-point correlation of a 2x2 table."""
    tp, fp, fn, tn = float(tp), float(fp), float(fn), float(tn)
    margins = ((tp + fp), (fn + tn), (tp + fn), (fp + tn))
    if any(m <= 0 for m in margins):
        raise ZeroMargin("all four table margins must be positive")
    return (tp * tn - fp * fn) / math.sqrt(margins[0] * margins[1] * margins[2] * margins[3])


def _ref_assignment(d: Dataset, c: TlcmConfig):
    """Reference-test types per study: (levels, codes array)."""
    if c.ref_test_column is None:
        return ["reference"], np.zeros(len(d.studies), dtype=int)
    kind = d.covariate_kind(c.ref_test_column)
    if kind is None:
        raise BadCovariate(f"no covariate named {c.ref_test_column!r}")
    if kind != "categorical":
        raise BadCovariate(f"reference-test column must be categorical")
    levels = d.levels(c.ref_test_column)
    codes = []
    for s in d.studies:
        v = str(s.covariates.get(c.ref_test_column, "")).strip()
        if not v:
            raise MissingRefType(f"study {s.study_id!r} has no reference-test type")
        codes.append(levels.index(v))
    return levels, np.asarray(codes, dtype=int)


class _Layout:
    """Unconstrained parameter indices for a given TLCM configuration."""

    def __init__(self, k: int, n_ref: int, c: TlcmConfig):
        self.k = k
        self.n_ref = n_ref
        off = 0
        self.prev = slice(off, off + k); off += k
        self.m_se1 = off; off += 1
        self.m_sp1 = off; off += 1
        self.index_random = c.index_effects == "random"
        self.ref_random = c.ref_effects == "random"
        self.corr = c.correlated_effects
        self.dependent = c.dependence == "dependent"
        if self.index_random:
            self.ls_se1 = off; off += 1
            self.ls_sp1 = off; off += 1
            if self.corr:
                self.rho1 = off; off += 1
            self.z1 = slice(off, off + k); off += k
            self.z2 = slice(off, off + k); off += k
        self.m_se2 = slice(off, off + n_ref); off += n_ref
        self.m_sp2 = slice(off, off + n_ref); off += n_ref
        if self.ref_random:
            self.ls_se2 = off; off += 1
            self.ls_sp2 = off; off += 1
            if self.corr:
                self.rho2 = off; off += 1
            self.w1 = slice(off, off + k); off += k
            self.w2 = slice(off, off + k); off += k
        if self.dependent:
            self.u_d = off; off += 1
            self.u_nd = off; off += 1
        self.dim = off

    def names(self, d: Dataset, levels: list[str]) -> list[str]:
        ids = [s.study_id for s in d.studies]
        out = [f"logit_prev[{i}]" for i in ids]
        out += ["mu_se_index", "mu_sp_index"]
        if self.index_random:
            out += ["log_sigma_se_index", "log_sigma_sp_index"]
            if self.corr:
                out += ["atanh_rho_index"]
            out += [f"z_se_index[{i}]" for i in ids]
            out += [f"z_sp_index[{i}]" for i in ids]
        out += [f"mu_se_ref[{l}]" for l in levels]
        out += [f"mu_sp_ref[{l}]" for l in levels]
        if self.ref_random:
            out += ["log_sigma_se_ref", "log_sigma_sp_ref"]
            if self.corr:
                out += ["atanh_rho_ref"]
            out += [f"z_se_ref[{i}]" for i in ids]
            out += [f"z_sp_ref[{i}]" for i in ids]
        if self.dependent:
            out += ["logit_dep_frac_diseased", "logit_dep_frac_nondiseased"]
        return out


def tlcm_density(d: Dataset, c: TlcmConfig, p: PriorSpec) -> ModelDensity:
    """Joint log-posterior with analytic gradient for the latent class model."""
    k = len(d.studies)
    if k < 2:
        raise ValueError("latent class meta-analysis needs >= 2 studies")
    levels, codes = _ref_assignment(d, c)
    n_ref = len(levels)
    lay = _Layout(k, n_ref, c)

    counts = np.array([[s.tp, s.fp, s.fn, s.tn] for s in d.studies], dtype=float)
    n_tot = counts.sum(axis=1)
    mn_const = float(np.sum(gammaln(n_tot + 1)) - np.sum(gammaln(counts + 1)))
    tp_, fp_, fn_, tn_ = counts[:, 0], counts[:, 1], counts[:, 2], counts[:, 3]

    tl = p.tlcm
    prev_a, prev_b = tl.prevalence.a, tl.prevalence.b
    prev_const = -k * float(
        math.lgamma(prev_a) + math.lgamma(prev_b) - math.lgamma(prev_a + prev_b)
    )
    mse1_mean, mse1_var = tl.index_se.mean, tl.index_se.sd ** 2
    msp1_mean, msp1_var = tl.index_sp.mean, tl.index_sp.sd ** 2
    idx_const = _normal_const(tl.index_se) + _normal_const(tl.index_sp)
    ref_se_priors = [tl.ref_prior(l)[0] for l in levels]
    ref_sp_priors = [tl.ref_prior(l)[1] for l in levels]
    rse_mean = np.array([q.mean for q in ref_se_priors])
    rse_var = np.array([q.sd ** 2 for q in ref_se_priors])
    rsp_mean = np.array([q.mean for q in ref_sp_priors])
    rsp_var = np.array([q.sd ** 2 for q in ref_sp_priors])
    ref_const = float(
        sum(_normal_const(q) for q in ref_se_priors)
        + sum(_normal_const(q) for q in ref_sp_priors)
    )
    hn1_const = _halfnormal_const(tl.sigma_index_se) + _halfnormal_const(tl.sigma_index_sp)
    hn2_const = _halfnormal_const(tl.sigma_ref_se) + _halfnormal_const(tl.sigma_ref_sp)
    s1se_mean, s1se_var = tl.sigma_index_se.mean, tl.sigma_index_se.sd ** 2
    s1sp_mean, s1sp_var = tl.sigma_index_sp.mean, tl.sigma_index_sp.sd ** 2
    s2se_mean, s2se_var = tl.sigma_ref_se.mean, tl.sigma_ref_se.sd ** 2
    s2sp_mean, s2sp_var = tl.sigma_ref_sp.mean, tl.sigma_ref_sp.sd ** 2
    eta1 = tl.rho_index.eta
    eta2 = tl.rho_ref.eta
    lkj1_const = float(lkj2x2_logpdf(0.0, eta1))
    lkj2_const = float(lkj2x2_logpdf(0.0, eta2))

    dim = lay.dim

    def eval_fn(theta: np.ndarray) -> tuple[float, np.ndarray]:
        if not np.all(np.isfinite(theta)):
            return -math.inf, np.zeros(dim)
        if np.any(np.abs(theta) > 300):
            return -math.inf, np.zeros(dim)

        grad = np.zeros(dim)
        value = mn_const + prev_const + idx_const + ref_const

        pr = theta[lay.prev]
        prev = _expit(pr)
        # Beta(a, b) prior with logit Jacobian: a*log(p) + b*log(1-p), computed
        # stably as -a*softplus(-x) - b*softplus(x)
        value += float(
            -prev_a * np.sum(np.logaddexp(0.0, -pr)) - prev_b * np.sum(np.logaddexp(0.0, pr))
        )

        # index test study-level logits
        a1_mean = theta[lay.m_se1]
        b1_mean = theta[lay.m_sp1]
        if lay.index_random:
            ls_se1 = theta[lay.ls_se1]
            ls_sp1 = theta[lay.ls_sp1]
            if abs(ls_se1) > 30 or abs(ls_sp1) > 30:
                return -math.inf, np.zeros(dim)
            s_se1 = math.exp(ls_se1)
            s_sp1 = math.exp(ls_sp1)
            z1 = theta[lay.z1]
            z2 = theta[lay.z2]
            if lay.corr:
                raw_rho1 = theta[lay.rho1]
                if abs(raw_rho1) > 18.0:
                    return -math.inf, np.zeros(dim)
                rho1 = math.tanh(raw_rho1)
                one_m1 = 1.0 - rho1 * rho1
                c1 = math.sqrt(one_m1)
                re1 = rho1 * z1 + c1 * z2
            else:
                re1 = z2
            a1 = a1_mean + s_se1 * z1
            b1 = b1_mean + s_sp1 * re1
        else:
            a1 = np.full(k, a1_mean)
            b1 = np.full(k, b1_mean)

        # reference test study-level logits (per type)
        mse2 = theta[lay.m_se2]
        msp2 = theta[lay.m_sp2]
        if lay.ref_random:
            ls_se2 = theta[lay.ls_se2]
            ls_sp2 = theta[lay.ls_sp2]
            if abs(ls_se2) > 30 or abs(ls_sp2) > 30:
                return -math.inf, np.zeros(dim)
            s_se2 = math.exp(ls_se2)
            s_sp2 = math.exp(ls_sp2)
            w1 = theta[lay.w1]
            w2 = theta[lay.w2]
            if lay.corr:
                raw_rho2 = theta[lay.rho2]
                if abs(raw_rho2) > 18.0:
                    return -math.inf, np.zeros(dim)
                rho2 = math.tanh(raw_rho2)
                one_m2 = 1.0 - rho2 * rho2
                c2 = math.sqrt(one_m2)
                re2 = rho2 * w1 + c2 * w2
            else:
                re2 = w2
            a2 = mse2[codes] + s_se2 * w1
            b2 = msp2[codes] + s_sp2 * re2
        else:
            a2 = mse2[codes]
            b2 = msp2[codes]

        se1 = _expit(a1)
        sp1 = _expit(b1)
        se2 = _expit(a2)
        sp2 = _expit(b2)

        # within-class covariances on the feasible interval
        if lay.dependent:
            u_d = _expit(theta[lay.u_d])
            u_nd = _expit(theta[lay.u_nd])
            prod_d = se1 * se2
            alt_d = (1 - se1) * (1 - se2)
            mask_lo_d = prod_d <= alt_d
            lo_d = -np.where(mask_lo_d, prod_d, alt_d)
            hi_a = se1 * (1 - se2)
            hi_b = (1 - se1) * se2
            mask_hi_d = hi_a <= hi_b
            hi_d = np.where(mask_hi_d, hi_a, hi_b)
            cov_d = lo_d + u_d * (hi_d - lo_d)

            prod_n = sp1 * sp2
            alt_n = (1 - sp1) * (1 - sp2)
            mask_lo_n = prod_n <= alt_n
            lo_nd = -np.where(mask_lo_n, prod_n, alt_n)
            hi_an = sp1 * (1 - sp2)
            hi_bn = (1 - sp1) * sp2
            mask_hi_n = hi_an <= hi_bn
            hi_nd = np.where(mask_hi_n, hi_an, hi_bn)
            cov_nd = lo_nd + u_nd * (hi_nd - lo_nd)
            # uniform(0,1) priors contribute only the logit Jacobian,
            # log(u(1-u)) = -softplus(x) - softplus(-x) for u = expit(x)
            raw_ud = theta[lay.u_d]
            raw_und = theta[lay.u_nd]
            value += float(
                -np.logaddexp(0.0, raw_ud) - np.logaddexp(0.0, -raw_ud)
                - np.logaddexp(0.0, raw_und) - np.logaddexp(0.0, -raw_und)
            )
        else:
            cov_d = np.zeros(k)
            cov_nd = np.zeros(k)

        q11 = prev * (se1 * se2 + cov_d) + (1 - prev) * ((1 - sp1) * (1 - sp2) + cov_nd)
        q10 = prev * (se1 * (1 - se2) - cov_d) + (1 - prev) * ((1 - sp1) * sp2 - cov_nd)
        q01 = prev * ((1 - se1) * se2 - cov_d) + (1 - prev) * (sp1 * (1 - sp2) - cov_nd)
        q00 = prev * ((1 - se1) * (1 - se2) + cov_d) + (1 - prev) * (sp1 * sp2 + cov_nd)
        if np.any(q11 <= 0) or np.any(q10 <= 0) or np.any(q01 <= 0) or np.any(q00 <= 0):
            return -math.inf, np.zeros(dim)

        value += float(
            tp_ @ np.log(q11) + fp_ @ np.log(q10) + fn_ @ np.log(q01) + tn_ @ np.log(q00)
        )

        g11 = tp_ / q11
        g10 = fp_ / q10
        g01 = fn_ / q01
        g00 = tn_ / q00

        # d loglik / d p
        d_p = (
            g11 * ((se1 * se2 + cov_d) - ((1 - sp1) * (1 - sp2) + cov_nd))
            + g10 * ((se1 * (1 - se2) - cov_d) - ((1 - sp1) * sp2 - cov_nd))
            + g01 * (((1 - se1) * se2 - cov_d) - (sp1 * (1 - sp2) - cov_nd))
            + g00 * (((1 - se1) * (1 - se2) + cov_d) - (sp1 * sp2 + cov_nd))
        )
        grad[lay.prev] = d_p * prev * (1 - prev) + prev_a * (1 - prev) - prev_b * prev

        d_cov_d = prev * (g11 - g10 - g01 + g00)
        d_cov_nd = (1 - prev) * (g11 - g10 - g01 + g00)

        d_se1 = prev * (g11 * se2 + g10 * (1 - se2) - g01 * se2 - g00 * (1 - se2))
        d_se2 = prev * (g11 * se1 - g10 * se1 + g01 * (1 - se1) - g00 * (1 - se1))
        d_sp1 = (1 - prev) * (
            -g11 * (1 - sp2) - g10 * sp2 + g01 * (1 - sp2) + g00 * sp2
        )
        d_sp2 = (1 - prev) * (
            -g11 * (1 - sp1) + g10 * (1 - sp1) - g01 * sp1 + g00 * sp1
        )

        if lay.dependent:
            dlo_d_se1 = np.where(mask_lo_d, -se2, (1 - se2))
            dlo_d_se2 = np.where(mask_lo_d, -se1, (1 - se1))
            dhi_d_se1 = np.where(mask_hi_d, (1 - se2), -se2)
            dhi_d_se2 = np.where(mask_hi_d, -se1, (1 - se1))
            dcov_d_se1 = (1 - u_d) * dlo_d_se1 + u_d * dhi_d_se1
            dcov_d_se2 = (1 - u_d) * dlo_d_se2 + u_d * dhi_d_se2
            d_se1 = d_se1 + d_cov_d * dcov_d_se1
            d_se2 = d_se2 + d_cov_d * dcov_d_se2

            dlo_n_sp1 = np.where(mask_lo_n, -sp2, (1 - sp2))
            dlo_n_sp2 = np.where(mask_lo_n, -sp1, (1 - sp1))
            dhi_n_sp1 = np.where(mask_hi_n, (1 - sp2), -sp2)
            dhi_n_sp2 = np.where(mask_hi_n, -sp1, (1 - sp1))
            dcov_n_sp1 = (1 - u_nd) * dlo_n_sp1 + u_nd * dhi_n_sp1
            dcov_n_sp2 = (1 - u_nd) * dlo_n_sp2 + u_nd * dhi_n_sp2
            d_sp1 = d_sp1 + d_cov_nd * dcov_n_sp1
            d_sp2 = d_sp2 + d_cov_nd * dcov_n_sp2

            grad[lay.u_d] = float(d_cov_d @ (hi_d - lo_d)) * u_d * (1 - u_d) + (1 - 2 * u_d)
            grad[lay.u_nd] = (
                float(d_cov_nd @ (hi_nd - lo_nd)) * u_nd * (1 - u_nd) + (1 - 2 * u_nd)
            )

        d_a1 = d_se1 * se1 * (1 - se1)
        d_b1 = d_sp1 * sp1 * (1 - sp1)
        d_a2 = d_se2 * se2 * (1 - se2)
        d_b2 = d_sp2 * sp2 * (1 - sp2)

        # index hierarchy and priors
        value += (
            -0.5 * (a1_mean - mse1_mean) ** 2 / mse1_var
            - 0.5 * (b1_mean - msp1_mean) ** 2 / msp1_var
        )
        grad[lay.m_se1] = float(np.sum(d_a1)) - (a1_mean - mse1_mean) / mse1_var
        grad[lay.m_sp1] = float(np.sum(d_b1)) - (b1_mean - msp1_mean) / msp1_var
        if lay.index_random:
            value += -0.5 * float(z1 @ z1 + z2 @ z2) - k * _LOG_2PI
            value += hn1_const - 0.5 * (s_se1 - s1se_mean) ** 2 / s1se_var + ls_se1
            value += -0.5 * (s_sp1 - s1sp_mean) ** 2 / s1sp_var + ls_sp1
            grad[lay.ls_se1] = (
                float(d_a1 @ z1) * s_se1 - ((s_se1 - s1se_mean) / s1se_var) * s_se1 + 1.0
            )
            grad[lay.ls_sp1] = (
                float(d_b1 @ re1) * s_sp1 - ((s_sp1 - s1sp_mean) / s1sp_var) * s_sp1 + 1.0
            )
            if lay.corr:
                value += eta1 * math.log(one_m1) + lkj1_const
                grad[lay.rho1] = (
                    float(d_b1 @ (z1 - (rho1 / c1) * z2)) * s_sp1 * one_m1
                    - 2.0 * eta1 * rho1
                )
                grad[lay.z1] = d_a1 * s_se1 + d_b1 * (s_sp1 * rho1) - z1
                grad[lay.z2] = d_b1 * (s_sp1 * c1) - z2
            else:
                grad[lay.z1] = d_a1 * s_se1 - z1
                grad[lay.z2] = d_b1 * s_sp1 - z2

        # reference hierarchy and priors
        value += float(
            -0.5 * np.sum((mse2 - rse_mean) ** 2 / rse_var)
            - 0.5 * np.sum((msp2 - rsp_mean) ** 2 / rsp_var)
        )
        grad[lay.m_se2] = (
            np.bincount(codes, weights=d_a2, minlength=n_ref) - (mse2 - rse_mean) / rse_var
        )
        grad[lay.m_sp2] = (
            np.bincount(codes, weights=d_b2, minlength=n_ref) - (msp2 - rsp_mean) / rsp_var
        )
        if lay.ref_random:
            value += -0.5 * float(w1 @ w1 + w2 @ w2) - k * _LOG_2PI
            value += hn2_const - 0.5 * (s_se2 - s2se_mean) ** 2 / s2se_var + ls_se2
            value += -0.5 * (s_sp2 - s2sp_mean) ** 2 / s2sp_var + ls_sp2
            grad[lay.ls_se2] = (
                float(d_a2 @ w1) * s_se2 - ((s_se2 - s2se_mean) / s2se_var) * s_se2 + 1.0
            )
            grad[lay.ls_sp2] = (
                float(d_b2 @ re2) * s_sp2 - ((s_sp2 - s2sp_mean) / s2sp_var) * s_sp2 + 1.0
            )
            if lay.corr:
                value += eta2 * math.log(one_m2) + lkj2_const
                grad[lay.rho2] = (
                    float(d_b2 @ (w1 - (rho2 / c2) * w2)) * s_sp2 * one_m2
                    - 2.0 * eta2 * rho2
                )
                grad[lay.w1] = d_a2 * s_se2 + d_b2 * (s_sp2 * rho2) - w1
                grad[lay.w2] = d_b2 * (s_sp2 * c2) - w2
            else:
                grad[lay.w1] = d_a2 * s_se2 - w1
                grad[lay.w2] = d_b2 * s_sp2 - w2

        if not math.isfinite(value):
            return -math.inf, np.zeros(dim)
        return value, grad

    names = lay.names(d, levels)

    def constrain_fn(theta: np.ndarray) -> dict:
        out = {
            "se_index": float(_expit(theta[lay.m_se1])),
            "sp_index": float(_expit(theta[lay.m_sp1])),
        }
        for j, level in enumerate(levels):
            out[f"se_ref[{level}]"] = float(_expit(theta[lay.m_se2][j]))
            out[f"sp_ref[{level}]"] = float(_expit(theta[lay.m_sp2][j]))
        return out

    # Initialize inside the prior-favoured orientation basin: the latent class
    # likelihood is invariant to swapping the class labels and HMC cannot cross
    # between the mirrored basins once started in the wrong one. Accuracy means
    # start near their prior means, prevalences near the observed proportion of
    # reference-positive subjects, and effects/scales in moderate windows.
    init_low = np.full(dim, -2.0)
    init_high = np.full(dim, 2.0)
    ref_pos = (counts[:, 0] + counts[:, 2] + 0.5) / (n_tot + 1.0)
    prev_anchor = np.log(ref_pos) - np.log1p(-ref_pos)
    init_low[lay.prev] = prev_anchor - 0.5
    init_high[lay.prev] = prev_anchor + 0.5
    init_low[lay.m_se1] = tl.index_se.mean - 0.5
    init_high[lay.m_se1] = tl.index_se.mean + 0.5
    init_low[lay.m_sp1] = tl.index_sp.mean - 0.5
    init_high[lay.m_sp1] = tl.index_sp.mean + 0.5
    init_low[lay.m_se2] = rse_mean - 0.5
    init_high[lay.m_se2] = rse_mean + 0.5
    init_low[lay.m_sp2] = rsp_mean - 0.5
    init_high[lay.m_sp2] = rsp_mean + 0.5
    if lay.index_random:
        init_low[lay.ls_se1] = init_low[lay.ls_sp1] = -2.0
        init_high[lay.ls_se1] = init_high[lay.ls_sp1] = 0.0
        init_low[lay.z1] = init_low[lay.z2] = -0.5
        init_high[lay.z1] = init_high[lay.z2] = 0.5
    if lay.ref_random:
        init_low[lay.ls_se2] = init_low[lay.ls_sp2] = -2.0
        init_high[lay.ls_se2] = init_high[lay.ls_sp2] = 0.0
        init_low[lay.w1] = init_low[lay.w2] = -0.5
        init_high[lay.w1] = init_high[lay.w2] = 0.5

    return ModelDensity(
        dim=dim,
        eval=eval_fn,
        parameter_names=tuple(names),
        constrain=constrain_fn,
        init_low=init_low,
        init_high=init_high,
    )


def tlcm_log_posterior(
    theta: np.ndarray, d: Dataset, c: TlcmConfig, p: PriorSpec
) -> tuple[float, np.ndarray]:
    """Value and gradient of the joint log-posterior at one unconstrained point."""
    return tlcm_density(d, c, p).eval(np.asarray(theta, dtype=float))


def fit_tlcm(
    d: Dataset,
    c: TlcmConfig | None = None,
    p: PriorSpec | None = None,
    cfg: SamplerConfig | None = None,
    progress=None,
    threads: int = 1,
) -> FitResult:
    """Fit the latent class model; named draws for prevalences, index and
    reference accuracies, hierarchy scales, and dependence fractions."""
    c = c or TlcmConfig()
    p = p or PriorSpec()
    cfg = cfg or SamplerConfig()
    levels, codes = _ref_assignment(d, c)
    density = tlcm_density(d, c, p)
    raw = nuts_sample(density, cfg, progress=progress, threads=threads)
    draws = raw.draws
    k = len(d.studies)
    lay = _Layout(k, len(levels), c)

    params: dict[str, np.ndarray] = {}
    for j, s in enumerate(d.studies):
        params[f"prev[{s.study_id}]"] = _expit(draws[..., lay.prev][..., j])
    mu_se1 = draws[..., lay.m_se1]
    mu_sp1 = draws[..., lay.m_sp1]
    params["mu_se_index"] = mu_se1
    params["mu_sp_index"] = mu_sp1
    params["se_index"] = _expit(mu_se1)
    params["sp_index"] = _expit(mu_sp1)
    if lay.index_random:
        s_se1 = np.exp(draws[..., lay.ls_se1])
        s_sp1 = np.exp(draws[..., lay.ls_sp1])
        params["sigma_se_index"] = s_se1
        params["sigma_sp_index"] = s_sp1
        z1 = draws[..., lay.z1]
        z2 = draws[..., lay.z2]
        if lay.corr:
            rho1 = np.tanh(draws[..., lay.rho1])
            params["rho_index"] = rho1
            re1 = rho1[..., None] * z1 + np.sqrt(1 - rho1[..., None] ** 2) * z2
        else:
            re1 = z2
        a1 = mu_se1[..., None] + s_se1[..., None] * z1
        b1 = mu_sp1[..., None] + s_sp1[..., None] * re1
        for j, s in enumerate(d.studies):
            params[f"se_index_study[{s.study_id}]"] = _expit(a1[..., j])
            params[f"sp_index_study[{s.study_id}]"] = _expit(b1[..., j])
    single_ref = c.ref_test_column is None
    for j, level in enumerate(levels):
        se_name = "se_ref" if single_ref else f"se_ref[{level}]"
        sp_name = "sp_ref" if single_ref else f"sp_ref[{level}]"
        params[se_name] = _expit(draws[..., lay.m_se2][..., j])
        params[sp_name] = _expit(draws[..., lay.m_sp2][..., j])
    if lay.ref_random:
        params["sigma_se_ref"] = np.exp(draws[..., lay.ls_se2])
        params["sigma_sp_ref"] = np.exp(draws[..., lay.ls_sp2])
        if lay.corr:
            params["rho_ref"] = np.tanh(draws[..., lay.rho2])
    if lay.dependent:
        params["dep_frac_diseased"] = _expit(draws[..., lay.u_d])
        params["dep_frac_nondiseased"] = _expit(draws[..., lay.u_nd])

    warnings = []
    tests = [("index", "se_index", "sp_index")] + [
        (
            level,
            "se_ref" if single_ref else f"se_ref[{level}]",
            "sp_ref" if single_ref else f"sp_ref[{level}]",
        )
        for level in levels
    ]
    for label, se_name, sp_name in tests:
        se_med = float(np.median(params[se_name]))
        sp_med = float(np.median(params[sp_name]))
        if se_med + sp_med < 1.0:
            warnings.append(
                f"{label}: posterior median Se+Sp = {se_med + sp_med:.3f} < 1 "
                "(possible latent class label switch)"
            )

    config = {
        "model": "tlcm",
        "dataset_hash": dataset_hash(d),
        "priors": p.to_dict(),
        "sampler": asdict(cfg),
        "seed": cfg.seed,
        "study_ids": list(d.study_ids()),
        "tlcm": c.to_dict(),
        "ref_levels": levels,
        "ref_codes": codes.tolist(),
    }
    fit = build_fit_result(params, raw, config)
    fit.warnings = warnings
    return fit


def correlation_residuals(fit: FitResult, d: Dataset) -> list[CorrelationResidual]:
    """Observed minus model-expected fourfold correlation per study.

    The model-side phi is computed per posterior draw from that draw's
    study-specific cell probabilities; the residual distribution is summarized
    as a median and central 95% interval.
    """
    cfgs = fit.config
    if cfgs.get("model") != "tlcm":
        raise ValueError("correlation residuals require a latent class fit")
    tlc = TlcmConfig.from_dict(cfgs["tlcm"])
    levels = cfgs["ref_levels"]
    codes = np.asarray(cfgs["ref_codes"], dtype=int)
    single_ref = tlc.ref_test_column is None
    out = []
    dependent = tlc.dependence == "dependent"
    if dependent:
        u_d = fit.pooled("dep_frac_diseased")
        u_nd = fit.pooled("dep_frac_nondiseased")
    for j, s in enumerate(d.studies):
        obs = phi_coefficient(s.tp, s.fp, s.fn, s.tn)
        prev = fit.pooled(f"prev[{s.study_id}]")
        if tlc.index_effects == "random":
            se1 = fit.pooled(f"se_index_study[{s.study_id}]")
            sp1 = fit.pooled(f"sp_index_study[{s.study_id}]")
        else:
            se1 = fit.pooled("se_index")
            sp1 = fit.pooled("sp_index")
        level = levels[codes[j]]
        se2 = fit.pooled("se_ref" if single_ref else f"se_ref[{level}]")
        sp2 = fit.pooled("sp_ref" if single_ref else f"sp_ref[{level}]")
        if dependent:
            lo_d = np.maximum(-se1 * se2, -(1 - se1) * (1 - se2))
            hi_d = np.minimum(se1 * (1 - se2), (1 - se1) * se2)
            cov_d = lo_d + u_d * (hi_d - lo_d)
            lo_n = np.maximum(-sp1 * sp2, -(1 - sp1) * (1 - sp2))
            hi_n = np.minimum(sp1 * (1 - sp2), (1 - sp1) * sp2)
            cov_nd = lo_n + u_nd * (hi_n - lo_n)
        else:
            cov_d = cov_nd = 0.0
        q11 = prev * (se1 * se2 + cov_d) + (1 - prev) * ((1 - sp1) * (1 - sp2) + cov_nd)
        q10 = prev * (se1 * (1 - se2) - cov_d) + (1 - prev) * ((1 - sp1) * sp2 - cov_nd)
        q01 = prev * ((1 - se1) * se2 - cov_d) + (1 - prev) * (sp1 * (1 - sp2) - cov_nd)
        q00 = prev * ((1 - se1) * (1 - se2) + cov_d) + (1 - prev) * (sp1 * sp2 + cov_nd)
        m1 = q11 + q10
        m2 = q11 + q01
        denom = np.sqrt(m1 * (1 - m1) * m2 * (1 - m2))
        model_phi = (q11 - m1 * m2) / denom
        resid = obs - model_phi
        q = np.quantile(resid, [0.5, 0.025, 0.975])
        out.append(
            CorrelationResidual(
                study_id=s.study_id,
                observed_phi=obs,
                median=float(q[0]),
                lo=float(q[1]),
                hi=float(q[2]),
            )
        )
    return out
