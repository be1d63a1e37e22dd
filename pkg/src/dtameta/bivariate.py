"""Bivariate random-effects model for (logit Se, logit Sp) with exact binomial
likelihoods, plus meta-regression, subgroup orchestration, and derived outputs.

Random effects use the non-centered parameterization: per-study standardized
effects z are mapped through mu + diag(sigma) L z with L the Cholesky factor
of the 2x2 correlation matrix. Gradients are analytic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import expit as _expit
from scipy.special import gammaln
from scipy.stats import norm

from .data import Dataset, dataset_hash, exclude_studies
from .engine import ModelDensity, SamplerConfig, nuts_sample
from .priors import NormalPrior, PriorSpec, lkj2x2_logpdf
from .results import FitResult, build_fit_result

__all__ = [
    "TooFewStudies",
    "BadCovariate",
    "DegenerateCovariate",
    "NotCategorical",
    "BadSigma",
    "MetaregConfig",
    "HsrocParams",
    "Skipped",
    "bivariate_density",
    "bivariate_log_posterior",
    "fit_bivariate",
    "fit_metareg",
    "fit_subgroups",
    "pairwise_contrasts",
    "predictive_draws",
    "hsroc_from_bivariate",
    "hsroc_curve_logit_se",
]

_LOG_2PI = math.log(2 * math.pi)


class TooFewStudies(ValueError):
    pass


class BadCovariate(ValueError):
    pass


class DegenerateCovariate(ValueError):
    pass


class NotCategorical(ValueError):
    pass


class BadSigma(ValueError):
    pass


@dataclass(frozen=True)
class MetaregConfig:
    covariate: str
    kind: str  # "continuous" | "categorical"
    center: float | None = None      # continuous only; default = covariate mean
    report_at: float | None = None   # continuous only; default = center


@dataclass(frozen=True)
class HsrocParams:
    lam: float
    theta: float
    beta: float
    var_theta: float
    var_alpha: float


@dataclass(frozen=True)
class Skipped:
    level: str
    n_studies: int
    reason: str


def _normal_logpdf(x, p: NormalPrior):
    return -0.5 * _LOG_2PI - math.log(p.sd) - 0.5 * ((x - p.mean) / p.sd) ** 2


def _halfnormal_logpdf(x, p: NormalPrior):
    # normal truncated at zero; the truncation normalizer is constant in x
    log_z = math.log(norm.cdf(p.mean / p.sd))
    return _normal_logpdf(x, p) - log_z


def _normal_const(p: NormalPrior) -> float:
    return -0.5 * _LOG_2PI - math.log(p.sd)


def _halfnormal_const(p: NormalPrior) -> float:
    return _normal_const(p) - math.log(norm.cdf(p.mean / p.sd))


def _counts(d: Dataset):
    tp = np.array([s.tp for s in d.studies], dtype=float)
    fp = np.array([s.fp for s in d.studies], dtype=float)
    fn = np.array([s.fn for s in d.studies], dtype=float)
    tn = np.array([s.tn for s in d.studies], dtype=float)
    return tp, fp, fn, tn


def _softplus(x):
    return np.logaddexp(0.0, x)


def _design(d: Dataset, metareg: MetaregConfig | None):
    """Resolve the covariate design: (x_centered, center, report_at) or level codes."""
    if metareg is None:
        return None
    kind = d.covariate_kind(metareg.covariate)
    if kind is None:
        raise BadCovariate(f"no covariate named {metareg.covariate!r}")
    if kind != metareg.kind:
        raise BadCovariate(
            f"covariate {metareg.covariate!r} is {kind}, not {metareg.kind}"
        )
    if metareg.kind == "continuous":
        x = np.array([float(s.covariates[metareg.covariate]) for s in d.studies])
        if len(np.unique(x)) < 3:
            raise DegenerateCovariate("continuous covariate needs >= 3 distinct values")
        center = metareg.center if metareg.center is not None else float(x.mean())
        report_at = metareg.report_at if metareg.report_at is not None else center
        return {"kind": "continuous", "x": x - center, "center": center, "report_at": report_at}
    levels = d.levels(metareg.covariate)
    if len(levels) < 2:
        raise DegenerateCovariate("categorical covariate needs >= 2 levels")
    codes = np.array(
        [levels.index(str(s.covariates[metareg.covariate])) for s in d.studies]
    )
    return {"kind": "categorical", "levels": levels, "codes": codes}


def bivariate_density(
    d: Dataset, p: PriorSpec, metareg: MetaregConfig | None = None
) -> ModelDensity:
    """Joint log-posterior with analytic gradient on unconstrained space.

    Layout: [location block | log sigma_se, log sigma_sp, atanh rho | z_se | z_sp]
    where the location block is (mu_se, mu_sp) for the plain model,
    (alpha_se, alpha_sp, beta_se, beta_sp) for continuous meta-regression, and
    per-level (mu_se[l]..., mu_sp[l]...) for categorical meta-regression.
    """
    k = len(d.studies)
    if k < 2:
        raise TooFewStudies(f"bivariate model needs >= 2 studies, got {k}")
    tp, fp, fn, tn = _counts(d)
    n1 = tp + fn
    n0 = tn + fp
    if np.any(n1 == 0) or np.any(n0 == 0):
        raise TooFewStudies("every study needs both a diseased and a non-diseased arm")
    lgamma_const = float(
        np.sum(gammaln(n1 + 1) - gammaln(tp + 1) - gammaln(fn + 1))
        + np.sum(gammaln(n0 + 1) - gammaln(tn + 1) - gammaln(fp + 1))
    )

    design = _design(d, metareg)
    bp = p.bivariate
    eta = bp.rho.eta
    if design is None:
        n_loc = 2
        loc_priors = [bp.mu_se, bp.mu_sp]
        names = ["mu_se", "mu_sp"]
    elif design["kind"] == "continuous":
        n_loc = 4
        loc_priors = [p.metareg.intercept, p.metareg.intercept,
                      p.metareg.coefficient, p.metareg.coefficient]
        names = ["alpha_se", "alpha_sp", "beta_se", "beta_sp"]
    else:
        levels = design["levels"]
        n_loc = 2 * len(levels)
        loc_priors = [p.metareg.level_mean] * n_loc
        names = [f"mu_se[{l}]" for l in levels] + [f"mu_sp[{l}]" for l in levels]
    dim = n_loc + 3 + 2 * k
    names = names + ["log_sigma_se", "log_sigma_sp", "atanh_rho"]
    names += [f"z_se[{s.study_id}]" for s in d.studies]
    names += [f"z_sp[{s.study_id}]" for s in d.studies]

    i_ls1 = n_loc
    i_ls2 = n_loc + 1
    i_rho = n_loc + 2
    i_z1 = n_loc + 3
    i_z2 = n_loc + 3 + k

    if design is not None and design["kind"] == "continuous":
        xc = design["x"]
    elif design is not None:
        codes = design["codes"]
        n_levels = len(design["levels"])

    # prior constants hoisted out of the hot loop
    loc_mean = np.array([q.mean for q in loc_priors])
    loc_var = np.array([q.sd**2 for q in loc_priors])
    loc_const = float(sum(_normal_const(q) for q in loc_priors))
    sd1_mean, sd1_var = bp.sigma_se.mean, bp.sigma_se.sd ** 2
    sd2_mean, sd2_var = bp.sigma_sp.mean, bp.sigma_sp.sd ** 2
    hn_const = _halfnormal_const(bp.sigma_se) + _halfnormal_const(bp.sigma_sp)
    lkj_const = float(lkj2x2_logpdf(0.0, eta))

    def eval_fn(theta: np.ndarray) -> tuple[float, np.ndarray]:
        if not np.all(np.isfinite(theta)):
            return -math.inf, np.zeros(dim)
        ls1 = theta[i_ls1]
        ls2 = theta[i_ls2]
        raw_rho = theta[i_rho]
        # tanh saturates to exactly +-1 past ~19 and exp overflows past ~709
        if abs(ls1) > 300 or abs(ls2) > 300 or abs(raw_rho) > 18.0:
            return -math.inf, np.zeros(dim)
        s1 = math.exp(ls1)
        s2 = math.exp(ls2)
        rho = math.tanh(raw_rho)
        one_m_rho2 = 1.0 - rho * rho
        c = math.sqrt(one_m_rho2)
        z1 = theta[i_z1:i_z1 + k]
        z2 = theta[i_z2:i_z2 + k]
        re2 = rho * z1 + c * z2

        loc = theta[:n_loc]
        if design is None:
            a = loc[0] + s1 * z1
            b = loc[1] + s2 * re2
        elif design["kind"] == "continuous":
            a = loc[0] + loc[2] * xc + s1 * z1
            b = loc[1] + loc[3] * xc + s2 * re2
        else:
            a = loc[0:n_levels][codes] + s1 * z1
            b = loc[n_levels:2 * n_levels][codes] + s2 * re2

        se = _expit(a)
        sp = _expit(b)
        value = lgamma_const + float(
            tp @ a - n1 @ _softplus(a) + tn @ b - n0 @ _softplus(b)
        )
        ga = tp - n1 * se  # d value / d a_i
        gb = tn - n0 * sp

        grad = np.zeros(dim)
        dloc = (loc - loc_mean) / loc_var
        value += loc_const - 0.5 * float((loc - loc_mean) @ dloc)
        if design is None:
            grad[0] = ga.sum() - dloc[0]
            grad[1] = gb.sum() - dloc[1]
        elif design["kind"] == "continuous":
            grad[0] = ga.sum() - dloc[0]
            grad[1] = gb.sum() - dloc[1]
            grad[2] = float(ga @ xc) - dloc[2]
            grad[3] = float(gb @ xc) - dloc[3]
        else:
            grad[0:n_levels] = np.bincount(codes, weights=ga, minlength=n_levels)
            grad[n_levels:2 * n_levels] = np.bincount(codes, weights=gb, minlength=n_levels)
            grad[0:n_loc] -= dloc

        # random effects: z ~ N(0, I)
        value += -0.5 * float(z1 @ z1 + z2 @ z2) - k * _LOG_2PI
        grad[i_z1:i_z1 + k] = ga * s1 + gb * (s2 * rho) - z1
        grad[i_z2:i_z2 + k] = gb * (s2 * c) - z2

        # SD priors (half-normal) with log-transform Jacobian
        value += hn_const - 0.5 * (s1 - sd1_mean) ** 2 / sd1_var + ls1
        value += -0.5 * (s2 - sd2_mean) ** 2 / sd2_var + ls2
        grad[i_ls1] = float(ga @ z1) * s1 - ((s1 - sd1_mean) / sd1_var) * s1 + 1.0
        grad[i_ls2] = float(gb @ re2) * s2 - ((s2 - sd2_mean) / sd2_var) * s2 + 1.0

        # correlation: LKJ(eta) density plus tanh Jacobian gives eta*log(1-rho^2)
        value += eta * math.log(one_m_rho2) + lkj_const
        dlike_drho = float(gb @ (z1 - (rho / c) * z2)) * s2
        grad[i_rho] = dlike_drho * one_m_rho2 - 2.0 * eta * rho

        if not math.isfinite(value):
            return -math.inf, np.zeros(dim)
        return value, grad

    def constrain_fn(theta: np.ndarray) -> dict:
        out: dict[str, float] = {}
        for j in range(n_loc):
            out[names[j]] = float(theta[j])
        out["sigma_se"] = math.exp(theta[i_ls1])
        out["sigma_sp"] = math.exp(theta[i_ls2])
        out["rho"] = math.tanh(theta[i_rho])
        return out

    return ModelDensity(
        dim=dim, eval=eval_fn, parameter_names=tuple(names), constrain=constrain_fn
    )


def bivariate_log_posterior(
    theta: np.ndarray, d: Dataset, p: PriorSpec, metareg: MetaregConfig | None = None
) -> tuple[float, np.ndarray]:
    """Value and gradient of the joint log-posterior at one unconstrained point."""
    return bivariate_density(d, p, metareg).eval(np.asarray(theta, dtype=float))


def hsroc_from_bivariate(mu, sigma, rho):
    """Hierarchical-SROC parameters from bivariate parameters.

    mu = (pooled logit Se, pooled logit Sp); sigma = between-study SDs; rho the
    between-study correlation. Accepts scalars or per-draw arrays.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    rho = np.asarray(rho, dtype=float)
    mu1, mu2 = mu[..., 0], mu[..., 1]
    s1, s2 = sigma[..., 0], sigma[..., 1]
    if np.any(s1 <= 0) or np.any(s2 <= 0):
        raise BadSigma("between-study SDs must be positive")
    if np.any(np.abs(rho) > 1):
        raise BadSigma("correlation must lie in [-1, 1]")
    ratio = np.sqrt(s2 / s1)
    beta = np.log(s2 / s1)
    lam = ratio * mu1 + mu2 / ratio
    theta = 0.5 * (ratio * mu1 - mu2 / ratio)
    s12 = rho * s1 * s2
    var_theta = 0.5 * (s1 * s2 - s12)
    var_alpha = 2.0 * (s1 * s2 + s12)
    if mu1.ndim == 0:
        return HsrocParams(float(lam), float(theta), float(beta),
                           float(var_theta), float(var_alpha))
    return lam, theta, beta, var_theta, var_alpha


def hsroc_curve_logit_se(lam, beta, logit_one_minus_sp):
    """Summary ROC curve: logit Se as a function of logit(1 - Sp)."""
    return lam * np.exp(-beta / 2.0) + np.exp(-beta) * np.asarray(logit_one_minus_sp)


def _derive_common(params: dict[str, np.ndarray], se: np.ndarray, sp: np.ndarray):
    params["lr_pos"] = se / (1.0 - sp)
    params["lr_neg"] = (1.0 - se) / sp
    params["dor"] = params["lr_pos"] / params["lr_neg"]


def _study_draws(raw_draws, i_z1, i_z2, k, build_ab):
    """Per-study logit accuracy draws (chains, samples, k)."""
    a, b = build_ab(raw_draws)
    return a, b


def fit_bivariate(
    d: Dataset,
    p: PriorSpec | None = None,
    cfg: SamplerConfig | None = None,
    exclusions=(),
    progress=None,
    threads: int = 1,
) -> FitResult:
    """Fit the bivariate model; returns named constrained draws and diagnostics."""
    p = p or PriorSpec()
    cfg = cfg or SamplerConfig()
    data = exclude_studies(d, exclusions) if exclusions else d
    if len(data.studies) < 2:
        raise TooFewStudies("need >= 2 studies after exclusions")
    density = bivariate_density(data, p)
    raw = nuts_sample(density, cfg, progress=progress, threads=threads)
    draws = raw.draws  # (chains, samples, dim)
    k = len(data.studies)
    i_ls1, i_ls2, i_rho = 2, 3, 4
    i_z1, i_z2 = 5, 5 + k

    mu_se = draws[..., 0]
    mu_sp = draws[..., 1]
    s1 = np.exp(draws[..., i_ls1])
    s2 = np.exp(draws[..., i_ls2])
    rho = np.tanh(draws[..., i_rho])
    c = np.sqrt(1.0 - rho**2)
    z1 = draws[..., i_z1:i_z1 + k]
    z2 = draws[..., i_z2:i_z2 + k]
    a = mu_se[..., None] + s1[..., None] * z1
    b = mu_sp[..., None] + s2[..., None] * (rho[..., None] * z1 + c[..., None] * z2)

    se = _expit(mu_se)
    sp = _expit(mu_sp)
    params: dict[str, np.ndarray] = {
        "mu_se": mu_se, "mu_sp": mu_sp, "se": se, "sp": sp,
        "sigma_se": s1, "sigma_sp": s2, "rho": rho,
    }
    _derive_common(params, se, sp)
    lam, theta, beta, var_theta, var_alpha = hsroc_from_bivariate(
        np.stack([mu_se, mu_sp], axis=-1), np.stack([s1, s2], axis=-1), rho
    )
    params["hsroc_lambda"] = lam
    params["hsroc_theta"] = theta
    params["hsroc_beta"] = beta
    params["hsroc_var_theta"] = var_theta
    params["hsroc_var_alpha"] = var_alpha
    for j, s in enumerate(data.studies):
        params[f"se_study[{s.study_id}]"] = _expit(a[..., j])
        params[f"sp_study[{s.study_id}]"] = _expit(b[..., j])

    config = {
        "model": "bivariate",
        "dataset_hash": dataset_hash(data),
        "priors": p.to_dict(),
        "sampler": asdict(cfg),
        "exclusions": sorted(exclusions),
        "seed": cfg.seed,
        "study_ids": list(data.study_ids()),
    }
    return build_fit_result(params, raw, config)


def fit_metareg(
    d: Dataset,
    m: MetaregConfig,
    p: PriorSpec | None = None,
    cfg: SamplerConfig | None = None,
    exclusions=(),
    progress=None,
    threads: int = 1,
) -> FitResult:
    """Bivariate meta-regression with one continuous or categorical covariate."""
    p = p or PriorSpec()
    cfg = cfg or SamplerConfig()
    data = exclude_studies(d, exclusions) if exclusions else d
    if len(data.studies) < 2:
        raise TooFewStudies("need >= 2 studies after exclusions")
    design = _design(data, m)  # validates covariate
    density = bivariate_density(data, p, m)
    raw = nuts_sample(density, cfg, progress=progress, threads=threads)
    draws = raw.draws
    k = len(data.studies)

    params: dict[str, np.ndarray] = {}
    if design["kind"] == "continuous":
        n_loc = 4
        alpha_se, alpha_sp = draws[..., 0], draws[..., 1]
        beta_se, beta_sp = draws[..., 2], draws[..., 3]
        params.update(
            alpha_se=alpha_se, alpha_sp=alpha_sp, beta_se=beta_se, beta_sp=beta_sp
        )
        x_rep = design["report_at"] - design["center"]
        a_rep = alpha_se + beta_se * x_rep
        b_rep = alpha_sp + beta_sp * x_rep
        params["se_at_report"] = _expit(a_rep)
        params["sp_at_report"] = _expit(b_rep)
        params["se_at_center"] = _expit(alpha_se)
        params["sp_at_center"] = _expit(alpha_sp)
    else:
        levels = design["levels"]
        n_levels = len(levels)
        n_loc = 2 * n_levels
        for j, level in enumerate(levels):
            mu_se_l = draws[..., j]
            mu_sp_l = draws[..., n_levels + j]
            params[f"mu_se[{level}]"] = mu_se_l
            params[f"mu_sp[{level}]"] = mu_sp_l
            params[f"se[{level}]"] = _expit(mu_se_l)
            params[f"sp[{level}]"] = _expit(mu_sp_l)

    i_ls1, i_ls2, i_rho = n_loc, n_loc + 1, n_loc + 2
    i_z1, i_z2 = n_loc + 3, n_loc + 3 + k
    s1 = np.exp(draws[..., i_ls1])
    s2 = np.exp(draws[..., i_ls2])
    rho = np.tanh(draws[..., i_rho])
    params["sigma_se"] = s1
    params["sigma_sp"] = s2
    params["rho"] = rho

    c = np.sqrt(1.0 - rho**2)
    z1 = draws[..., i_z1:i_z1 + k]
    z2 = draws[..., i_z2:i_z2 + k]
    if design["kind"] == "continuous":
        base_a = draws[..., 0:1] + draws[..., 2:3] * design["x"][None, None, :]
        base_b = draws[..., 1:2] + draws[..., 3:4] * design["x"][None, None, :]
    else:
        codes = design["codes"]
        base_a = draws[..., 0:len(design["levels"])][..., codes]
        base_b = draws[..., len(design["levels"]):n_loc][..., codes]
    a = base_a + s1[..., None] * z1
    b = base_b + s2[..., None] * (rho[..., None] * z1 + c[..., None] * z2)
    for j, s in enumerate(data.studies):
        params[f"se_study[{s.study_id}]"] = _expit(a[..., j])
        params[f"sp_study[{s.study_id}]"] = _expit(b[..., j])

    config = {
        "model": "metareg",
        "dataset_hash": dataset_hash(data),
        "priors": p.to_dict(),
        "sampler": asdict(cfg),
        "exclusions": sorted(exclusions),
        "seed": cfg.seed,
        "study_ids": list(data.study_ids()),
        "covariate": m.covariate,
        "kind": m.kind,
    }
    if design["kind"] == "continuous":
        config["center"] = design["center"]
        config["report_at"] = design["report_at"]
    else:
        config["levels"] = design["levels"]
    return build_fit_result(params, raw, config)


def pairwise_contrasts(fit: FitResult, levels: list[str] | None = None):
    """Pairwise differences and ratios of pooled Se and Sp between levels.

    Contrasts are computed per draw, then summarized; returns a list of dict
    rows plus counts of difference CrIs containing 0 and ratio CrIs containing 1.
    """
    if levels is None:
        levels = fit.config.get("levels")
    if not levels or len(levels) < 2:
        raise NotCategorical("fit does not carry categorical levels")
    for level in levels:
        if f"se[{level}]" not in fit.params:
            raise NotCategorical(f"fit lacks per-level draws for {level!r}")
    rows = []
    n_diff_cris_with_zero = 0
    n_ratio_cris_with_one = 0
    for i in range(len(levels)):
        for j in range(i + 1, len(levels)):
            la, lb = levels[i], levels[j]
            for quantity in ("se", "sp"):
                da = fit.pooled(f"{quantity}[{la}]")
                db = fit.pooled(f"{quantity}[{lb}]")
                diff = da - db
                ratio = da / db
                dq = np.quantile(diff, [0.5, 0.025, 0.975])
                rq = np.quantile(ratio, [0.5, 0.025, 0.975])
                diff_has_zero = bool(dq[1] <= 0.0 <= dq[2])
                ratio_has_one = bool(rq[1] <= 1.0 <= rq[2])
                n_diff_cris_with_zero += diff_has_zero
                n_ratio_cris_with_one += ratio_has_one
                rows.append({
                    "pair": (la, lb),
                    "quantity": quantity,
                    "diff_median": float(dq[0]),
                    "diff_ci": (float(dq[1]), float(dq[2])),
                    "diff_ci_contains_zero": diff_has_zero,
                    "ratio_median": float(rq[0]),
                    "ratio_ci": (float(rq[1]), float(rq[2])),
                    "ratio_ci_contains_one": ratio_has_one,
                })
    return {
        "rows": rows,
        "n_diff_cris_containing_zero": n_diff_cris_with_zero,
        "n_ratio_cris_containing_one": n_ratio_cris_with_one,
        "n_contrasts": len(rows),
    }


def fit_subgroups(
    d: Dataset,
    covariate: str,
    p: PriorSpec | None = None,
    cfg: SamplerConfig | None = None,
    min_studies: int = 2,
    progress=None,
    threads: int = 1,
) -> dict[str, FitResult | Skipped]:
    """Independent bivariate fit per level (separate variances per group)."""
    kind = d.covariate_kind(covariate)
    if kind is None:
        raise BadCovariate(f"no covariate named {covariate!r}")
    if kind != "categorical":
        raise BadCovariate(f"subgroup analysis needs a categorical covariate")
    p = p or PriorSpec()
    cfg = cfg or SamplerConfig()
    out: dict[str, FitResult | Skipped] = {}
    for level in d.levels(covariate):
        ids = [
            s.study_id for s in d.studies
            if str(s.covariates[covariate]) == level
        ]
        if len(ids) < min_studies:
            out[level] = Skipped(
                level=level,
                n_studies=len(ids),
                reason=f"{len(ids)} study(ies) < minimum {min_studies}",
            )
            continue
        keep = set(ids)
        drop = [s.study_id for s in d.studies if s.study_id not in keep]
        fit = fit_bivariate(d, p, cfg, exclusions=drop, progress=progress, threads=threads)
        fit.config["subgroup"] = {"covariate": covariate, "level": level}
        out[level] = fit
    return out


def predictive_draws(fit: FitResult, seed: int = 0) -> np.ndarray:
    """New-study (logit Se, logit Sp) draws: one MVN draw per posterior draw."""
    mu_se = fit.pooled("mu_se")
    mu_sp = fit.pooled("mu_sp")
    s1 = fit.pooled("sigma_se")
    s2 = fit.pooled("sigma_sp")
    rho = fit.pooled("rho")
    n = mu_se.shape[0]
    rng = np.random.default_rng([seed, 90210])
    e1 = rng.standard_normal(n)
    e2 = rng.standard_normal(n)
    c = np.sqrt(1.0 - rho**2)
    a_new = mu_se + s1 * e1
    b_new = mu_sp + s2 * (rho * e1 + c * e2)
    return np.stack([a_new, b_new], axis=1)
