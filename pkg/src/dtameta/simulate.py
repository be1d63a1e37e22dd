"""Synthetic dataset generators for self-contained model validation."""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .data import CovariateSpec, Dataset, StudyRecord

__all__ = ["simulate_bivariate_dataset", "simulate_tlcm_dataset"]


def _mvn_logits(rng, k, mu, sigma, rho):
    z1 = rng.standard_normal(k)
    z2 = rng.standard_normal(k)
    c = np.sqrt(1.0 - rho**2)
    a = mu[0] + sigma[0] * z1
    b = mu[1] + sigma[1] * (rho * z1 + c * z2)
    return a, b


def simulate_bivariate_dataset(
    k: int,
    mu: tuple[float, float],
    sigma: tuple[float, float],
    rho: float,
    n_diseased: int = 100,
    n_nondiseased: int = 100,
    seed: int = 0,
) -> Dataset:
    """Sample a perfect-gold-standard dataset from known bivariate parameters."""
    rng = np.random.default_rng([seed, 11])
    a, b = _mvn_logits(rng, k, np.asarray(mu), np.asarray(sigma), rho)
    se = expit(a)
    sp = expit(b)
    studies = []
    for i in range(k):
        n1 = int(rng.integers(max(2, n_diseased // 2), n_diseased * 2))
        n0 = int(rng.integers(max(2, n_nondiseased // 2), n_nondiseased * 2))
        tp = int(rng.binomial(n1, se[i]))
        tn = int(rng.binomial(n0, sp[i]))
        studies.append(
            StudyRecord(
                study_id=f"S{i+1}", author=f"S{i+1}", year=1990 + i,
                tp=tp, fp=n0 - tn, fn=n1 - tp, tn=tn,
            )
        )
    return Dataset(studies=tuple(studies))


def simulate_tlcm_dataset(
    k: int,
    prevalence_range: tuple[float, float],
    index_acc: tuple[float, float],
    ref_acc: tuple[float, float],
    index_sd: tuple[float, float] = (0.0, 0.0),
    cov_frac: tuple[float, float] | None = None,
    n_per_study: int = 200,
    seed: int = 0,
    ref_types: list[str] | None = None,
) -> Dataset:
    """Sample an imperfect-gold-standard dataset: two tests cross-classified.

    ``index_acc``/``ref_acc`` are (Se, Sp) on the probability scale;
    ``index_sd`` gives between-study SDs on the logit scale; ``cov_frac``
    places the within-class covariances at that fraction of their feasible
    interval (None = conditional independence).
    """
    rng = np.random.default_rng([seed, 12])
    logit = lambda x: np.log(x) - np.log1p(-x)
    studies = []
    types = ref_types or [None] * k
    for i in range(k):
        p = float(rng.uniform(*prevalence_range))
        se1 = float(expit(logit(index_acc[0]) + index_sd[0] * rng.standard_normal()))
        sp1 = float(expit(logit(index_acc[1]) + index_sd[1] * rng.standard_normal()))
        se2, sp2 = ref_acc
        if cov_frac is None:
            cov_d = cov_nd = 0.0
        else:
            lo_d = max(-se1 * se2, -(1 - se1) * (1 - se2))
            hi_d = min(se1 * (1 - se2), (1 - se1) * se2)
            lo_n = max(-sp1 * sp2, -(1 - sp1) * (1 - sp2))
            hi_n = min(sp1 * (1 - sp2), (1 - sp1) * sp2)
            cov_d = lo_d + cov_frac[0] * (hi_d - lo_d)
            cov_nd = lo_n + cov_frac[1] * (hi_n - lo_n)
        q11 = p * (se1 * se2 + cov_d) + (1 - p) * ((1 - sp1) * (1 - sp2) + cov_nd)
        q10 = p * (se1 * (1 - se2) - cov_d) + (1 - p) * ((1 - sp1) * sp2 - cov_nd)
        q01 = p * ((1 - se1) * se2 - cov_d) + (1 - p) * (sp1 * (1 - sp2) - cov_nd)
        q00 = p * ((1 - se1) * (1 - se2) + cov_d) + (1 - p) * (sp1 * sp2 + cov_nd)
        cells = rng.multinomial(n_per_study, [q11, q10, q01, q00])
        cov = {"reference": types[i]} if types[i] is not None else {}
        studies.append(
            StudyRecord(
                study_id=f"S{i+1}", author=f"S{i+1}", year=1990 + i,
                tp=int(cells[0]), fp=int(cells[1]), fn=int(cells[2]), tn=int(cells[3]),
                covariates=cov,
            )
        )
    schema = (CovariateSpec("reference", "categorical"),) if ref_types else ()
    return Dataset(studies=tuple(studies), covariate_schema=schema)
