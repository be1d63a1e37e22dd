"""MCMC convergence and sampler-health diagnostics.

Split R-hat is the classic potential-scale-reduction statistic on half-chains
(the 1.05 threshold tradition); a rank-normalized variant is available behind
a flag. ESS uses Geyer's initial monotone positive sequence truncation on the
combined split chains.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

__all__ = [
    "DegenerateDraws",
    "UnknownParameter",
    "DiagnosticsSummary",
    "ParamDiagnostics",
    "ParamSummary",
    "TraceDensityData",
    "split_rhat",
    "ess",
    "summarize_draws",
    "trace_density_data",
    "diagnostics_summary",
]

RHAT_THRESHOLD = 1.05


class DegenerateDraws(ValueError):
    pass


class UnknownParameter(KeyError):
    pass


def _split_chains(chains: np.ndarray) -> np.ndarray:
    """Split each chain in half, dropping the middle draw of odd-length chains."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = chains.shape
    half = n // 2
    if half < 4:
        raise DegenerateDraws("need at least 4 draws per half-chain")
    return np.concatenate([chains[:, :half], chains[:, n - half:]], axis=0)


def split_rhat(chains: np.ndarray, rank_normalized: bool = False) -> float:
    """Potential scale reduction on split half-chains.

    rhat = sqrt(((n-1)/n * W + B/n) / W) with W the mean within-chain variance
    and B/n the variance of the half-chain means.
    """
    split = _split_chains(chains)
    if rank_normalized:
        split = _rank_normalize(split)
    m, n = split.shape
    within = split.var(axis=1, ddof=1)
    w = within.mean()
    if w == 0 or not np.isfinite(w):
        raise DegenerateDraws("zero within-chain variance")
    b_over_n = split.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * w + b_over_n
    return float(np.sqrt(var_plus / w))


def _rank_normalize(draws: np.ndarray) -> np.ndarray:
    flat = draws.reshape(-1)
    ranks = np.argsort(np.argsort(flat)) + 1.0
    z = norm.ppf((ranks - 0.375) / (flat.size + 0.25))
    return z.reshape(draws.shape)


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased (1/n) autocovariance of one chain via FFT."""
    n = x.shape[0]
    xc = x - x.mean()
    size = 1
    while size < 2 * n:
        size <<= 1
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n].real
    return acov / n


def ess(chains: np.ndarray) -> float:
    """Effective sample size via Geyer's initial monotone positive sequence."""
    split = _split_chains(chains)
    m, n = split.shape
    within = split.var(axis=1, ddof=1)
    w = within.mean()
    if w == 0 or not np.isfinite(w):
        raise DegenerateDraws("zero within-chain variance")
    acov = np.stack([_autocovariance(split[i]) for i in range(m)])
    mean_acov = acov.mean(axis=0)
    mean_var = mean_acov[0] * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += split.mean(axis=1).var(ddof=1)

    rho = np.ones(n)
    rho[1:] = 1.0 - (mean_var - mean_acov[1:]) / var_plus
    # Geyer pairs: sum consecutive (even, odd) lags while positive
    tau = -1.0
    t = 0
    pair_sums = []
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        pair_sums.append(pair)
        t += 2
    # enforce monotone nonincreasing pair sums
    running = np.inf
    for i, p in enumerate(pair_sums):
        running = min(running, p)
        pair_sums[i] = running
    tau += 2.0 * float(np.sum(pair_sums))
    tau = max(tau, 1.0 / np.log10(m * n + 10))  # guard against antithetic chains
    return float(m * n / tau)


@dataclass(frozen=True)
class ParamDiagnostics:
    name: str
    rhat: float
    ess: float


@dataclass(frozen=True)
class DiagnosticsSummary:
    per_param: tuple[ParamDiagnostics, ...]
    n_divergent: int
    n_max_treedepth: int

    @property
    def max_rhat(self) -> float:
        return max((p.rhat for p in self.per_param), default=float("nan"))

    @property
    def min_ess(self) -> float:
        return min((p.ess for p in self.per_param), default=float("nan"))

    @property
    def ok(self) -> bool:
        """The pass gate: all rhat < 1.05, zero divergences, zero treedepth hits."""
        rhats_ok = all(p.rhat < RHAT_THRESHOLD for p in self.per_param)
        return rhats_ok and self.n_divergent == 0 and self.n_max_treedepth == 0

    def to_dict(self) -> dict:
        return {
            "per_param": {
                p.name: {"rhat": p.rhat, "ess": p.ess} for p in self.per_param
            },
            "n_divergent": self.n_divergent,
            "n_max_treedepth": self.n_max_treedepth,
            "ok": self.ok,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiagnosticsSummary":
        per = tuple(
            ParamDiagnostics(name, v["rhat"], v["ess"])
            for name, v in d.get("per_param", {}).items()
        )
        return cls(per, d.get("n_divergent", 0), d.get("n_max_treedepth", 0))


@dataclass(frozen=True)
class ParamSummary:
    name: str
    median: float
    q2_5: float
    q97_5: float
    rhat: float
    ess: float


@dataclass(frozen=True)
class TraceDensityData:
    name: str
    chains: tuple[tuple[float, ...], ...]  # ordered draws per chain
    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]


def _get_params(fit) -> dict[str, np.ndarray]:
    if hasattr(fit, "params"):
        return fit.params
    return fit


def _safe_diags(draws: np.ndarray) -> tuple[float, float]:
    try:
        return split_rhat(draws), ess(draws)
    except DegenerateDraws:
        return float("nan"), float("nan")


def summarize_draws(fit, names=None) -> list[ParamSummary]:
    """Median and central 95% interval (type-7 quantiles) plus diagnostics."""
    params = _get_params(fit)
    if names is None:
        names = list(params.keys())
    out = []
    for name in names:
        if name not in params:
            raise UnknownParameter(name)
        draws = np.asarray(params[name], dtype=float)
        pooled = draws.reshape(-1)
        q = np.quantile(pooled, [0.5, 0.025, 0.975])  # numpy 'linear' = type 7
        rhat, ess_val = _safe_diags(draws)
        out.append(ParamSummary(name, float(q[0]), float(q[1]), float(q[2]), rhat, ess_val))
    return out


def trace_density_data(fit, name: str, bins: int = 40) -> TraceDensityData:
    """Renderer-independent trace and histogram arrays for one parameter."""
    params = _get_params(fit)
    if name not in params:
        raise UnknownParameter(name)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    draws = np.atleast_2d(np.asarray(params[name], dtype=float))
    pooled = draws.reshape(-1)
    counts, edges = np.histogram(pooled, bins=bins)
    return TraceDensityData(
        name=name,
        chains=tuple(tuple(float(v) for v in row) for row in draws),
        bin_edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
    )


def diagnostics_summary(
    params: dict[str, np.ndarray], n_divergent: int, n_max_treedepth: int
) -> DiagnosticsSummary:
    per = []
    for name, draws in params.items():
        draws = np.asarray(draws, dtype=float)
        rhat, ess_val = _safe_diags(draws)
        per.append(ParamDiagnostics(name, rhat, ess_val))
    return DiagnosticsSummary(tuple(per), n_divergent, n_max_treedepth)
