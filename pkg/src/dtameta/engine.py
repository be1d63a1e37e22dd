"""No-U-Turn HMC over differentiable log-densities on unconstrained space.

Multinomial NUTS (trajectory-weighted proposal sampling) with dual-averaging
step-size adaptation and a diagonal mass matrix estimated from the latter
half of warmup. Chains use independent deterministic RNG substreams derived
from (seed, chain index), so a threaded run reproduces the sequential run
draw-for-draw.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NonFiniteDensity",
    "AdaptationFailure",
    "ModelDensity",
    "SamplerConfig",
    "ChainDraws",
    "RawDraws",
    "check_gradient",
    "leapfrog",
    "nuts_sample",
]


class NonFiniteDensity(RuntimeError):
    pass


class AdaptationFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelDensity:
    """Joint log-density with gradient on unconstrained R^dim.

    ``eval`` must be deterministic and safe to share read-only across chain
    workers. ``constrain`` maps an unconstrained draw to named constrained
    parameters (used by the fitting pipelines to label draws).
    """

    dim: int
    eval: Callable[[np.ndarray], tuple[float, np.ndarray]]
    parameter_names: tuple[str, ...] = ()
    constrain: Callable[[np.ndarray], dict] | None = None
    # per-coordinate initialization window; defaults to uniform(-2, 2).
    # Multimodal posteriors (latent class orientation) override this to start
    # chains in the prior-favoured basin.
    init_low: np.ndarray | None = None
    init_high: np.ndarray | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    target_accept: float = 0.8
    max_treedepth: int = 10
    divergence_energy_threshold: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.warmup < 1 or self.samples < 1:
            raise ValueError("warmup and samples must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must be in (0, 1)")
        if self.max_treedepth < 1:
            raise ValueError("max_treedepth must be >= 1")


@dataclass
class ChainDraws:
    draws: np.ndarray          # (samples, dim) unconstrained
    divergent: np.ndarray      # (samples,) bool
    treedepth: np.ndarray      # (samples,) int
    energy: np.ndarray         # (samples,)
    step_size: np.ndarray      # (samples,)
    accept_stat: np.ndarray    # (samples,)
    adapted_step_size: float
    inv_mass: np.ndarray       # (dim,) estimated posterior variances


@dataclass
class RawDraws:
    chains: list[ChainDraws]
    config: SamplerConfig

    @property
    def draws(self) -> np.ndarray:
        """(chains, samples, dim) array of unconstrained draws."""
        return np.stack([c.draws for c in self.chains])

    @property
    def n_divergent(self) -> int:
        return int(sum(c.divergent.sum() for c in self.chains))

    @property
    def n_max_treedepth(self) -> int:
        depth = self.config.max_treedepth
        return int(sum((c.treedepth >= depth).sum() for c in self.chains))


def check_gradient(m: ModelDensity, theta: np.ndarray, eps: float = 1e-6) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``eps`` is both the finite-difference step and the denominator regulariser.
    """
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise NonFiniteDensity("theta must be finite")
    if eps <= 0:
        raise ValueError("eps must be positive")
    value, grad = m.eval(theta)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise NonFiniteDensity(f"density non-finite at theta={theta!r}")
    worst = 0.0
    for j in range(m.dim):
        t_hi = theta.copy()
        t_lo = theta.copy()
        t_hi[j] += eps
        t_lo[j] -= eps
        f_hi, _ = m.eval(t_hi)
        f_lo, _ = m.eval(t_lo)
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NonFiniteDensity(f"density non-finite near theta (coordinate {j})")
        fd = (f_hi - f_lo) / (2 * eps)
        worst = max(worst, abs(grad[j] - fd) / (abs(grad[j]) + eps))
    return worst


def leapfrog(
    m: ModelDensity,
    position: np.ndarray,
    momentum: np.ndarray,
    step: float,
    mass: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One leapfrog step (half-kick, drift, half-kick) with diagonal mass."""
    mass = np.asarray(mass, dtype=float)
    if np.any(mass <= 0):
        raise ValueError("mass entries must be positive")
    value, grad = m.eval(np.asarray(position, dtype=float))
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise NonFiniteDensity("density non-finite at starting position")
    r = np.asarray(momentum, dtype=float) + 0.5 * step * grad
    q = np.asarray(position, dtype=float) + step * r / mass
    value_new, grad_new = m.eval(q)
    if not (np.isfinite(value_new) and np.all(np.isfinite(grad_new))):
        raise NonFiniteDensity("density non-finite after drift")
    r = r + 0.5 * step * grad_new
    return q, r


# internal leapfrog reusing the cached gradient at the current state
def _leapfrog(eval_fn, q, r, grad, step, inv_mass):
    r1 = r + 0.5 * step * grad
    q1 = q + step * inv_mass * r1
    logp1, grad1 = eval_fn(q1)
    r1 = r1 + 0.5 * step * grad1
    return q1, r1, logp1, grad1


@dataclass
class _TreeState:
    q_minus: np.ndarray
    r_minus: np.ndarray
    grad_minus: np.ndarray
    q_plus: np.ndarray
    r_plus: np.ndarray
    grad_plus: np.ndarray
    q_prop: np.ndarray
    logp_prop: float
    h_prop: float
    log_sum_weight: float
    sum_accept: float
    n_leapfrog: int
    diverged: bool
    turned: bool


def _hamiltonian(logp: float, r: np.ndarray, inv_mass: np.ndarray) -> float:
    return -logp + 0.5 * float(np.dot(r * r, inv_mass))


def _uturn(q_plus, r_plus, q_minus, r_minus, inv_mass) -> bool:
    dq = q_plus - q_minus
    return (
        float(np.dot(dq, inv_mass * r_minus)) < 0
        or float(np.dot(dq, inv_mass * r_plus)) < 0
    )


def _build_tree(
    eval_fn, depth, q, r, grad, direction, step, inv_mass, h0, max_delta, rng
) -> _TreeState:
    if depth == 0:
        q1, r1, logp1, grad1 = _leapfrog(eval_fn, q, r, grad, direction * step, inv_mass)
        if np.isfinite(logp1) and np.all(np.isfinite(r1)):
            h1 = _hamiltonian(logp1, r1, inv_mass)
        else:
            h1 = math.inf
        delta = h1 - h0
        diverged = not math.isfinite(h1) or delta > max_delta
        log_w = -delta if math.isfinite(delta) else -math.inf
        accept = math.exp(min(0.0, -delta)) if math.isfinite(delta) else 0.0
        return _TreeState(
            q_minus=q1, r_minus=r1, grad_minus=grad1,
            q_plus=q1, r_plus=r1, grad_plus=grad1,
            q_prop=q1, logp_prop=logp1, h_prop=h1,
            log_sum_weight=log_w, sum_accept=accept, n_leapfrog=1,
            diverged=diverged, turned=False,
        )

    inner = _build_tree(
        eval_fn, depth - 1, q, r, grad, direction, step, inv_mass, h0, max_delta, rng
    )
    if inner.diverged or inner.turned:
        return inner
    if direction == 1:
        start_q, start_r, start_grad = inner.q_plus, inner.r_plus, inner.grad_plus
    else:
        start_q, start_r, start_grad = inner.q_minus, inner.r_minus, inner.grad_minus
    outer = _build_tree(
        eval_fn, depth - 1, start_q, start_r, start_grad, direction, step,
        inv_mass, h0, max_delta, rng,
    )
    combined_log_w = np.logaddexp(inner.log_sum_weight, outer.log_sum_weight)
    # multinomial sampling between the two subtrees
    if outer.log_sum_weight > -math.inf and math.log(rng.random()) < (
        outer.log_sum_weight - combined_log_w
    ):
        prop, logp_prop, h_prop = outer.q_prop, outer.logp_prop, outer.h_prop
    else:
        prop, logp_prop, h_prop = inner.q_prop, inner.logp_prop, inner.h_prop
    if direction == 1:
        q_minus, r_minus, grad_minus = inner.q_minus, inner.r_minus, inner.grad_minus
        q_plus, r_plus, grad_plus = outer.q_plus, outer.r_plus, outer.grad_plus
    else:
        q_minus, r_minus, grad_minus = outer.q_minus, outer.r_minus, outer.grad_minus
        q_plus, r_plus, grad_plus = inner.q_plus, inner.r_plus, inner.grad_plus
    turned = outer.turned or _uturn(q_plus, r_plus, q_minus, r_minus, inv_mass)
    return _TreeState(
        q_minus=q_minus, r_minus=r_minus, grad_minus=grad_minus,
        q_plus=q_plus, r_plus=r_plus, grad_plus=grad_plus,
        q_prop=prop, logp_prop=logp_prop, h_prop=h_prop,
        log_sum_weight=combined_log_w,
        sum_accept=inner.sum_accept + outer.sum_accept,
        n_leapfrog=inner.n_leapfrog + outer.n_leapfrog,
        diverged=outer.diverged,
        turned=turned,
    )


def _transition(eval_fn, q, logp, grad, step, inv_mass, cfg, rng):
    """One NUTS transition; returns new state plus per-iteration statistics."""
    dim = q.shape[0]
    r0 = rng.standard_normal(dim) / np.sqrt(inv_mass)
    h0 = _hamiltonian(logp, r0, inv_mass)
    q_sel, logp_sel, grad_sel = q, logp, grad
    h_sel = h0
    q_minus, r_minus, grad_minus = q.copy(), r0.copy(), grad.copy()
    q_plus, r_plus, grad_plus = q.copy(), r0.copy(), grad.copy()
    log_sum_weight = 0.0
    sum_accept = 0.0
    n_leapfrog = 0
    diverged = False
    depth = 0
    max_delta = cfg.divergence_energy_threshold

    while depth < cfg.max_treedepth:
        direction = 1 if rng.random() < 0.5 else -1
        if direction == 1:
            subtree = _build_tree(
                eval_fn, depth, q_plus, r_plus, grad_plus, 1, step, inv_mass,
                h0, max_delta, rng,
            )
            if not (subtree.diverged or subtree.turned):
                q_plus, r_plus, grad_plus = subtree.q_plus, subtree.r_plus, subtree.grad_plus
        else:
            subtree = _build_tree(
                eval_fn, depth, q_minus, r_minus, grad_minus, -1, step, inv_mass,
                h0, max_delta, rng,
            )
            if not (subtree.diverged or subtree.turned):
                q_minus, r_minus, grad_minus = subtree.q_minus, subtree.r_minus, subtree.grad_minus
        sum_accept += subtree.sum_accept
        n_leapfrog += subtree.n_leapfrog
        if subtree.diverged:
            diverged = True
            break
        if subtree.turned:
            break
        # biased progressive sampling: favour the newer subtree
        accept_prob = math.exp(min(0.0, subtree.log_sum_weight - log_sum_weight))
        if rng.random() < accept_prob:
            q_sel = subtree.q_prop
            logp_sel = subtree.logp_prop
            h_sel = subtree.h_prop
            grad_sel = None  # recomputed below only if needed
        log_sum_weight = np.logaddexp(log_sum_weight, subtree.log_sum_weight)
        depth += 1
        if _uturn(q_plus, r_plus, q_minus, r_minus, inv_mass):
            break

    if grad_sel is None:
        logp_sel, grad_sel = eval_fn(q_sel)
    accept_stat = sum_accept / max(n_leapfrog, 1)
    return q_sel, logp_sel, grad_sel, {
        "divergent": diverged,
        "treedepth": depth,
        "energy": h_sel,
        "accept_stat": accept_stat,
    }


def _find_initial_step(eval_fn, q, logp, grad, inv_mass, rng) -> float:
    """Heuristic initial step size: double/halve until the one-step accept
    probability crosses 1/2."""
    dim = q.shape[0]
    step = 1.0
    r = rng.standard_normal(dim) / np.sqrt(inv_mass)
    h0 = _hamiltonian(logp, r, inv_mass)
    _, r1, logp1, _ = _leapfrog(eval_fn, q, r, grad, step, inv_mass)
    h1 = _hamiltonian(logp1, r1, inv_mass) if np.isfinite(logp1) else math.inf
    delta = h0 - h1  # log acceptance probability
    direction = 1 if delta > math.log(0.5) else -1
    for _ in range(100):
        step = step * (2.0 ** direction)
        if step < 1e-16 or step > 1e7:
            raise AdaptationFailure(f"initial step size search failed (step={step})")
        _, r1, logp1, _ = _leapfrog(eval_fn, q, r, grad, step, inv_mass)
        h1 = _hamiltonian(logp1, r1, inv_mass) if np.isfinite(logp1) else math.inf
        delta = h0 - h1
        if (direction == 1 and delta <= math.log(0.5)) or (
            direction == -1 and delta >= math.log(0.5)
        ):
            break
    return step


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target accept rate."""

    def __init__(self, initial_step: float, target: float,
                 gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        self.mu = math.log(10.0 * initial_step)
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.count = 0
        self.h_bar = 0.0
        self.log_step_bar = 0.0
        self.log_step = math.log(initial_step)

    def update(self, accept_stat: float) -> float:
        self.count += 1
        eta = 1.0 / (self.count + self.t0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept_stat)
        self.log_step = self.mu - math.sqrt(self.count) / self.gamma * self.h_bar
        weight = self.count ** (-self.kappa)
        self.log_step_bar = weight * self.log_step + (1 - weight) * self.log_step_bar
        if not math.isfinite(self.log_step) or self.log_step < math.log(1e-14):
            raise AdaptationFailure("step size underflow during adaptation")
        return math.exp(self.log_step)

    @property
    def adapted_step(self) -> float:
        return math.exp(self.log_step_bar)


def _initialise(eval_fn, dim, rng, low=None, high=None):
    lo = np.full(dim, -2.0) if low is None else np.asarray(low, dtype=float)
    hi = np.full(dim, 2.0) if high is None else np.asarray(high, dtype=float)
    for _ in range(100):
        q = rng.uniform(lo, hi)
        logp, grad = eval_fn(q)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return q, logp, grad
    raise NonFiniteDensity("no finite starting point found after 100 jittered retries")


def _run_chain(m: ModelDensity, cfg: SamplerConfig, chain_index: int, progress=None) -> ChainDraws:
    rng = np.random.default_rng([cfg.seed, chain_index])
    eval_fn = m.eval
    dim = m.dim
    q, logp, grad = _initialise(eval_fn, dim, rng, m.init_low, m.init_high)
    inv_mass = np.ones(dim)

    step = _find_initial_step(eval_fn, q, logp, grad, inv_mass, rng)
    adapter = _DualAveraging(step, cfg.target_accept)

    warmup = cfg.warmup
    # mass window: [warmup/2, 0.9 * warmup); step size re-adapts afterwards
    mass_start = warmup // 2
    mass_end = max(mass_start + 2, int(math.floor(0.9 * warmup)))
    adapt_mass = warmup >= 20 and mass_end <= warmup
    window: list[np.ndarray] = []
    total = warmup + cfg.samples

    for it in range(warmup):
        q, logp, grad, stats = _transition(eval_fn, q, logp, grad, step, inv_mass, cfg, rng)
        step = adapter.update(stats["accept_stat"])
        if adapt_mass and mass_start <= it < mass_end:
            window.append(q.copy())
            if it == mass_end - 1:
                draws = np.asarray(window)
                n = draws.shape[0]
                var = draws.var(axis=0, ddof=1)
                # Stan-style shrinkage toward unit variance
                inv_mass = (n / (n + 5.0)) * var + (5.0 / (n + 5.0)) * 1e-3
                inv_mass = np.maximum(inv_mass, 1e-10)
                step = _find_initial_step(eval_fn, q, logp, grad, inv_mass, rng)
                adapter = _DualAveraging(step, cfg.target_accept)
                window.clear()
        if progress is not None:
            progress(chain_index, it + 1, total)
    step = adapter.adapted_step

    n = cfg.samples
    draws = np.empty((n, dim))
    divergent = np.zeros(n, dtype=bool)
    treedepth = np.zeros(n, dtype=int)
    energy = np.empty(n)
    step_sizes = np.full(n, step)
    accept = np.empty(n)
    for it in range(n):
        q, logp, grad, stats = _transition(eval_fn, q, logp, grad, step, inv_mass, cfg, rng)
        draws[it] = q
        divergent[it] = stats["divergent"]
        treedepth[it] = stats["treedepth"]
        energy[it] = stats["energy"]
        accept[it] = stats["accept_stat"]
        if progress is not None:
            progress(chain_index, warmup + it + 1, total)
    return ChainDraws(
        draws=draws,
        divergent=divergent,
        treedepth=treedepth,
        energy=energy,
        step_size=step_sizes,
        accept_stat=accept,
        adapted_step_size=step,
        inv_mass=inv_mass,
    )


def nuts_sample(
    m: ModelDensity,
    cfg: SamplerConfig,
    progress: Callable[[int, int, int], None] | None = None,
    threads: int = 1,
) -> RawDraws:
    """Sample all chains; deterministic for a fixed (model, config, seed)."""
    if threads > 1 and cfg.chains > 1:
        with ThreadPoolExecutor(max_workers=min(threads, cfg.chains)) as pool:
            futures = [
                pool.submit(_run_chain, m, cfg, c, progress) for c in range(cfg.chains)
            ]
            chains = [f.result() for f in futures]
    else:
        chains = [_run_chain(m, cfg, c, progress) for c in range(cfg.chains)]
    return RawDraws(chains=chains, config=cfg)
