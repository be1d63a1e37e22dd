"""Bijective maps between unconstrained sampler space and constrained parameters.

Kinds: identity (means, coefficients), log (positive SDs), tanh (correlations
in (-1, 1)), logit (probabilities/fractions in (0, 1)). Each constrain call
also returns the log-absolute-Jacobian contribution for the density.
"""
from __future__ import annotations

import numpy as np

__all__ = ["OutOfDomain", "KINDS", "constrain", "unconstrain", "log_jacobian"]

KINDS = ("identity", "log", "tanh", "logit")


class OutOfDomain(ValueError):
    pass


def _softplus(u):
    # log(1 + exp(u)), stable for large |u|
    return np.logaddexp(0.0, u)


def constrain(kind: str, u):
    """Map unconstrained value(s) to the constrained scale; returns (value, log_jac)."""
    u = np.asarray(u, dtype=float)
    if kind == "identity":
        return u, np.zeros_like(u)
    if kind == "log":
        return np.exp(u), u.copy()
    if kind == "tanh":
        v = np.tanh(u)
        # log(1 - tanh^2 u) = 2(log 2 - |u| - log(1 + exp(-2|u|)))
        au = np.abs(u)
        log_jac = 2.0 * (np.log(2.0) - au - np.log1p(np.exp(-2.0 * au)))
        return v, log_jac
    if kind == "logit":
        v = _expit(u)
        log_jac = -(_softplus(u) + _softplus(-u))
        return v, log_jac
    raise ValueError(f"unknown transform kind {kind!r}")


def unconstrain(kind: str, x):
    """Inverse of constrain; raises OutOfDomain outside the constrained range."""
    x = np.asarray(x, dtype=float)
    if kind == "identity":
        return x.copy()
    if kind == "log":
        if np.any(x <= 0):
            raise OutOfDomain("log transform needs positive values")
        return np.log(x)
    if kind == "tanh":
        if np.any(np.abs(x) >= 1):
            raise OutOfDomain("tanh transform needs values in (-1, 1)")
        return np.arctanh(x)
    if kind == "logit":
        if np.any((x <= 0) | (x >= 1)):
            raise OutOfDomain("logit transform needs values in (0, 1)")
        return np.log(x) - np.log1p(-x)
    raise ValueError(f"unknown transform kind {kind!r}")


def log_jacobian(kind: str, u):
    return constrain(kind, u)[1]


def _expit(u):
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out
