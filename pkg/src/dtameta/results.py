"""Fit results: named posterior draws, sampler statistics, provenance echo.

The JSON schema is {"params": {name: {"chains": [[...]]}}, "diagnostics": {...},
"config": {...}}. The config echo (dataset hash, priors, model config,
exclusions, sampler settings, seed, version) suffices to re-run the fit
bit-identically, and serialization is deterministic so identical fits produce
byte-identical files.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .diagnostics import DiagnosticsSummary, diagnostics_summary

__all__ = ["SamplerStats", "FitResult", "result_to_json", "result_from_json"]


@dataclass
class SamplerStats:
    divergent: np.ndarray      # (chains, samples) bool
    treedepth: np.ndarray      # (chains, samples) int
    energy: np.ndarray         # (chains, samples)
    step_size: np.ndarray      # (chains,) adapted step size
    inv_mass: np.ndarray       # (chains, dim)

    def to_dict(self) -> dict:
        return {
            "divergent": self.divergent.astype(int).tolist(),
            "treedepth": self.treedepth.tolist(),
            "energy": self.energy.tolist(),
            "step_size": self.step_size.tolist(),
            "inv_mass": self.inv_mass.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerStats":
        return cls(
            divergent=np.asarray(d["divergent"], dtype=bool),
            treedepth=np.asarray(d["treedepth"], dtype=int),
            energy=np.asarray(d["energy"], dtype=float),
            step_size=np.asarray(d["step_size"], dtype=float),
            inv_mass=np.asarray(d["inv_mass"], dtype=float),
        )


@dataclass
class FitResult:
    """Named posterior draws (constrained scale, one (chains, samples) array
    per scalar) plus sampler statistics, diagnostics, and the config echo."""

    params: dict[str, np.ndarray]
    stats: SamplerStats
    diagnostics: DiagnosticsSummary
    config: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        first = next(iter(self.params.values()))
        return first.shape[0]

    @property
    def n_samples(self) -> int:
        first = next(iter(self.params.values()))
        return first.shape[1]

    def pooled(self, name: str) -> np.ndarray:
        return np.asarray(self.params[name], dtype=float).reshape(-1)

    def median(self, name: str) -> float:
        return float(np.median(self.pooled(name)))


def build_fit_result(params: dict[str, np.ndarray], raw, config: dict) -> FitResult:
    """Assemble a FitResult from constrained draws and raw sampler output."""
    stats = SamplerStats(
        divergent=np.stack([c.divergent for c in raw.chains]),
        treedepth=np.stack([c.treedepth for c in raw.chains]),
        energy=np.stack([c.energy for c in raw.chains]),
        step_size=np.asarray([c.adapted_step_size for c in raw.chains]),
        inv_mass=np.stack([c.inv_mass for c in raw.chains]),
    )
    diags = diagnostics_summary(params, raw.n_divergent, raw.n_max_treedepth)
    config = dict(config)
    config.setdefault("version", __version__)
    return FitResult(params=params, stats=stats, diagnostics=diags, config=config)


def result_to_json(fit: FitResult, include_stats: bool = True) -> str:
    payload = {
        "params": {
            name: {"chains": np.asarray(draws, dtype=float).tolist()}
            for name, draws in fit.params.items()
        },
        "diagnostics": fit.diagnostics.to_dict(),
        "config": fit.config,
        "warnings": list(fit.warnings),
    }
    if include_stats:
        payload["stats"] = fit.stats.to_dict()
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def result_from_json(text: str) -> FitResult:
    d = json.loads(text)
    params = {
        name: np.asarray(entry["chains"], dtype=float)
        for name, entry in d["params"].items()
    }
    diags = DiagnosticsSummary.from_dict(d.get("diagnostics", {}))
    if "stats" in d:
        stats = SamplerStats.from_dict(d["stats"])
    else:
        first = next(iter(params.values()))
        shape = first.shape
        stats = SamplerStats(
            divergent=np.zeros(shape, dtype=bool),
            treedepth=np.zeros(shape, dtype=int),
            energy=np.zeros(shape),
            step_size=np.ones(shape[0]),
            inv_mass=np.ones((shape[0], 1)),
        )
    return FitResult(
        params=params,
        stats=stats,
        diagnostics=diags,
        config=d.get("config", {}),
        warnings=list(d.get("warnings", [])),
    )
