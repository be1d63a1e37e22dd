"""Report rendering: summary tables as CSV plus matplotlib figures on disk.

The CLI's ``report`` subcommand drives this; the deterministic SVG/JSON scene
serialization lives in :mod:`dtameta.outputs` and is unaffected.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import Dataset
from .diagnostics import summarize_draws, trace_density_data
from .outputs import SrocScene, forest_data, sroc_scene, study_weights
from .results import FitResult

__all__ = ["write_report", "revman_csv", "summary_csv"]

_TRACE_PREFERENCE = (
    "se", "sp", "se_index", "sp_index", "se_at_report", "sp_at_report",
    "sigma_se", "sigma_sp", "rho", "sigma_se_index", "sigma_sp_index",
    "rho_index", "beta_se", "beta_sp", "dep_frac_diseased", "dep_frac_nondiseased",
)

_VARYING_PARAMS = ("se_at_report", "sp_at_report", "se_at_center", "sp_at_center")


def summary_csv(fit: FitResult, names: list[str] | None = None) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    is_continuous_metareg = (
        fit.config.get("model") == "metareg" and fit.config.get("kind") == "continuous"
    )
    header = ["parameter", "median", "q2.5", "q97.5", "rhat", "ess"]
    if is_continuous_metareg:
        header.append("varies_with_covariate")
    writer.writerow(header)
    for row in summarize_draws(fit, names):
        cells = [
            row.name, f"{row.median:.6g}", f"{row.q2_5:.6g}", f"{row.q97_5:.6g}",
            f"{row.rhat:.4f}" if row.rhat == row.rhat else "",
            f"{row.ess:.1f}" if row.ess == row.ess else "",
        ]
        if is_continuous_metareg:
            cells.append("yes" if row.name in _VARYING_PARAMS else "no")
        writer.writerow(cells)
    return out.getvalue()


def revman_csv(fit: FitResult) -> str:
    """Posterior medians of the HSROC parameters, one CSV row."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["Lambda", "Theta", "beta", "var_theta", "var_alpha"])
    writer.writerow(
        [
            f"{fit.median('hsroc_lambda'):.6g}",
            f"{fit.median('hsroc_theta'):.6g}",
            f"{fit.median('hsroc_beta'):.6g}",
            f"{fit.median('hsroc_var_theta'):.6g}",
            f"{fit.median('hsroc_var_alpha'):.6g}",
        ]
    )
    return out.getvalue()


def _weights_csv(fit: FitResult, d: Dataset) -> str:
    table = study_weights(fit, d)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["study_id", "weight_se_pct", "weight_sp_pct"])
    for r in table.rows:
        writer.writerow([r.study_id, f"{r.weight_se:.4f}", f"{r.weight_sp:.4f}"])
    return out.getvalue()


def _plot_scene(scene: SrocScene, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 7))
    colors = ("#d32f2f", "#1976d2", "#388e3c", "#7b1fa2", "#f57c00", "#00838f")
    for gi, g in enumerate(scene.groups):
        color = colors[gi % len(colors)]
        if g.prediction:
            xs, ys = zip(*g.prediction)
            ax.plot(xs, ys, color=color, ls="--", lw=1.3, label=f"{g.label} prediction")
        if g.credible:
            xs, ys = zip(*g.credible)
            ax.plot(xs, ys, color=color, lw=1.6, label=f"{g.label} 95% credible")
        if g.curve:
            xs, ys = zip(*g.curve)
            ax.plot(xs, ys, color=color, lw=1.2, alpha=0.8)
        if g.summary:
            ax.plot(*g.summary, marker="D", ms=9, color=color, mec="black", zorder=5)
    for p in scene.points:
        ax.plot(
            p.x, p.y, "o", ms=4 + 5 * np.sqrt(max(p.size, 0.04)),
            color=p.color, alpha=0.7, mec="white",
        )
    ax.set_xlim(*scene.x_range)
    ax.set_ylim(*scene.y_range)
    ax.set_xlabel(scene.x_label)
    ax.set_ylabel(scene.y_label)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _plot_forest(d: Dataset, path: Path, order: str = "input") -> None:
    rows = forest_data(d, order)
    n = len(rows)
    fig, axes = plt.subplots(1, 2, figsize=(9, 0.45 * n + 1.6), sharey=True)
    ys = np.arange(n)[::-1]
    for ax, label in zip(axes, ("Sensitivity", "Specificity")):
        for y, r in zip(ys, rows):
            point = r.se_hat if label == "Sensitivity" else r.sp_hat
            lo, hi = r.se_ci if label == "Sensitivity" else r.sp_ci
            ax.plot([lo, hi], [y, y], color="#333333", lw=1.4)
            ax.plot(point, y, "s", color="#1565c0", ms=6)
        ax.set_xlim(0, 1)
        ax.set_title(label)
        ax.grid(axis="x", alpha=0.3)
    axes[0].set_yticks(ys)
    axes[0].set_yticklabels([r.study_id for r in rows], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _plot_traces(fit: FitResult, path: Path) -> None:
    names = [n for n in _TRACE_PREFERENCE if n in fit.params][:6]
    if not names:
        names = list(fit.params)[:6]
    fig, axes = plt.subplots(len(names), 2, figsize=(9, 2.0 * len(names)), squeeze=False)
    for row, name in enumerate(names):
        data = trace_density_data(fit, name, bins=40)
        ax_t, ax_d = axes[row]
        for chain in data.chains:
            ax_t.plot(chain, lw=0.5, alpha=0.8)
        ax_t.set_ylabel(name, fontsize=8)
        centers = 0.5 * (np.array(data.bin_edges[:-1]) + np.array(data.bin_edges[1:]))
        widths = np.diff(np.array(data.bin_edges))
        ax_d.bar(centers, data.counts, width=widths, color="#1565c0", alpha=0.8)
        ax_d.set_yticks([])
    axes[0][0].set_title("trace")
    axes[0][1].set_title("density")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _plot_residuals(residuals, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(8, 0.4 * len(residuals) + 1.5))
    ys = np.arange(len(residuals))[::-1]
    for y, r in zip(ys, residuals):
        ax.plot([r.lo, r.hi], [y, y], color="#333333", lw=1.4)
        ax.plot(r.median, y, "o", color="#c62828", ms=6)
    ax.axvline(0.0, color="#888888", lw=1, ls=":")
    ax.set_yticks(ys)
    ax.set_yticklabels([r.study_id for r in residuals], fontsize=8)
    ax.set_xlabel("correlation residual (observed − model)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_report(fit: FitResult, d: Dataset, out_dir: str | Path) -> list[Path]:
    """Write summary CSVs and figures for one fit; returns the files written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    model = fit.config.get("model", "bivariate")

    path = out / "summary.csv"
    path.write_text(summary_csv(fit), encoding="utf-8")
    written.append(path)

    if "hsroc_lambda" in fit.params:
        path = out / "revman.csv"
        path.write_text(revman_csv(fit), encoding="utf-8")
        written.append(path)

    if "sigma_se" in fit.params and model in ("bivariate", "metareg"):
        path = out / "weights.csv"
        path.write_text(_weights_csv(fit, d), encoding="utf-8")
        written.append(path)

    scene = sroc_scene(fit, d, show_curve="hsroc_lambda" in fit.params)
    path = out / "sroc.png"
    _plot_scene(scene, path)
    written.append(path)

    path = out / "forest.png"
    _plot_forest(d, path)
    written.append(path)

    path = out / "trace_density.png"
    _plot_traces(fit, path)
    written.append(path)

    if model == "tlcm":
        from .tlcm import correlation_residuals

        path = out / "residuals.png"
        _plot_residuals(correlation_residuals(fit, d), path)
        written.append(path)
    return written
