"""Command-line workflow: validate, prior-check, fit, plot, diagnostics, report, serve.

Exit codes: 0 ok; 1 validation failure; 2 usage or runtime error;
3 diagnostics gate failed under --strict.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import __version__
from .data import DatasetError, SidecarConfig, parse_dataset, validate_dataset
from .diagnostics import RHAT_THRESHOLD
from .engine import SamplerConfig
from .priors import PriorSpec, prior_predictive_summary
from .results import FitResult, result_from_json, result_to_json
from .bivariate import (
    MetaregConfig,
    Skipped,
    fit_bivariate,
    fit_metareg,
    fit_subgroups,
    pairwise_contrasts,
)
from .tlcm import TlcmConfig, fit_tlcm


def _fail(message: str, code: int = 2):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_dataset(path: str, config_path: str | None):
    sidecar = None
    if config_path:
        sidecar = SidecarConfig.from_dict(json.loads(Path(config_path).read_text()))
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        _fail(str(e))
    try:
        return parse_dataset(text, sidecar), sidecar
    except DatasetError as e:
        where = f" (row {e.row}, column {e.column})" if e.row is not None else ""
        _fail(f"{type(e).__name__}: {e}{where}", code=1)


def _load_priors(path: str | None) -> PriorSpec:
    if path is None:
        return PriorSpec()
    return PriorSpec.from_dict(json.loads(Path(path).read_text()))


def _sampler_config(chains, warmup, samples, seed, target_accept, max_treedepth):
    if seed is None:
        click.echo(
            "warning: no --seed given; defaulting to 0 (pass --seed for "
            "an explicitly reproducible run)",
            err=True,
        )
        seed = 0
    return SamplerConfig(
        chains=chains, warmup=warmup, samples=samples, seed=seed,
        target_accept=target_accept, max_treedepth=max_treedepth,
    )


def _write_or_print(text: str, out: str | None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
        click.echo(f"wrote {out}")
    else:
        click.echo(text, nl=False)


def _fit_options(f):
    options = [
        click.option("--priors", "priors_file", type=click.Path(exists=True), default=None,
                     help="JSON priors file; omitted fields take defaults."),
        click.option("--chains", default=4, show_default=True),
        click.option("--warmup", default=1000, show_default=True),
        click.option("--samples", default=1000, show_default=True),
        click.option("--seed", type=int, default=None),
        click.option("--target-accept", default=0.8, show_default=True),
        click.option("--max-treedepth", default=10, show_default=True),
        click.option("--exclude", default="", help="comma-separated study ids to drop"),
        click.option("--config", "config_file", type=click.Path(exists=True), default=None,
                     help="sidecar JSON (covariate kinds, ref column)"),
        click.option("--threads", default=1, show_default=True),
        click.option("--out", type=click.Path(), default=None, help="result JSON path"),
    ]
    for opt in reversed(options):
        f = opt(f)
    return f


@click.group()
@click.version_option(__version__)
def main():
    """Bayesian meta-analysis of diagnostic test accuracy."""


@main.command()
@click.argument("data", type=click.Path(exists=True))
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
def validate(data, config_file):
    """Parse and validate a dataset; exit 1 on errors."""
    sidecar = None
    if config_file:
        sidecar = SidecarConfig.from_dict(json.loads(Path(config_file).read_text()))
    try:
        ds = parse_dataset(Path(data).read_text(encoding="utf-8"), sidecar)
    except DatasetError as e:
        where = f" at row {e.row}, column {e.column}" if e.row is not None else ""
        click.echo(f"INVALID {type(e).__name__}: {e}{where}", err=True)
        sys.exit(1)
    report = validate_dataset(ds)
    for w in report.warnings:
        loc = f"row {w.row}: " if w.row is not None else ""
        click.echo(f"warning: {loc}{w.message}")
    for e in report.errors:
        loc = f"row {e.row}: " if e.row is not None else ""
        click.echo(f"error: {loc}{e.message}", err=True)
    if not report.ok:
        sys.exit(1)
    click.echo(
        f"OK: {len(ds.studies)} studies, "
        f"{len(ds.covariate_schema)} covariate(s), "
        f"QUADAS={'yes' if ds.has_quadas else 'no'}"
    )


@main.command("prior-check")
@click.option("--priors", "priors_file", type=click.Path(exists=True), default=None)
@click.option("--model", "model_kind", type=click.Choice(["bivariate", "tlcm"]),
              default="bivariate", show_default=True)
@click.option("--draws", default=50_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None)
def prior_check(priors_file, model_kind, draws, seed, out):
    """Prior-predictive medians and 95% intervals."""
    spec = _load_priors(priors_file)
    summary = prior_predictive_summary(spec, model_kind, draws, seed)
    lines = ["parameter,median,q2.5,q97.5,prob_median,prob_q2.5,prob_q97.5"]
    for r in summary.rows:
        prob = (
            f"{r.prob_median:.4f},{r.prob_q2_5:.4f},{r.prob_q97_5:.4f}"
            if r.prob_median is not None
            else ",,"
        )
        lines.append(f"{r.name},{r.median:.4f},{r.q2_5:.4f},{r.q97_5:.4f},{prob}")
    _write_or_print("\n".join(lines) + "\n", out)


@main.group()
def fit():
    """Run a model and write a result JSON."""


def _run_fit(runner, out):
    try:
        result = runner()
    except DatasetError as e:
        _fail(f"{type(e).__name__}: {e}", code=1)
    except ValueError as e:
        _fail(str(e))
    payload = result if isinstance(result, str) else result_to_json(result)
    _write_or_print(payload, out)


@fit.command("bivariate")
@click.argument("data", type=click.Path(exists=True))
@_fit_options
def fit_bivariate_cmd(data, priors_file, chains, warmup, samples, seed,
                      target_accept, max_treedepth, exclude, config_file, threads, out):
    """Bivariate random-effects meta-analysis (perfect gold standard)."""
    ds, _ = _load_dataset(data, config_file)
    p = _load_priors(priors_file)
    cfg = _sampler_config(chains, warmup, samples, seed, target_accept, max_treedepth)
    exclusions = [e for e in exclude.split(",") if e]
    _run_fit(lambda: fit_bivariate(ds, p, cfg, exclusions, threads=threads), out)


@fit.command("metareg")
@click.argument("data", type=click.Path(exists=True))
@click.option("--covariate", required=True)
@click.option("--kind", type=click.Choice(["categorical", "continuous"]), default=None,
              help="defaults to the covariate's declared kind")
@click.option("--center", type=float, default=None)
@click.option("--report-at", type=float, default=None)
@_fit_options
def fit_metareg_cmd(data, covariate, kind, center, report_at, priors_file, chains,
                    warmup, samples, seed, target_accept, max_treedepth, exclude,
                    config_file, threads, out):
    """Bivariate meta-regression with one covariate."""
    ds, _ = _load_dataset(data, config_file)
    if kind is None:
        kind = ds.covariate_kind(covariate)
        if kind is None:
            _fail(f"no covariate named {covariate!r}", code=1)
    p = _load_priors(priors_file)
    cfg = _sampler_config(chains, warmup, samples, seed, target_accept, max_treedepth)
    exclusions = [e for e in exclude.split(",") if e]
    m = MetaregConfig(covariate=covariate, kind=kind, center=center, report_at=report_at)

    def runner():
        result = fit_metareg(ds, m, p, cfg, exclusions, threads=threads)
        if kind == "categorical":
            result.config["contrasts"] = pairwise_contrasts(result)
        return result

    _run_fit(runner, out)


@fit.command("subgroup")
@click.argument("data", type=click.Path(exists=True))
@click.option("--covariate", required=True)
@click.option("--min-studies", default=2, show_default=True)
@_fit_options
def fit_subgroup_cmd(data, covariate, min_studies, priors_file, chains, warmup,
                     samples, seed, target_accept, max_treedepth, exclude,
                     config_file, threads, out):
    """Separate bivariate fit per level of a categorical covariate."""
    ds, _ = _load_dataset(data, config_file)
    p = _load_priors(priors_file)
    cfg = _sampler_config(chains, warmup, samples, seed, target_accept, max_treedepth)

    def runner():
        fits = fit_subgroups(ds, covariate, p, cfg, min_studies, threads=threads)
        levels = {}
        for level, item in fits.items():
            if isinstance(item, Skipped):
                levels[level] = {"skipped": item.reason, "n_studies": item.n_studies}
            else:
                levels[level] = json.loads(result_to_json(item))
        return json.dumps(
            {"model": "subgroup", "covariate": covariate, "levels": levels},
            sort_keys=True, separators=(",", ":"),
        ) + "\n"

    _run_fit(runner, out)


@fit.command("tlcm")
@click.argument("data", type=click.Path(exists=True))
@click.option("--ref-column", default=None,
              help="categorical covariate naming each study's reference test")
@click.option("--index", "index_effects", type=click.Choice(["fixed", "random"]),
              default="random", show_default=True)
@click.option("--refs", "ref_effects", type=click.Choice(["fixed", "random"]),
              default="fixed", show_default=True)
@click.option("--dependence", type=click.Choice(["independent", "dependent"]),
              default="independent", show_default=True)
@click.option("--uncorrelated-effects", is_flag=True, default=False,
              help="independent normal random effects instead of correlated")
@_fit_options
def fit_tlcm_cmd(data, ref_column, index_effects, ref_effects, dependence,
                 uncorrelated_effects, priors_file, chains, warmup, samples, seed,
                 target_accept, max_treedepth, exclude, config_file, threads, out):
    """Latent class meta-analysis (no gold standard)."""
    ds, sidecar = _load_dataset(data, config_file)
    if ref_column is None and sidecar is not None:
        ref_column = sidecar.ref_column
    p = _load_priors(priors_file)
    cfg = _sampler_config(chains, warmup, samples, seed, target_accept, max_treedepth)
    c = TlcmConfig(
        index_effects=index_effects, ref_effects=ref_effects, dependence=dependence,
        ref_test_column=ref_column, correlated_effects=not uncorrelated_effects,
    )
    if exclude:
        from .data import exclude_studies
        ds = exclude_studies(ds, [e for e in exclude.split(",") if e])
    _run_fit(lambda: fit_tlcm(ds, c, p, cfg, threads=threads), out)


@main.group()
def plot():
    """Render scenes and plots to SVG or JSON."""


def _load_result(path: str):
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return payload


@plot.command("sroc")
@click.argument("result", type=click.Path(exists=True))
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--format", "fmt", type=click.Choice(["svg", "json"]), default="svg",
              show_default=True)
@click.option("--curve/--no-curve", default=False, show_default=True)
@click.option("--prediction/--no-prediction", default=True, show_default=True)
@click.option("--weight-sizing", is_flag=True, default=False)
@click.option("--quadas-overlay", is_flag=True, default=False)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None)
def plot_sroc(result, data_path, config_file, fmt, curve, prediction, weight_sizing,
              quadas_overlay, seed, out):
    """sROC scene from a fit result."""
    from .outputs import render, sroc_scene, sroc_scene_subgroups

    ds, _ = _load_dataset(data_path, config_file)
    payload = _load_result(result)
    try:
        if payload.get("model") == "subgroup":
            fits = {
                level: result_from_json(json.dumps(entry))
                for level, entry in payload["levels"].items()
                if "skipped" not in entry
            }
            scene = sroc_scene_subgroups(
                fits, ds, payload["covariate"], show_curve=curve,
                show_prediction=prediction, quadas_overlay=quadas_overlay, seed=seed,
            )
        else:
            fit_result = result_from_json(json.dumps(payload))
            scene = sroc_scene(
                fit_result, ds, show_curve=curve, show_prediction=prediction,
                weight_sizing=weight_sizing, quadas_overlay=quadas_overlay, seed=seed,
            )
        _write_or_print(render(scene, fmt), out)
    except ValueError as e:
        _fail(str(e))


@plot.command("forest")
@click.argument("data", type=click.Path(exists=True))
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--order", type=click.Choice(["input", "year", "se"]), default="input",
              show_default=True)
@click.option("--format", "fmt", type=click.Choice(["svg", "json"]), default="svg",
              show_default=True)
@click.option("--out", type=click.Path(), default=None)
def plot_forest(data, config_file, order, fmt, out):
    """Forest data (per-study Se/Sp with exact intervals)."""
    from .outputs import forest_data, render

    ds, _ = _load_dataset(data, config_file)
    try:
        _write_or_print(render(forest_data(ds, order), fmt), out)
    except ValueError as e:
        _fail(str(e))


@plot.command("tree")
@click.option("--n", "n_pop", type=float, default=1000, show_default=True)
@click.option("--prev", type=float, required=True)
@click.option("--se", type=float, required=True)
@click.option("--sp", type=float, required=True)
@click.option("--ordering", type=click.Choice(["test-first", "disease-first"]),
              default="test-first", show_default=True)
@click.option("--format", "fmt", type=click.Choice(["svg", "json"]), default="svg",
              show_default=True)
@click.option("--out", type=click.Path(), default=None)
def plot_tree(n_pop, prev, se, sp, ordering, fmt, out):
    """Prevalence tree of expected patient counts."""
    from .outputs import prevalence_tree, render

    try:
        tree = prevalence_tree(n_pop, prev, se, sp, ordering)
        _write_or_print(render(tree, fmt), out)
    except ValueError as e:
        _fail(str(e))


@main.command()
@click.argument("result", type=click.Path(exists=True))
@click.option("--strict", is_flag=True, default=False,
              help="exit 3 unless rhat < 1.05, zero divergences, zero treedepth hits")
def diagnostics(result, strict):
    """Summarize convergence diagnostics for a stored result."""
    payload = _load_result(result)
    results = (
        [(level, entry) for level, entry in payload["levels"].items() if "skipped" not in entry]
        if payload.get("model") == "subgroup"
        else [("", payload)]
    )
    all_ok = True
    for label, entry in results:
        d = entry["diagnostics"]
        prefix = f"[{label}] " if label else ""
        rhats = [v["rhat"] for v in d["per_param"].values() if v["rhat"] == v["rhat"]]
        max_rhat = max(rhats) if rhats else float("nan")
        click.echo(
            f"{prefix}divergences={d['n_divergent']} "
            f"treedepth_hits={d['n_max_treedepth']} max_rhat={max_rhat:.4f} "
            f"gate={'PASS' if d['ok'] else 'FAIL'} (rhat<{RHAT_THRESHOLD})"
        )
        for warning in entry.get("warnings", []):
            click.echo(f"{prefix}warning: {warning}")
        all_ok = all_ok and d["ok"]
    if strict and not all_ok:
        sys.exit(3)


@main.command()
@click.argument("result", type=click.Path(exists=True))
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--out-dir", type=click.Path(), required=True)
def report(result, data_path, config_file, out_dir):
    """Write summary CSVs and matplotlib figures for a stored result."""
    from .report import write_report

    ds, _ = _load_dataset(data_path, config_file)
    payload = _load_result(result)
    try:
        if payload.get("model") == "subgroup":
            written = []
            for level, entry in payload["levels"].items():
                if "skipped" in entry:
                    click.echo(f"[{level}] skipped: {entry['skipped']}")
                    continue
                fit_result = result_from_json(json.dumps(entry))
                safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in level)
                written += write_report(fit_result, ds, Path(out_dir) / safe)
        else:
            fit_result = result_from_json(json.dumps(payload))
            written = write_report(fit_result, ds, out_dir)
    except ValueError as e:
        _fail(str(e))
    for path in written:
        click.echo(f"wrote {path}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, show_default=True)
@click.option("--store", type=click.Path(), default="./dtameta-store", show_default=True)
@click.option("--workers", type=int, default=None, help="job worker threads")
def serve(host, port, store, workers):
    """Run the HTTP job service (and web UI when frontend assets exist)."""
    import uvicorn

    from .service import create_app

    app = create_app(Path(store), workers=workers)
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
