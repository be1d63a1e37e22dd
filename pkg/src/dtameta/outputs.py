"""Reporting artifacts: sROC scenes, study weights, forest data, prevalence
trees, and deterministic JSON/SVG serialization.

Scenes are renderer-independent: geometry lives in ROC coordinates
(x = 1 - specificity, y = sensitivity) inside the unit square, and every study
point carries a metadata payload for interactive display.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import expit, logit
from scipy.stats import chi2

from .data import Dataset, EmptyArm, Rating, StudyAccuracy, study_accuracy
from .results import FitResult
from .bivariate import hsroc_curve_logit_se, hsroc_from_bivariate, predictive_draws

__all__ = [
    "DegenerateCloud",
    "MissingQuadas",
    "UnsupportedFormat",
    "ScenePoint",
    "SceneGroup",
    "SrocScene",
    "WeightRow",
    "WeightTable",
    "TreeCounts",
    "credible_ellipse",
    "sroc_scene",
    "sroc_scene_subgroups",
    "study_weights",
    "forest_data",
    "prevalence_tree",
    "render",
    "scene_from_json",
]

QUADAS_COLORS = {Rating.LOW: "#2e7d32", Rating.UNCLEAR: "#ef6c00", Rating.HIGH: "#c62828"}
DEFAULT_POINT_COLOR = "#1565c0"
ELLIPSE_VERTICES = 128
CURVE_POINTS = 200


class DegenerateCloud(ValueError):
    pass


class MissingQuadas(ValueError):
    pass


class UnsupportedFormat(ValueError):
    pass


@dataclass(frozen=True)
class ScenePoint:
    study_id: str
    x: float  # 1 - specificity
    y: float  # sensitivity
    size: float
    color: str
    meta: dict


@dataclass(frozen=True)
class SceneGroup:
    label: str
    summary: tuple[float, float] | None
    credible: tuple[tuple[float, float], ...] | None
    prediction: tuple[tuple[float, float], ...] | None
    curve: tuple[tuple[float, float], ...] | None


@dataclass(frozen=True)
class SrocScene:
    points: tuple[ScenePoint, ...]
    groups: tuple[SceneGroup, ...]
    x_label: str = "1 − Specificity"
    y_label: str = "Sensitivity"
    x_range: tuple[float, float] = (0.0, 1.0)
    y_range: tuple[float, float] = (0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "points": [asdict(p) for p in self.points],
            "groups": [
                {
                    "label": g.label,
                    "summary": list(g.summary) if g.summary else None,
                    "credible": [list(v) for v in g.credible] if g.credible else None,
                    "prediction": [list(v) for v in g.prediction] if g.prediction else None,
                    "curve": [list(v) for v in g.curve] if g.curve else None,
                }
                for g in self.groups
            ],
            "x_label": self.x_label,
            "y_label": self.y_label,
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SrocScene":
        points = tuple(
            ScenePoint(
                study_id=p["study_id"], x=p["x"], y=p["y"],
                size=p["size"], color=p["color"], meta=p["meta"],
            )
            for p in d["points"]
        )
        groups = tuple(
            SceneGroup(
                label=g["label"],
                summary=tuple(g["summary"]) if g.get("summary") else None,
                credible=tuple(tuple(v) for v in g["credible"]) if g.get("credible") else None,
                prediction=tuple(tuple(v) for v in g["prediction"]) if g.get("prediction") else None,
                curve=tuple(tuple(v) for v in g["curve"]) if g.get("curve") else None,
            )
            for g in d["groups"]
        )
        return cls(
            points=points,
            groups=groups,
            x_label=d.get("x_label", "1 − Specificity"),
            y_label=d.get("y_label", "Sensitivity"),
            x_range=tuple(d.get("x_range", (0.0, 1.0))),
            y_range=tuple(d.get("y_range", (0.0, 1.0))),
        )


@dataclass(frozen=True)
class WeightRow:
    study_id: str
    weight_se: float
    weight_sp: float


@dataclass(frozen=True)
class WeightTable:
    rows: tuple[WeightRow, ...]

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}


@dataclass(frozen=True)
class TreeCounts:
    n: float
    ordering: str  # "test-first" | "disease-first"
    nodes: dict[str, float] = field(default_factory=dict)

    def leaves(self) -> dict[str, float]:
        return {k: self.nodes[k] for k in ("tp", "fp", "fn", "tn")}

    def to_dict(self) -> dict:
        return {"n": self.n, "ordering": self.ordering, "nodes": dict(self.nodes)}


def credible_ellipse(points: np.ndarray, level: float) -> tuple[tuple[float, float], ...]:
    """Closed ellipse polygon from a 2-D logit-scale draw cloud.

    Moment-matched: mean and covariance of the cloud, Mahalanobis radius at the
    chi-square(2) quantile, 128 vertices, mapped through inv-logit. The first
    vertex is repeated at the end to close the polygon.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 100:
        raise ValueError("need an (n, 2) cloud with n >= 100")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    mean = points.mean(axis=0)
    cov = np.cov(points.T)
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
    if not np.isfinite(det) or det <= 1e-300 or cov[0, 0] <= 0 or cov[1, 1] <= 0:
        raise DegenerateCloud("draw cloud has a singular covariance")
    radius = math.sqrt(chi2.ppf(level, 2))
    chol = np.linalg.cholesky(cov)
    angles = np.linspace(0.0, 2 * math.pi, ELLIPSE_VERTICES, endpoint=False)
    circle = np.stack([np.cos(angles), np.sin(angles)])
    verts = (mean[:, None] + radius * (chol @ circle)).T
    verts = expit(verts)
    closed = np.vstack([verts, verts[:1]])
    return tuple((float(v[0]), float(v[1])) for v in closed)


def _point_meta(d: Dataset, acc: StudyAccuracy, weights: dict[str, WeightRow] | None):
    s = d.get(acc.study_id)
    meta = {
        "study_id": s.study_id,
        "author": s.author,
        "year": s.year,
        "tp": s.tp, "fp": s.fp, "fn": s.fn, "tn": s.tn,
        "se": acc.se_hat, "sp": acc.sp_hat,
        "se_ci": list(acc.se_ci), "sp_ci": list(acc.sp_ci),
    }
    if weights and s.study_id in weights:
        meta["weight_se"] = weights[s.study_id].weight_se
        meta["weight_sp"] = weights[s.study_id].weight_sp
    if s.quadas is not None:
        meta["quadas"] = {
            "risk_of_bias": [r.value for r in s.quadas.risk_of_bias],
            "applicability": [r.value for r in s.quadas.applicability],
        }
    return meta


def _scene_points(
    d: Dataset,
    weight_sizing: bool,
    quadas_overlay: bool,
    weights: WeightTable | None,
    model_points: dict[str, tuple[float, float]] | None = None,
) -> list[ScenePoint]:
    if quadas_overlay and not d.has_quadas:
        raise MissingQuadas("QUADAS overlay requested but the dataset has no ratings")
    wmap = {r.study_id: r for r in weights.rows} if weights else None
    totals = np.array([s.total for s in d.studies], dtype=float)
    rel = totals / totals.mean()
    points = []
    for i, s in enumerate(d.studies):
        acc = study_accuracy(s)
        if model_points and s.study_id in model_points:
            se_pt, sp_pt = model_points[s.study_id]
        else:
            se_pt, sp_pt = acc.se_hat, acc.sp_hat
        if weight_sizing and wmap and s.study_id in wmap:
            size = (wmap[s.study_id].weight_se + wmap[s.study_id].weight_sp) / 2.0 / (
                100.0 / len(d.studies)
            )
        else:
            size = float(rel[i])
        color = DEFAULT_POINT_COLOR
        if quadas_overlay and s.quadas is not None:
            color = QUADAS_COLORS[s.quadas.worst_risk()]
        points.append(
            ScenePoint(
                study_id=s.study_id,
                x=float(1.0 - sp_pt),
                y=float(se_pt),
                size=float(size),
                color=color,
                meta=_point_meta(d, acc, wmap),
            )
        )
    return points


def _roc_cloud(logit_se: np.ndarray, logit_sp: np.ndarray) -> np.ndarray:
    # logit(1 - sp) = -logit(sp), so expit maps columns straight to (x, y)
    return np.stack([-logit_sp, logit_se], axis=1)


def _curve_from_draws(mu_se, mu_sp, s1, s2, rho) -> tuple[tuple[float, float], ...]:
    lam, _, beta, _, _ = hsroc_from_bivariate(
        np.stack([mu_se, mu_sp], axis=-1), np.stack([s1, s2], axis=-1), rho
    )
    lam_med = float(np.median(lam))
    beta_med = float(np.median(beta))
    sp_grid = np.linspace(0.001, 0.999, CURVE_POINTS)
    x_logit = -logit(sp_grid)
    y = expit(hsroc_curve_logit_se(lam_med, beta_med, x_logit))
    return tuple((float(1.0 - sp), float(yy)) for sp, yy in zip(sp_grid, y))


def _bivariate_group(
    fit: FitResult, label: str, level: float, seed: int,
    show_curve: bool, show_prediction: bool,
    mu_se_name="mu_se", mu_sp_name="mu_sp",
) -> SceneGroup:
    mu_se = fit.pooled(mu_se_name)
    mu_sp = fit.pooled(mu_sp_name)
    summary = (float(1.0 - expit(np.median(mu_sp))), float(expit(np.median(mu_se))))
    credible = credible_ellipse(_roc_cloud(mu_se, mu_sp), level)
    prediction = None
    if show_prediction:
        pred = predictive_draws(fit, seed)
        prediction = credible_ellipse(_roc_cloud(pred[:, 0], pred[:, 1]), level)
    curve = None
    if show_curve:
        curve = _curve_from_draws(
            mu_se, mu_sp, fit.pooled("sigma_se"), fit.pooled("sigma_sp"), fit.pooled("rho")
        )
    return SceneGroup(
        label=label, summary=summary, credible=credible,
        prediction=prediction, curve=curve,
    )


def sroc_scene(
    fit: FitResult,
    d: Dataset,
    show_curve: bool = False,
    show_prediction: bool = True,
    weight_sizing: bool = False,
    quadas_overlay: bool = False,
    level: float = 0.95,
    seed: int = 0,
) -> SrocScene:
    """Complete sROC scene for a bivariate, meta-regression, or latent class fit."""
    model = fit.config.get("model", "bivariate")
    weights = None
    if (weight_sizing or model in ("bivariate", "metareg")) and "sigma_se" in fit.params:
        try:
            weights = study_weights(fit, d)
        except (EmptyArm, KeyError):
            weights = None

    if model == "bivariate":
        groups = [
            _bivariate_group(fit, "pooled", level, seed, show_curve, show_prediction)
        ]
        points = _scene_points(d, weight_sizing, quadas_overlay, weights)
    elif model == "metareg":
        if fit.config.get("kind") == "categorical":
            groups = []
            s1 = fit.pooled("sigma_se")
            s2 = fit.pooled("sigma_sp")
            rho = fit.pooled("rho")
            rng = np.random.default_rng([seed, 4517])
            for level_name in fit.config["levels"]:
                mu_se = fit.pooled(f"mu_se[{level_name}]")
                mu_sp = fit.pooled(f"mu_sp[{level_name}]")
                summary = (
                    float(1.0 - expit(np.median(mu_sp))),
                    float(expit(np.median(mu_se))),
                )
                credible = credible_ellipse(_roc_cloud(mu_se, mu_sp), level)
                prediction = None
                if show_prediction:
                    e1 = rng.standard_normal(mu_se.shape[0])
                    e2 = rng.standard_normal(mu_se.shape[0])
                    c = np.sqrt(1 - rho**2)
                    a_new = mu_se + s1 * e1
                    b_new = mu_sp + s2 * (rho * e1 + c * e2)
                    prediction = credible_ellipse(_roc_cloud(a_new, b_new), level)
                curve = _curve_from_draws(mu_se, mu_sp, s1, s2, rho) if show_curve else None
                groups.append(SceneGroup(level_name, summary, credible, prediction, curve))
        else:
            a_rep = logit(fit.pooled("se_at_report"))
            b_rep = logit(fit.pooled("sp_at_report"))
            summary = (
                float(1.0 - expit(np.median(b_rep))),
                float(expit(np.median(a_rep))),
            )
            credible = credible_ellipse(_roc_cloud(a_rep, b_rep), level)
            prediction = None
            if show_prediction:
                rng = np.random.default_rng([seed, 4517])
                s1 = fit.pooled("sigma_se")
                s2 = fit.pooled("sigma_sp")
                rho = fit.pooled("rho")
                c = np.sqrt(1 - rho**2)
                e1 = rng.standard_normal(a_rep.shape[0])
                e2 = rng.standard_normal(a_rep.shape[0])
                prediction = credible_ellipse(
                    _roc_cloud(a_rep + s1 * e1, b_rep + s2 * (rho * e1 + c * e2)), level
                )
            curve = None
            if show_curve:
                curve = _curve_from_draws(
                    a_rep, b_rep, fit.pooled("sigma_se"), fit.pooled("sigma_sp"),
                    fit.pooled("rho"),
                )
            groups = [SceneGroup(f"at {fit.config.get('report_at')}", summary, credible, prediction, curve)]
        points = _scene_points(d, weight_sizing, quadas_overlay, weights)
    elif model == "tlcm":
        mu_se = fit.pooled("mu_se_index")
        mu_sp = fit.pooled("mu_sp_index")
        summary = (float(1.0 - expit(np.median(mu_sp))), float(expit(np.median(mu_se))))
        credible = credible_ellipse(_roc_cloud(mu_se, mu_sp), level)
        random_index = fit.config.get("tlcm", {}).get("index_effects") == "random"
        prediction = None
        curve = None
        if random_index and "rho_index" in fit.params:
            s1 = fit.pooled("sigma_se_index")
            s2 = fit.pooled("sigma_sp_index")
            rho = fit.pooled("rho_index")
            if show_prediction:
                rng = np.random.default_rng([seed, 4517])
                e1 = rng.standard_normal(mu_se.shape[0])
                e2 = rng.standard_normal(mu_se.shape[0])
                c = np.sqrt(1 - rho**2)
                prediction = credible_ellipse(
                    _roc_cloud(mu_se + s1 * e1, mu_sp + s2 * (rho * e1 + c * e2)), level
                )
            if show_curve:
                curve = _curve_from_draws(mu_se, mu_sp, s1, s2, rho)
        groups = [SceneGroup("index test", summary, credible, prediction, curve)]
        # study points are the model's study-specific index estimates
        model_points = {}
        if random_index:
            for s in d.studies:
                model_points[s.study_id] = (
                    float(np.median(fit.pooled(f"se_index_study[{s.study_id}]"))),
                    float(np.median(fit.pooled(f"sp_index_study[{s.study_id}]"))),
                )
        points = _scene_points(
            d, weight_sizing=False, quadas_overlay=quadas_overlay,
            weights=None, model_points=model_points or None,
        )
    else:
        raise ValueError(f"cannot build an sROC scene for model {model!r}")
    return SrocScene(points=tuple(points), groups=tuple(groups))


def sroc_scene_subgroups(
    fits: dict[str, FitResult],
    d: Dataset,
    covariate: str,
    show_curve: bool = False,
    show_prediction: bool = True,
    quadas_overlay: bool = False,
    level: float = 0.95,
    seed: int = 0,
) -> SrocScene:
    """One summary point and region set per subgroup fit."""
    groups = []
    for name, fit in fits.items():
        groups.append(
            _bivariate_group(fit, name, level, seed, show_curve, show_prediction)
        )
    points = _scene_points(d, False, quadas_overlay, None)
    return SrocScene(points=tuple(points), groups=tuple(groups))


def _inv2(m: np.ndarray) -> np.ndarray:
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    return np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]]) / det


def study_weights(fit: FitResult, d: Dataset) -> WeightTable:
    """Percentage study weights toward the pooled logit Se and Sp.

    Inverse of (within-study + between-study) covariance per study, with the
    between-study covariance taken at its posterior median; studies with any
    zero cell get a +0.5 continuity correction inside this computation only.
    """
    s1 = fit.median("sigma_se")
    s2 = fit.median("sigma_sp")
    rho = fit.median("rho")
    sigma = np.array([[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]])
    bs = []
    for s in d.studies:
        tp, fp, fn, tn = float(s.tp), float(s.fp), float(s.fn), float(s.tn)
        if 0.0 in (tp, fp, fn, tn):
            tp, fp, fn, tn = tp + 0.5, fp + 0.5, fn + 0.5, tn + 0.5
        s_i = np.array([[1 / tp + 1 / fn, 0.0], [0.0, 1 / tn + 1 / fp]])
        bs.append(_inv2(s_i + sigma))
    a_inv = _inv2(np.sum(bs, axis=0))
    rows = []
    for s, b in zip(d.studies, bs):
        m = a_inv @ b @ a_inv
        rows.append(
            WeightRow(
                study_id=s.study_id,
                weight_se=float(100.0 * m[0, 0] / a_inv[0, 0]),
                weight_sp=float(100.0 * m[1, 1] / a_inv[1, 1]),
            )
        )
    return WeightTable(rows=tuple(rows))


def forest_data(d: Dataset, order: str = "input") -> list[StudyAccuracy]:
    """Per-study accuracies with exact intervals, in display order."""
    rows = [study_accuracy(s) for s in d.studies]
    if order == "input":
        return rows
    if order == "year":
        years = {s.study_id: s.year for s in d.studies}
        return sorted(rows, key=lambda r: (years[r.study_id], r.study_id))
    if order == "se":
        return sorted(rows, key=lambda r: -r.se_hat)
    raise ValueError(f"unknown order {order!r}")


def prevalence_tree(
    n: float, prev: float, se: float, sp: float, ordering: str = "test-first"
) -> TreeCounts:
    """Expected patient counts for a population screened at a given prevalence.

    Counts are real-valued; rounding happens only at render time.
    """
    if n < 1:
        raise ValueError("population size must be >= 1")
    for name, v in (("prev", prev), ("se", se), ("sp", sp)):
        if not 0 <= v <= 1:
            raise ValueError(f"{name} must lie in [0, 1]")
    tp = n * prev * se
    fn = n * prev * (1 - se)
    fp = n * (1 - prev) * (1 - sp)
    tn = n * (1 - prev) * sp
    if ordering == "test-first":
        nodes = {
            "test_pos": tp + fp, "test_neg": fn + tn,
            "tp": tp, "fp": fp, "fn": fn, "tn": tn,
        }
    elif ordering == "disease-first":
        nodes = {
            "diseased": tp + fn, "non_diseased": fp + tn,
            "tp": tp, "fp": fp, "fn": fn, "tn": tn,
        }
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    return TreeCounts(n=float(n), ordering=ordering, nodes=nodes)


# --- serialization ---------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _px(x: float, y: float) -> tuple[float, float]:
    return 80.0 + x * 880.0, 920.0 - y * 880.0


def _polygon_path(vertices) -> str:
    cmds = []
    for i, (x, y) in enumerate(vertices):
        px, py = _px(x, y)
        cmds.append(f"{'M' if i == 0 else 'L'}{_fmt(px)},{_fmt(py)}")
    cmds.append("Z")
    return "".join(cmds)


def _svg_header(title: str) -> list[str]:
    return [
        '<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 1000 1000">',
        f"<title>{title}</title>",
        '<rect x="0" y="0" width="1000" height="1000" fill="white"/>',
    ]


def _svg_axes(x_label: str, y_label: str) -> list[str]:
    parts = [
        '<line x1="80" y1="920" x2="960" y2="920" stroke="black" stroke-width="2"/>',
        '<line x1="80" y1="920" x2="80" y2="40" stroke="black" stroke-width="2"/>',
    ]
    for t in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0):
        px, py = _px(t, 0.0)
        parts.append(
            f'<line x1="{_fmt(px)}" y1="920" x2="{_fmt(px)}" y2="928" stroke="black"/>'
        )
        parts.append(
            f'<text x="{_fmt(px)}" y="948" font-size="20" text-anchor="middle">{t:g}</text>'
        )
        qx, qy = _px(0.0, t)
        parts.append(
            f'<line x1="72" y1="{_fmt(qy)}" x2="80" y2="{_fmt(qy)}" stroke="black"/>'
        )
        parts.append(
            f'<text x="64" y="{_fmt(qy + 7)}" font-size="20" text-anchor="end">{t:g}</text>'
        )
    parts.append(
        f'<text x="520" y="990" font-size="24" text-anchor="middle">{x_label}</text>'
    )
    parts.append(
        f'<text x="24" y="480" font-size="24" text-anchor="middle" '
        f'transform="rotate(-90 24 480)">{y_label}</text>'
    )
    return parts


GROUP_COLORS = ("#d32f2f", "#1976d2", "#388e3c", "#7b1fa2", "#f57c00", "#00838f")


def _scene_svg(scene: SrocScene) -> str:
    parts = _svg_header("sROC plot")
    parts += _svg_axes(scene.x_label, scene.y_label)
    for gi, g in enumerate(scene.groups):
        color = GROUP_COLORS[gi % len(GROUP_COLORS)]
        if g.prediction:
            parts.append(
                f'<path d="{_polygon_path(g.prediction)}" fill="none" '
                f'stroke="{color}" stroke-width="2" stroke-dasharray="8,6"/>'
            )
        if g.credible:
            parts.append(
                f'<path d="{_polygon_path(g.credible)}" fill="none" '
                f'stroke="{color}" stroke-width="2"/>'
            )
        if g.curve:
            pts = " ".join(
                f"{_fmt(_px(x, y)[0])},{_fmt(_px(x, y)[1])}" for x, y in g.curve
            )
            parts.append(
                f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>'
            )
        if g.summary:
            px, py = _px(*g.summary)
            parts.append(
                f'<rect x="{_fmt(px - 9)}" y="{_fmt(py - 9)}" width="18" height="18" '
                f'fill="{color}" transform="rotate(45 {_fmt(px)} {_fmt(py)})">'
                f"<desc>{g.label}</desc></rect>"
            )
    for p in scene.points:
        px, py = _px(p.x, p.y)
        r = 6.0 * math.sqrt(max(p.size, 0.04)) + 3.0
        parts.append(
            f'<circle cx="{_fmt(px)}" cy="{_fmt(py)}" r="{_fmt(r)}" fill="{p.color}" '
            f'fill-opacity="0.75"><desc>{p.study_id}</desc></circle>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _forest_svg(rows: list[StudyAccuracy]) -> str:
    parts = _svg_header("Forest plot")
    n = len(rows)
    top, bottom = 60.0, 940.0
    step = (bottom - top) / max(n, 1)
    half = 500.0
    for panel, (x0, label) in enumerate(((40.0, "Sensitivity"), (540.0, "Specificity"))):
        parts.append(
            f'<text x="{_fmt(x0 + 210)}" y="40" font-size="24" text-anchor="middle">{label}</text>'
        )
        parts.append(
            f'<line x1="{_fmt(x0)}" y1="{_fmt(bottom)}" x2="{_fmt(x0 + 420)}" '
            f'y2="{_fmt(bottom)}" stroke="black"/>'
        )
        for i, r in enumerate(rows):
            y = top + (i + 0.5) * step
            point = r.se_hat if panel == 0 else r.sp_hat
            lo, hi = r.se_ci if panel == 0 else r.sp_ci
            x_lo = x0 + lo * 420.0
            x_hi = x0 + hi * 420.0
            x_pt = x0 + point * 420.0
            parts.append(
                f'<line x1="{_fmt(x_lo)}" y1="{_fmt(y)}" x2="{_fmt(x_hi)}" y2="{_fmt(y)}" '
                f'stroke="#333333" stroke-width="2"/>'
            )
            parts.append(
                f'<rect x="{_fmt(x_pt - 5)}" y="{_fmt(y - 5)}" width="10" height="10" '
                f'fill="#1565c0"/>'
            )
            if panel == 0:
                parts.append(
                    f'<text x="30" y="{_fmt(y + 5)}" font-size="15" '
                    f'text-anchor="end">{r.study_id}</text>'
                )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _tree_svg(tree: TreeCounts) -> str:
    parts = _svg_header("Prevalence tree")
    if tree.ordering == "test-first":
        layers = [
            [("N", tree.n)],
            [("test +", tree.nodes["test_pos"]), ("test −", tree.nodes["test_neg"])],
            [("TP", tree.nodes["tp"]), ("FP", tree.nodes["fp"]),
             ("FN", tree.nodes["fn"]), ("TN", tree.nodes["tn"])],
        ]
        child_of = {0: 0, 1: 0, 2: 1, 3: 1}
    else:
        layers = [
            [("N", tree.n)],
            [("diseased", tree.nodes["diseased"]), ("non-diseased", tree.nodes["non_diseased"])],
            [("TP", tree.nodes["tp"]), ("FN", tree.nodes["fn"]),
             ("FP", tree.nodes["fp"]), ("TN", tree.nodes["tn"])],
        ]
        child_of = {0: 0, 1: 0, 2: 1, 3: 1}
    y_levels = (120.0, 450.0, 780.0)
    positions: list[list[float]] = []
    for depth, layer in enumerate(layers):
        xs = [(i + 1) * 1000.0 / (len(layer) + 1) for i in range(len(layer))]
        positions.append(xs)
        for i, _ in enumerate(layer):
            if depth == 1:
                parts.append(
                    f'<line x1="{_fmt(positions[0][0])}" y1="{_fmt(y_levels[0] + 30)}" '
                    f'x2="{_fmt(xs[i])}" y2="{_fmt(y_levels[1] - 30)}" stroke="#666666"/>'
                )
            elif depth == 2:
                parent = positions[1][child_of[i]]
                parts.append(
                    f'<line x1="{_fmt(parent)}" y1="{_fmt(y_levels[1] + 30)}" '
                    f'x2="{_fmt(xs[i])}" y2="{_fmt(y_levels[2] - 30)}" stroke="#666666"/>'
                )
    for depth, layer in enumerate(layers):
        for i, (label, value) in enumerate(layer):
            x = positions[depth][i]
            y = y_levels[depth]
            parts.append(
                f'<rect x="{_fmt(x - 85)}" y="{_fmt(y - 30)}" width="170" height="60" '
                f'fill="#e3f2fd" stroke="#1565c0"/>'
            )
            parts.append(
                f'<text x="{_fmt(x)}" y="{_fmt(y - 6)}" font-size="19" '
                f'text-anchor="middle">{label}</text>'
            )
            parts.append(
                f'<text x="{_fmt(x)}" y="{_fmt(y + 18)}" font-size="19" '
                f'text-anchor="middle">{round(value)}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render(obj, format: str = "json") -> str:
    """Deterministic serialization of scenes and tables to JSON or SVG text."""
    if format not in ("json", "svg"):
        raise UnsupportedFormat(f"unknown format {format!r}")
    if isinstance(obj, SrocScene):
        if format == "json":
            return json.dumps(obj.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"
        return _scene_svg(obj)
    if isinstance(obj, WeightTable):
        if format == "json":
            return json.dumps(obj.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"
        raise UnsupportedFormat("weight tables render to JSON only")
    if isinstance(obj, TreeCounts):
        if format == "json":
            return json.dumps(obj.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"
        return _tree_svg(obj)
    if isinstance(obj, list) and obj and isinstance(obj[0], StudyAccuracy):
        if format == "json":
            rows = [
                {
                    "study_id": r.study_id,
                    "se": r.se_hat, "sp": r.sp_hat,
                    "se_ci": list(r.se_ci), "sp_ci": list(r.sp_ci),
                }
                for r in obj
            ]
            return json.dumps({"rows": rows}, sort_keys=True, separators=(",", ":")) + "\n"
        return _forest_svg(obj)
    raise UnsupportedFormat(f"cannot render {type(obj).__name__}")


def scene_from_json(text: str) -> SrocScene:
    return SrocScene.from_dict(json.loads(text))
