"""Study-level dataset ingestion, validation, and per-study accuracy.

Datasets are 2x2 count tables per study, optionally carrying QUADAS-2
quality ratings and covariate columns. Column layout is positional:

    6 columns   id/author, year, tp, fp, fn, tn
    13 columns  the 6 above + 7 QUADAS-2 ratings
    >=7         the 6 above + covariate columns
    >=14        the 6 above + 7 QUADAS-2 ratings + covariates

Header text is preserved for display but never used to locate the count
columns. Under the bivariate model the counts are reference-classified
(diseased arm = tp+fn, non-diseased arm = tn+fp); under the latent class
model the same four counts are the index-by-reference cross-classification.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import io
from dataclasses import dataclass, field, replace

from scipy.stats import beta as _beta_dist

__all__ = [
    "Rating",
    "QuadasAssessment",
    "StudyRecord",
    "CovariateSpec",
    "Dataset",
    "ValidationIssue",
    "ValidationReport",
    "StudyAccuracy",
    "SidecarConfig",
    "DatasetError",
    "MalformedCsv",
    "BadCount",
    "BadRating",
    "DuplicateStudyId",
    "UnknownStudyId",
    "EmptyArm",
    "parse_dataset",
    "serialize_dataset",
    "validate_dataset",
    "study_accuracy",
    "exclude_studies",
    "dataset_hash",
]

QUADAS_RISK_DOMAINS = (
    "patient selection",
    "index test",
    "reference standard",
    "flow and timing",
)
QUADAS_APPLICABILITY_DOMAINS = (
    "patient selection",
    "index test",
    "reference standard",
)


class DatasetError(ValueError):
    """Base class for ingestion errors; carries the offending location."""

    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class MalformedCsv(DatasetError):
    pass


class BadCount(DatasetError):
    pass


class BadRating(DatasetError):
    pass


class DuplicateStudyId(DatasetError):
    pass


class UnknownStudyId(DatasetError):
    pass


class EmptyArm(DatasetError):
    pass


class Rating(enum.Enum):
    LOW = "low"
    HIGH = "high"
    UNCLEAR = "unclear"


# Numeric encodings accepted alongside text, in enumeration order.
_RATING_ALIASES = {
    "low": Rating.LOW,
    "high": Rating.HIGH,
    "unclear": Rating.UNCLEAR,
    "1": Rating.LOW,
    "2": Rating.HIGH,
    "3": Rating.UNCLEAR,
}


@dataclass(frozen=True)
class QuadasAssessment:
    """QUADAS-2 ratings: 4 risk-of-bias domains then 3 applicability domains."""

    risk_of_bias: tuple[Rating, Rating, Rating, Rating]
    applicability: tuple[Rating, Rating, Rating]

    def ratings(self) -> tuple[Rating, ...]:
        return self.risk_of_bias + self.applicability

    def worst_risk(self) -> Rating:
        """Most severe risk-of-bias rating (high > unclear > low)."""
        severity = {Rating.LOW: 0, Rating.UNCLEAR: 1, Rating.HIGH: 2}
        return max(self.risk_of_bias, key=lambda r: severity[r])


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    author: str
    year: int
    tp: int
    fp: int
    fn: int
    tn: int
    quadas: QuadasAssessment | None = None
    covariates: dict[str, str | float] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str  # "categorical" | "continuous"


@dataclass(frozen=True)
class Dataset:
    studies: tuple[StudyRecord, ...]
    covariate_schema: tuple[CovariateSpec, ...] = ()
    has_quadas: bool = False
    headers: tuple[str, ...] = ()

    def study_ids(self) -> tuple[str, ...]:
        return tuple(s.study_id for s in self.studies)

    def get(self, study_id: str) -> StudyRecord:
        for s in self.studies:
            if s.study_id == study_id:
                return s
        raise UnknownStudyId(f"unknown study id: {study_id!r}")

    def covariate_kind(self, name: str) -> str | None:
        for spec in self.covariate_schema:
            if spec.name == name:
                return spec.kind
        return None

    def covariate_values(self, name: str) -> list[str | float]:
        if self.covariate_kind(name) is None:
            raise KeyError(f"no covariate named {name!r}")
        return [s.covariates[name] for s in self.studies]

    def levels(self, name: str) -> list[str]:
        """Observed levels of a categorical covariate, in order of first appearance."""
        if self.covariate_kind(name) != "categorical":
            raise KeyError(f"{name!r} is not a categorical covariate")
        seen: list[str] = []
        for s in self.studies:
            v = str(s.covariates[name])
            if v not in seen:
                seen.append(v)
        return seen


@dataclass(frozen=True)
class ValidationIssue:
    row: int | None
    column: int | None
    message: str


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[ValidationIssue, ...]
    warnings: tuple[ValidationIssue, ...]

    @property
    def ok(self) -> bool:
        return not self.errors


@dataclass(frozen=True)
class StudyAccuracy:
    study_id: str
    se_hat: float
    sp_hat: float
    se_ci: tuple[float, float]
    sp_ci: tuple[float, float]


@dataclass(frozen=True)
class SidecarConfig:
    """Optional JSON sidecar: covariate kind overrides and TLCM reference column.

    ``quadas`` forces or suppresses the QUADAS interpretation of a 13-column
    (or >=14-column) layout when the default positional rule is wrong.
    """

    covariate_kinds: dict[str, str] = field(default_factory=dict)
    ref_column: str | None = None
    quadas: bool | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "SidecarConfig":
        kinds = dict(d.get("covariates", d.get("covariate_kinds", {})))
        for name, kind in kinds.items():
            if kind not in ("categorical", "continuous"):
                raise ValueError(f"bad covariate kind {kind!r} for {name!r}")
        return cls(
            covariate_kinds=kinds,
            ref_column=d.get("ref_column"),
            quadas=d.get("quadas"),
        )


def _parse_count(text: str, row: int, column: int) -> int:
    t = text.strip()
    try:
        value = int(t)
    except ValueError:
        # tolerate "53.0" style floats that are exact integers
        try:
            f = float(t)
        except ValueError:
            raise BadCount(f"count {text!r} is not an integer", row, column) from None
        if not f.is_integer():
            raise BadCount(f"count {text!r} is not an integer", row, column) from None
        value = int(f)
    if value < 0:
        raise BadCount(f"count {text!r} is negative", row, column)
    return value


def _parse_rating(text: str, row: int, column: int) -> Rating:
    key = text.strip().lower()
    if key not in _RATING_ALIASES:
        raise BadRating(
            f"rating {text!r} not one of low/high/unclear (or 1/2/3)", row, column
        )
    return _RATING_ALIASES[key]


def _is_number(text: str) -> bool:
    try:
        v = float(text)
    except ValueError:
        return False
    return v == v and abs(v) != float("inf")


def parse_dataset(csv_text: str, config: SidecarConfig | None = None) -> Dataset:
    """Parse CSV text (header row required) into a Dataset.

    Raises MalformedCsv / BadCount / BadRating / DuplicateStudyId with the
    1-based data-row and 0-based column of the first problem found.
    """
    config = config or SidecarConfig()
    try:
        rows = list(csv.reader(io.StringIO(csv_text)))
    except csv.Error as e:
        raise MalformedCsv(f"unparseable CSV: {e}") from None
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise MalformedCsv("empty input")
    headers = tuple(h.strip() for h in rows[0])
    ncol = len(headers)
    if ncol < 6:
        raise MalformedCsv(f"expected at least 6 columns, found {ncol}", row=0)

    if config.quadas is not None:
        has_quadas = config.quadas and ncol >= 13
    else:
        has_quadas = ncol == 13 or ncol >= 14
    n_fixed = 13 if has_quadas else 6
    if has_quadas and ncol < 13:
        raise MalformedCsv("QUADAS layout needs at least 13 columns", row=0)
    cov_names = list(headers[n_fixed:])
    if len(set(cov_names)) != len(cov_names):
        raise MalformedCsv("duplicate covariate column names", row=0)

    studies: list[StudyRecord] = []
    seen_ids: set[str] = set()
    cov_raw: dict[str, list[str]] = {name: [] for name in cov_names}
    for irow, cells in enumerate(rows[1:], start=1):
        if len(cells) != ncol:
            raise MalformedCsv(
                f"row has {len(cells)} fields, header has {ncol}", row=irow
            )
        study_id = cells[0].strip()
        if not study_id:
            raise MalformedCsv("empty study id", row=irow, column=0)
        if study_id in seen_ids:
            raise DuplicateStudyId(f"duplicate study id {study_id!r}", row=irow, column=0)
        seen_ids.add(study_id)
        try:
            year = int(cells[1].strip())
        except ValueError:
            raise MalformedCsv(f"year {cells[1]!r} is not an integer", irow, 1) from None
        tp = _parse_count(cells[2], irow, 2)
        fp = _parse_count(cells[3], irow, 3)
        fn = _parse_count(cells[4], irow, 4)
        tn = _parse_count(cells[5], irow, 5)
        quadas = None
        if has_quadas:
            ratings = [_parse_rating(cells[6 + j], irow, 6 + j) for j in range(7)]
            quadas = QuadasAssessment(
                risk_of_bias=tuple(ratings[:4]), applicability=tuple(ratings[4:])
            )
        for j, name in enumerate(cov_names):
            cov_raw[name].append(cells[n_fixed + j].strip())
        studies.append(
            StudyRecord(
                study_id=study_id,
                author=study_id,
                year=year,
                tp=tp,
                fp=fp,
                fn=fn,
                tn=tn,
                quadas=quadas,
            )
        )
    if not studies:
        raise MalformedCsv("no data rows")

    # covariate kinds: explicit override, else all-numeric => continuous
    schema: list[CovariateSpec] = []
    for name in cov_names:
        kind = config.covariate_kinds.get(name)
        if kind is None:
            kind = "continuous" if all(_is_number(v) for v in cov_raw[name]) else "categorical"
        schema.append(CovariateSpec(name, kind))

    typed_studies: list[StudyRecord] = []
    for i, s in enumerate(studies):
        values: dict[str, str | float] = {}
        for spec in schema:
            raw = cov_raw[spec.name][i]
            if spec.kind == "continuous":
                if not _is_number(raw):
                    raise MalformedCsv(
                        f"covariate {spec.name!r} value {raw!r} is not numeric",
                        row=i + 1,
                        column=(13 if has_quadas else 6) + cov_names.index(spec.name),
                    )
                values[spec.name] = float(raw)
            else:
                values[spec.name] = raw
        typed_studies.append(replace(s, covariates=values))

    return Dataset(
        studies=tuple(typed_studies),
        covariate_schema=tuple(schema),
        has_quadas=has_quadas,
        headers=headers,
    )


def serialize_dataset(d: Dataset) -> str:
    """Canonical CSV serialization; parse(serialize(d)) round-trips field-for-field."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    headers: list[str]
    n_fixed = 13 if d.has_quadas else 6
    if d.headers and len(d.headers) == n_fixed + len(d.covariate_schema):
        headers = list(d.headers)
    else:
        headers = ["study", "year", "TP", "FP", "FN", "TN"]
        if d.has_quadas:
            headers += [f"rob_{i+1}" for i in range(4)] + [f"ac_{i+1}" for i in range(3)]
        headers += [spec.name for spec in d.covariate_schema]
    writer.writerow(headers)
    for s in d.studies:
        row: list[str] = [s.study_id, str(s.year), str(s.tp), str(s.fp), str(s.fn), str(s.tn)]
        if d.has_quadas:
            if s.quadas is None:
                raise ValueError(f"study {s.study_id!r} lacks QUADAS ratings")
            row += [r.value for r in s.quadas.ratings()]
        for spec in d.covariate_schema:
            v = s.covariates[spec.name]
            row.append(repr(v) if isinstance(v, float) else str(v))
        writer.writerow(row)
    return out.getvalue()


def dataset_hash(d: Dataset) -> str:
    """SHA-256 of the canonical serialization; identifies dataset content."""
    return hashlib.sha256(serialize_dataset(d).encode("utf-8")).hexdigest()


def validate_dataset(d: Dataset) -> ValidationReport:
    """Collect invariant violations (errors) and analysis hazards (warnings)."""
    errors: list[ValidationIssue] = []
    warnings: list[ValidationIssue] = []
    seen: set[str] = set()
    for i, s in enumerate(d.studies, start=1):
        if s.study_id in seen:
            errors.append(ValidationIssue(i, 0, f"duplicate study id {s.study_id!r}"))
        seen.add(s.study_id)
        for col, name, v in ((2, "tp", s.tp), (3, "fp", s.fp), (4, "fn", s.fn), (5, "tn", s.tn)):
            if v < 0:
                errors.append(ValidationIssue(i, col, f"{name} is negative"))
        if s.total < 1:
            errors.append(ValidationIssue(i, None, "all four counts are zero"))
        else:
            zero_cells = [name for name, v in (("tp", s.tp), ("fp", s.fp), ("fn", s.fn), ("tn", s.tn)) if v == 0]
            if zero_cells:
                warnings.append(
                    ValidationIssue(i, None, f"zero cell(s): {', '.join(zero_cells)}")
                )
        for spec in d.covariate_schema:
            if spec.name not in s.covariates:
                errors.append(ValidationIssue(i, None, f"missing covariate {spec.name!r}"))
            elif spec.kind == "continuous":
                v = s.covariates[spec.name]
                if not isinstance(v, float) or v != v or abs(v) == float("inf"):
                    errors.append(
                        ValidationIssue(i, None, f"covariate {spec.name!r} is not a finite number")
                    )
    for spec in d.covariate_schema:
        if spec.kind != "categorical":
            continue
        counts: dict[str, int] = {}
        for s in d.studies:
            v = str(s.covariates.get(spec.name, ""))
            counts[v] = counts.get(v, 0) + 1
        for level, n in counts.items():
            if n == 1:
                warnings.append(
                    ValidationIssue(
                        None,
                        None,
                        f"covariate {spec.name!r}: single-study level {level!r}",
                    )
                )
    return ValidationReport(errors=tuple(errors), warnings=tuple(warnings))


def study_accuracy(s: StudyRecord, level: float = 0.95) -> StudyAccuracy:
    """Point estimates with exact Clopper-Pearson intervals from beta quantiles."""
    n1 = s.tp + s.fn
    n0 = s.tn + s.fp
    if n1 == 0 or n0 == 0:
        raise EmptyArm(
            f"study {s.study_id!r} has an empty arm (diseased={n1}, non-diseased={n0})"
        )
    alpha = 1.0 - level
    se_hat = s.tp / n1
    sp_hat = s.tn / n0
    se_ci = _clopper_pearson(s.tp, n1, alpha)
    sp_ci = _clopper_pearson(s.tn, n0, alpha)
    return StudyAccuracy(s.study_id, se_hat, sp_hat, se_ci, sp_ci)


def _clopper_pearson(x: int, n: int, alpha: float) -> tuple[float, float]:
    lo = 0.0 if x == 0 else float(_beta_dist.ppf(alpha / 2, x, n - x + 1))
    hi = 1.0 if x == n else float(_beta_dist.ppf(1 - alpha / 2, x + 1, n - x))
    return (lo, hi)


def exclude_studies(d: Dataset, ids) -> Dataset:
    """New Dataset without the listed studies; the original is unchanged."""
    ids = set(ids)
    known = set(d.study_ids())
    unknown = ids - known
    if unknown:
        raise UnknownStudyId(f"unknown study id(s): {sorted(unknown)}")
    return replace(d, studies=tuple(s for s in d.studies if s.study_id not in ids))
