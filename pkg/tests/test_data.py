import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from dtameta.data import (
    BadCount,
    BadRating,
    DuplicateStudyId,
    EmptyArm,
    MalformedCsv,
    Rating,
    SidecarConfig,
    StudyRecord,
    UnknownStudyId,
    dataset_hash,
    exclude_studies,
    parse_dataset,
    serialize_dataset,
    study_accuracy,
    validate_dataset,
)

from conftest import EXAMPLE_CSV


def test_parse_six_columns():
    d = parse_dataset("study,year,TP,FP,FN,TN\nS1,1991,53,39,5,57\n")
    assert len(d.studies) == 1
    s = d.studies[0]
    assert (s.tp, s.fp, s.fn, s.tn) == (53, 39, 5, 57)
    assert s.year == 1991 and s.study_id == "S1"
    assert not d.has_quadas and d.covariate_schema == ()


def test_parse_thirteen_columns_is_quadas():
    header = "study,year,TP,FP,FN,TN,r1,r2,r3,r4,a1,a2,a3"
    row = "S1,1991,53,39,5,57,low,low,unclear,high,low,low,low"
    d = parse_dataset(f"{header}\n{row}\n")
    assert d.has_quadas
    q = d.studies[0].quadas
    assert q.risk_of_bias == (Rating.LOW, Rating.LOW, Rating.UNCLEAR, Rating.HIGH)
    assert q.applicability == (Rating.LOW, Rating.LOW, Rating.LOW)
    assert len(q.ratings()) == 7


def test_parse_ratings_case_insensitive_and_numeric():
    header = "study,year,TP,FP,FN,TN,r1,r2,r3,r4,a1,a2,a3"
    row = "S1,1991,5,5,5,5,LOW,High,UNCLEAR,1,2,3,Low"
    d = parse_dataset(f"{header}\n{row}\n")
    q = d.studies[0].quadas
    assert q.risk_of_bias == (Rating.LOW, Rating.HIGH, Rating.UNCLEAR, Rating.LOW)
    assert q.applicability == (Rating.HIGH, Rating.UNCLEAR, Rating.LOW)


def test_parse_covariate_layouts():
    d = parse_dataset(EXAMPLE_CSV)
    assert len(d.studies) == 13
    assert [c.name for c in d.covariate_schema] == ["test_version", "reference"]
    assert d.covariate_kind("test_version") == "categorical"
    # 6 + 7 quadas + covariates
    header = (
        "study,year,TP,FP,FN,TN,r1,r2,r3,r4,a1,a2,a3,age"
    )
    row = "S1,1991,5,5,5,5,low,low,low,low,low,low,low,62.5"
    d2 = parse_dataset(f"{header}\n{row}\n")
    assert d2.has_quadas and d2.covariate_kind("age") == "continuous"
    assert d2.studies[0].covariates["age"] == 62.5


def test_sidecar_overrides():
    csv_text = "study,year,TP,FP,FN,TN,yeargrp\nS1,1991,5,5,5,5,1995\nS2,1992,5,5,5,5,2005\n"
    inferred = parse_dataset(csv_text)
    assert inferred.covariate_kind("yeargrp") == "continuous"
    forced = parse_dataset(
        csv_text, SidecarConfig.from_dict({"covariates": {"yeargrp": "categorical"}})
    )
    assert forced.covariate_kind("yeargrp") == "categorical"
    assert forced.studies[0].covariates["yeargrp"] == "1995"


def test_sidecar_quadas_off_reads_13_columns_as_covariates():
    header = "study,year,TP,FP,FN,TN,c1,c2,c3,c4,c5,c6,c7"
    row = "S1,1991,5,5,5,5,a,b,c,d,e,f,g"
    d = parse_dataset(f"{header}\n{row}\n", SidecarConfig(quadas=False))
    assert not d.has_quadas
    assert len(d.covariate_schema) == 7


def test_parse_errors():
    with pytest.raises(BadCount) as e:
        parse_dataset("study,year,TP,FP,FN,TN\nS1,1991,-1,39,5,57\n")
    assert e.value.row == 1 and e.value.column == 2
    with pytest.raises(BadCount):
        parse_dataset("study,year,TP,FP,FN,TN\nS1,1991,1.5,39,5,57\n")
    with pytest.raises(BadRating):
        parse_dataset(
            "s,y,TP,FP,FN,TN,r1,r2,r3,r4,a1,a2,a3\nS1,1991,5,5,5,5,low,low,bad,low,low,low,low\n"
        )
    with pytest.raises(DuplicateStudyId):
        parse_dataset("study,year,TP,FP,FN,TN\nS1,1991,5,5,5,5\nS1,1992,1,1,1,1\n")
    with pytest.raises(MalformedCsv):
        parse_dataset("study,year,TP\nS1,1991,5\n")
    with pytest.raises(MalformedCsv):
        parse_dataset("study,year,TP,FP,FN,TN\nS1,1991,5,5,5\n")
    with pytest.raises(MalformedCsv):
        parse_dataset("")


def test_parse_crlf_and_quotes():
    d = parse_dataset('study,year,TP,FP,FN,TN\r\n"Jorm, 1991",1991,53,39,5,57\r\n')
    assert d.studies[0].study_id == "Jorm, 1991"


def test_roundtrip_parse_serialize_parse(example_dataset):
    text = serialize_dataset(example_dataset)
    again = parse_dataset(text)
    assert again == example_dataset
    assert dataset_hash(again) == dataset_hash(example_dataset)


def test_roundtrip_with_quadas():
    header = "study,year,TP,FP,FN,TN,r1,r2,r3,r4,a1,a2,a3,age"
    row = "S1,1991,5,6,7,8,low,high,unclear,low,low,low,high,62.5"
    d = parse_dataset(f"{header}\n{row}\n")
    assert parse_dataset(serialize_dataset(d)) == d


def test_validate_clean(example_dataset):
    report = validate_dataset(example_dataset)
    assert report.ok
    # the 32-item level appears in exactly one study
    assert any("single-study level" in w.message for w in report.warnings)


def test_validate_zero_cells_warning():
    d = parse_dataset("study,year,TP,FP,FN,TN\nS1,1991,10,0,5,57\nS2,1992,9,9,9,9\n")
    report = validate_dataset(d)
    assert report.ok
    assert any("zero cell" in w.message for w in report.warnings)


def test_validate_duplicate_ids_directly():
    s = StudyRecord("A", "A", 1990, 1, 1, 1, 1)
    from dtameta.data import Dataset

    report = validate_dataset(Dataset(studies=(s, s)))
    assert not report.ok
    assert any("duplicate" in e.message for e in report.errors)


# --- study_accuracy ---------------------------------------------------------

def _clopper_pearson_oracle(x, n, level=0.95):
    """Invert the exact binomial tails by bisection (independent of beta.ppf)."""
    alpha = 1 - level

    def solve(f, lo, hi):
        for _ in range(200):
            mid = (lo + hi) / 2
            if f(mid) > 0:
                hi = mid
            else:
                lo = mid
        return (lo + hi) / 2

    lower = 0.0 if x == 0 else solve(lambda p: binom.sf(x - 1, n, p) - alpha / 2, 0.0, 1.0)
    upper = 1.0 if x == n else solve(lambda p: alpha / 2 - binom.cdf(x, n, p), 0.0, 1.0)
    return lower, upper


def test_study_accuracy_matches_binomial_tail_oracle():
    s = StudyRecord("S", "S", 1990, tp=5, fp=7, fn=5, tn=3)
    acc = study_accuracy(s)
    assert acc.se_hat == 0.5
    lo, hi = _clopper_pearson_oracle(5, 10)
    assert acc.se_ci == pytest.approx((lo, hi), abs=1e-9)
    # frozen from the oracle: Clopper-Pearson for 5/10
    assert acc.se_ci == pytest.approx((0.187086, 0.812914), abs=5e-7)
    lo_sp, hi_sp = _clopper_pearson_oracle(3, 10)
    assert acc.sp_ci == pytest.approx((lo_sp, hi_sp), abs=1e-9)


def test_study_accuracy_boundaries():
    acc = study_accuracy(StudyRecord("S", "S", 1990, tp=10, fp=3, fn=0, tn=5))
    assert acc.se_hat == 1.0 and acc.se_ci[1] == 1.0 and acc.se_ci[0] > 0
    acc2 = study_accuracy(StudyRecord("S", "S", 1990, tp=0, fp=3, fn=10, tn=5))
    assert acc2.se_hat == 0.0 and acc2.se_ci[0] == 0.0 and acc2.se_ci[1] < 1


def test_study_accuracy_empty_arm():
    with pytest.raises(EmptyArm):
        study_accuracy(StudyRecord("S", "S", 1990, tp=0, fp=3, fn=0, tn=5))


@given(
    tp=st.integers(1, 60), fn=st.integers(1, 60),
    tn=st.integers(1, 60), fp=st.integers(1, 60),
    scale=st.integers(2, 5),
)
@settings(max_examples=40, deadline=None)
def test_interval_contains_point_and_shrinks(tp, fn, tn, fp, scale):
    s = StudyRecord("S", "S", 1990, tp, fp, fn, tn)
    acc = study_accuracy(s)
    assert acc.se_ci[0] <= acc.se_hat <= acc.se_ci[1]
    assert acc.sp_ci[0] <= acc.sp_hat <= acc.sp_ci[1]
    bigger = study_accuracy(
        StudyRecord("S", "S", 1990, tp * scale, fp * scale, fn * scale, tn * scale)
    )
    assert (bigger.se_ci[1] - bigger.se_ci[0]) < (acc.se_ci[1] - acc.se_ci[0])
    assert (bigger.sp_ci[1] - bigger.sp_ci[0]) < (acc.sp_ci[1] - acc.sp_ci[0])


# --- exclude_studies --------------------------------------------------------

def test_exclude_basic(example_dataset):
    out = exclude_studies(example_dataset, {"Study01"})
    assert len(out.studies) == 12
    assert len(example_dataset.studies) == 13  # original untouched
    assert exclude_studies(example_dataset, set()) == example_dataset
    with pytest.raises(UnknownStudyId):
        exclude_studies(example_dataset, {"nope"})


@given(st.sets(st.sampled_from([f"Study{i:02d}" for i in range(1, 14)]), max_size=6))
@settings(max_examples=30, deadline=None)
def test_exclude_composition(example_dataset, ids):
    ids = set(ids)
    half = set(list(ids)[: len(ids) // 2])
    rest = ids - half
    joint = exclude_studies(example_dataset, ids)
    staged = exclude_studies(exclude_studies(example_dataset, half), rest)
    assert joint == staged
