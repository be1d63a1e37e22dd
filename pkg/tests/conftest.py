import numpy as np
import pytest

from dtameta.data import parse_dataset
from dtameta.engine import SamplerConfig

EXAMPLE_CSV = """study,year,TP,FP,FN,TN,test_version,reference
Study01,1991,53,39,5,57,16-item,DSM-IV
Study02,1993,23,13,3,60,16-item,DSM-IV
Study03,1994,54,67,3,97,16-item,DSM-IV
Study04,1995,100,46,16,124,16-item,DSM-IV
Study05,1996,35,25,4,43,16-item,DSM-III-R
Study06,1997,34,17,2,34,16-item,DSM-III-R
Study07,1998,63,42,9,115,16-item,DSM-IV
Study08,1999,28,32,8,65,16-item,DSM-IV
Study09,2000,69,50,10,51,26-item,DSM-III-R
Study10,2001,33,24,8,108,26-item,DSM-III-R
Study11,2002,45,13,4,35,26-item,DSM-IV
Study12,2003,95,48,15,92,26-item,NINCDS-ADRDA
Study13,2004,44,24,2,59,32-item,DSM-III-R+ICD-10
"""


@pytest.fixture(scope="session")
def example_dataset():
    return parse_dataset(EXAMPLE_CSV)


@pytest.fixture(scope="session")
def tiny_config():
    return SamplerConfig(chains=2, warmup=150, samples=150, seed=7)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(2024)


def ladder_gradient_error(model, theta, steps=(1e-6, 1e-5, 1e-4, 1e-3), reg=1e-6):
    """Best-matching central difference over a step ladder, per coordinate.

    Small steps suffer cancellation where the gradient is nearly zero and large
    steps suffer truncation where curvature is extreme; the analytic gradient
    is confirmed when any stable step reproduces it.
    """
    _, grad = model.eval(theta)
    worst = 0.0
    for j in range(model.dim):
        best = np.inf
        for h in steps:
            hi = theta.copy()
            lo = theta.copy()
            hi[j] += h
            lo[j] -= h
            fd = (model.eval(hi)[0] - model.eval(lo)[0]) / (2 * h)
            best = min(best, abs(grad[j] - fd) / (abs(grad[j]) + reg))
        worst = max(worst, best)
    return worst
