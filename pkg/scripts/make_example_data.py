"""Regenerate the bundled synthetic example datasets.

The 13-study layout mirrors a typical dementia screening meta-analysis
(8/4/1 studies across three questionnaire lengths, four reference
standards) but every count except Study01's is sampled from the bivariate
model; the data are synthetic and carry no real study identities.
"""
from pathlib import Path

import numpy as np
from scipy.special import expit

ROOT = Path(__file__).resolve().parents[1]

TEST_VERSIONS = ["16-item"] * 8 + ["26-item"] * 4 + ["32-item"]
REFERENCES = (
    ["DSM-IV"] * 4
    + ["DSM-III-R"] * 2
    + ["DSM-IV"] * 2
    + ["DSM-III-R"] * 2
    + ["DSM-IV", "NINCDS-ADRDA", "DSM-III-R+ICD-10"]
)
QUADAS = [
    "low,low,low,low,low,low,low",
    "low,unclear,low,high,low,low,unclear",
    "low,low,unclear,low,low,unclear,low",
    "high,low,low,unclear,high,low,low",
    "low,low,low,low,unclear,low,low",
    "unclear,low,high,low,low,low,low",
    "low,high,low,low,low,unclear,low",
    "low,low,low,unclear,low,low,high",
    "unclear,unclear,low,low,low,low,low",
    "low,low,low,low,high,low,unclear",
    "low,low,unclear,high,low,low,low",
    "high,low,low,low,unclear,high,low",
    "low,unclear,low,low,low,low,low",
]


def main() -> None:
    rng = np.random.default_rng(20230413)
    mu = (np.log(0.91 / 0.09), np.log(0.66 / 0.34))
    sigma = (0.55, 0.6)
    rho = -0.35
    rows = [("Study01", 1991, 53, 39, 5, 57)]
    for i in range(1, 13):
        z1, z2 = rng.standard_normal(2)
        a = mu[0] + sigma[0] * z1
        b = mu[1] + sigma[1] * (rho * z1 + np.sqrt(1 - rho**2) * z2)
        n1 = int(rng.integers(25, 140))
        n0 = int(rng.integers(35, 190))
        tp = int(rng.binomial(n1, expit(a)))
        tn = int(rng.binomial(n0, expit(b)))
        rows.append((f"Study{i+1:02d}", int(1992 + i), tp, n0 - tn, n1 - tp, tn))

    plain = ["study,year,TP,FP,FN,TN,test_version,reference"]
    quadas = [
        "study,year,TP,FP,FN,TN,"
        "rob_patient_selection,rob_index_test,rob_reference_standard,rob_flow_timing,"
        "ac_patient_selection,ac_index_test,ac_reference_standard,test_version,reference"
    ]
    for row, version, ref, q in zip(rows, TEST_VERSIONS, REFERENCES, QUADAS):
        base = ",".join(str(v) for v in row)
        plain.append(f"{base},{version},{ref}")
        quadas.append(f"{base},{q},{version},{ref}")

    data_dir = ROOT / "data"
    data_dir.mkdir(exist_ok=True)
    (data_dir / "example_dementia.csv").write_text("\n".join(plain) + "\n")
    (data_dir / "example_dementia_quadas.csv").write_text("\n".join(quadas) + "\n")
    print(f"wrote {data_dir}/example_dementia.csv and example_dementia_quadas.csv")


if __name__ == "__main__":
    main()
