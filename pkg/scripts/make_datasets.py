"""Generate the bundled evaluation datasets (CSV + schema JSON) into data/.

Three deterministic synthetic datasets, shaped after well-known tabular
benchmarks:

  pima            768 rows, 8 continuous medical features, 572/194 labels.
                  Risk rises with glucose, BMI, pedigree, pregnancies, age,
                  and (mildly) with low blood pressure; ~25 rows carry a
                  blood_pressure = 0 entry artifact.
  german_credit   1000 rows, mixed continuous/categorical credit features,
                  700 good / 300 bad. Risk rises with duration and amount;
                  a gender term is amplified for the well-off segment.
  admission       500 rows, graduate-admission style profile features.

Labels are assigned by ranking a noisy ground-truth score and taking the
top-N rows as the positive class, which pins the class balance exactly.
"""

import csv
import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parent.parent / "data"


def _write(name, header, rows, schema):
    OUT.mkdir(exist_ok=True)
    with open(OUT / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    with open(OUT / f"{name}.schema.json", "w") as fh:
        json.dump(schema, fh, indent=2)


def _labels_top(scores, n_pos):
    order = np.argsort(-scores, kind="stable")
    labels = np.zeros(len(scores), dtype=int)
    labels[order[:n_pos]] = 1
    return labels


def make_pima(rng=None):
    rng = rng or np.random.default_rng(20240601)
    n = 768
    age = np.clip(21 + np.floor(rng.exponential(12, n)), 21, 81)
    preg = np.clip(rng.poisson(np.clip(1 + (age - 21) * 0.12, 0.5, 8.0)), 0, 17)
    glucose = np.clip(np.round(rng.normal(112, 28, n)), 44, 199)
    bp = np.clip(np.round(rng.normal(70, 11, n)), 24, 110)
    zero_bp = rng.choice(n, size=25, replace=False)
    bp[zero_bp] = 0
    skin = np.clip(np.round(rng.normal(27, 9, n)), 0, 60)
    insulin = np.clip(np.round(np.exp(rng.normal(4.3, 0.7, n))), 0, 846)
    bmi = np.clip(np.round(rng.normal(32, 6.5, n), 1), 15.1, 65.0)
    dpf = np.clip(np.round(np.exp(rng.normal(-0.75, 0.5, n)), 3), 0.078, 2.42)

    score = (0.040 * (glucose - 115) + 0.085 * (bmi - 32) + 0.9 * (dpf - 0.5)
             + 0.13 * (preg - 3.5) + 0.028 * (age - 33) - 0.016 * (bp - 70)
             + 0.004 * (skin - 27) + 0.0012 * (insulin - 100)
             + rng.normal(0, 1.1, n))
    labels = _labels_top(score, 194)

    header = ["pregnancies", "glucose", "blood_pressure", "skin_thickness",
              "insulin", "bmi", "dpf", "age", "outcome"]
    rows = []
    for i in range(n):
        rows.append([int(preg[i]), int(glucose[i]), int(bp[i]), int(skin[i]),
                     int(insulin[i]), f"{bmi[i]:.1f}", f"{dpf[i]:.3f}",
                     int(age[i]), int(labels[i])])
    schema = {
        "features": [
            {"name": "pregnancies", "kind": "continuous", "min": 0, "max": 17, "precision_unit": 1},
            {"name": "glucose", "kind": "continuous", "min": 40, "max": 200, "precision_unit": 1},
            {"name": "blood_pressure", "kind": "continuous", "min": 0, "max": 122, "precision_unit": 1},
            {"name": "skin_thickness", "kind": "continuous", "min": 0, "max": 99, "precision_unit": 1},
            {"name": "insulin", "kind": "continuous", "min": 0, "max": 846, "precision_unit": 1},
            {"name": "bmi", "kind": "continuous", "min": 15.0, "max": 67.0, "precision_unit": 0.1},
            {"name": "dpf", "kind": "continuous", "min": 0.05, "max": 2.5, "precision_unit": 0.001},
            {"name": "age", "kind": "continuous", "min": 21, "max": 81, "precision_unit": 1},
        ],
        "label": {"name": "outcome", "positive": "1", "negative": "0"},
    }
    _write("pima", header, rows, schema)


def _pick(rng, n, cats, probs):
    return rng.choice(np.array(cats, dtype=object), size=n, p=probs)


def make_german(rng=None):
    rng = rng or np.random.default_rng(20240602)
    n = 1000
    checking = _pick(rng, n, ["none", "low", "medium", "high"], [0.39, 0.28, 0.26, 0.07])
    duration = np.clip(np.round(np.exp(rng.normal(3.0, 0.45, n))), 4, 72)
    history = _pick(rng, n, ["critical", "delayed", "existing_paid", "all_paid"],
                    [0.20, 0.09, 0.58, 0.13])
    purpose = _pick(rng, n, ["car_new", "car_used", "furniture", "radio_tv",
                             "education", "business"],
                    [0.23, 0.10, 0.18, 0.28, 0.06, 0.15])
    amount = np.clip(np.round(np.exp(rng.normal(7.9, 0.75, n))), 250, 20000)
    savings = _pick(rng, n, ["low", "medium", "high", "rich"], [0.56, 0.16, 0.15, 0.13])
    employment = _pick(rng, n, ["unemployed", "short", "medium", "long"],
                       [0.06, 0.25, 0.35, 0.34])
    sex = _pick(rng, n, ["male", "female"], [0.69, 0.31])
    job = _pick(rng, n, ["unskilled", "skilled", "management", "highly_qualified"],
                [0.10, 0.25, 0.50, 0.15])
    housing = _pick(rng, n, ["rent", "own", "free"], [0.18, 0.71, 0.11])
    age = np.clip(np.round(19 + rng.exponential(16, n)), 19, 75)

    eff = lambda arr, table: np.array([table[v] for v in arr])
    score = (
        0.035 * (duration - 21) + 0.00011 * (amount - 3000)
        + eff(checking, {"none": -0.35, "low": 0.55, "medium": 0.2, "high": -0.5})
        + eff(history, {"critical": 0.5, "delayed": 0.25, "existing_paid": -0.15,
                        "all_paid": -0.3})
        + eff(purpose, {"car_new": 0.1, "car_used": -0.2, "furniture": 0.0,
                        "radio_tv": 0.0, "education": 0.2, "business": 0.1})
        + eff(savings, {"low": 0.35, "medium": 0.1, "high": -0.25, "rich": -0.5})
        + eff(employment, {"unemployed": 0.4, "short": 0.15, "medium": -0.05,
                           "long": -0.25})
        + eff(sex, {"male": 0.0, "female": 0.2})
        + eff(job, {"unskilled": 0.35, "skilled": 0.1, "management": -0.15,
                    "highly_qualified": -0.35})
        + eff(housing, {"rent": 0.2, "own": -0.1, "free": 0.1})
        - 0.012 * (age - 35)
        + rng.normal(0, 0.9, n)
    )
    wealthy = (np.isin(job, ["management", "highly_qualified"])
               & np.isin(savings, ["high", "rich"]))
    score = score + 0.55 * (wealthy & (sex == "female"))
    labels = _labels_top(score, 300)

    header = ["checking_status", "duration", "credit_history", "purpose",
              "credit_amount", "savings", "employment", "sex", "job", "housing",
              "age", "risk"]
    rows = []
    for i in range(n):
        rows.append([checking[i], int(duration[i]), history[i], purpose[i],
                     int(amount[i]), savings[i], employment[i], sex[i], job[i],
                     housing[i], int(age[i]), "bad" if labels[i] else "good"])
    schema = {
        "features": [
            {"name": "checking_status", "kind": "categorical",
             "categories": ["none", "low", "medium", "high"]},
            {"name": "duration", "kind": "continuous", "min": 4, "max": 72, "precision_unit": 1},
            {"name": "credit_history", "kind": "categorical",
             "categories": ["critical", "delayed", "existing_paid", "all_paid"]},
            {"name": "purpose", "kind": "categorical",
             "categories": ["car_new", "car_used", "furniture", "radio_tv",
                            "education", "business"]},
            {"name": "credit_amount", "kind": "continuous", "min": 250, "max": 20000,
             "precision_unit": 1},
            {"name": "savings", "kind": "categorical",
             "categories": ["low", "medium", "high", "rich"]},
            {"name": "employment", "kind": "categorical",
             "categories": ["unemployed", "short", "medium", "long"]},
            {"name": "sex", "kind": "categorical", "categories": ["male", "female"]},
            {"name": "job", "kind": "categorical",
             "categories": ["unskilled", "skilled", "management", "highly_qualified"]},
            {"name": "housing", "kind": "categorical", "categories": ["rent", "own", "free"]},
            {"name": "age", "kind": "continuous", "min": 19, "max": 75, "precision_unit": 1},
        ],
        "label": {"name": "risk", "positive": "bad", "negative": "good"},
    }
    _write("german_credit", header, rows, schema)


def make_admission(rng=None):
    rng = rng or np.random.default_rng(20240603)
    n = 500
    gre = np.clip(np.round(rng.normal(316, 11, n)), 290, 340)
    toefl = np.clip(np.round(rng.normal(107, 6, n)), 92, 120)
    rating = np.clip(np.round(rng.normal(3.1, 1.1, n)), 1, 5)
    sop = np.clip(np.round(rng.normal(3.4, 0.9, n) * 2) / 2, 1.0, 5.0)
    lor = np.clip(np.round(rng.normal(3.5, 0.85, n) * 2) / 2, 1.0, 5.0)
    cgpa = np.clip(np.round(8.6 + 0.03 * (gre - 316) + rng.normal(0, 0.45, n), 2),
                   6.8, 9.95)
    research = np.where(rng.random(n) < 0.55, "yes", "no")

    score = (0.055 * (gre - 316) + 0.07 * (toefl - 107) + 0.30 * (rating - 3)
             + 0.22 * (sop - 3.4) + 0.38 * (lor - 3.5) + 1.5 * (cgpa - 8.6)
             + 0.35 * (research == "yes") + rng.normal(0, 0.8, n))
    labels = _labels_top(score, 230)

    header = ["gre", "toefl", "university_rating", "sop", "lor", "cgpa",
              "research", "admit"]
    rows = []
    for i in range(n):
        rows.append([int(gre[i]), int(toefl[i]), int(rating[i]), f"{sop[i]:.1f}",
                     f"{lor[i]:.1f}", f"{cgpa[i]:.2f}", research[i], int(labels[i])])
    schema = {
        "features": [
            {"name": "gre", "kind": "continuous", "min": 290, "max": 340, "precision_unit": 1},
            {"name": "toefl", "kind": "continuous", "min": 92, "max": 120, "precision_unit": 1},
            {"name": "university_rating", "kind": "continuous", "min": 1, "max": 5,
             "precision_unit": 1},
            {"name": "sop", "kind": "continuous", "min": 1.0, "max": 5.0, "precision_unit": 0.5},
            {"name": "lor", "kind": "continuous", "min": 1.0, "max": 5.0, "precision_unit": 0.5},
            {"name": "cgpa", "kind": "continuous", "min": 6.8, "max": 9.95,
             "precision_unit": 0.01},
            {"name": "research", "kind": "categorical", "categories": ["no", "yes"]},
        ],
        "label": {"name": "admit", "positive": "1", "negative": "0"},
    }
    _write("admission", header, rows, schema)


def main():
    make_pima()
    make_german()
    make_admission()
    print(f"datasets written to {OUT}")


if __name__ == "__main__":
    main()
