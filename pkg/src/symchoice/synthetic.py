"""Synthetic choice data with known generating utilities.

Used by the test suite, the demo scripts and offline CLI runs.  Choices are
drawn by adding Gumbel noise to planted utilities, which reproduces logit
choice probabilities exactly.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .choice import CandidateUtility, utility_matrix
from .data import Dataset, Observation


def _draw(u: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.argmax(u + rng.gumbel(size=u.shape), axis=1)


def planted_clogit(
    n: int = 2000,
    beta: Sequence[float] = (-0.05, -0.10),
    seed: int = 0,
    alternatives: Sequence[str] = ("A", "B", "C"),
    time_range: tuple[float, float] = (10.0, 120.0),
    cost_range: tuple[float, float] = (5.0, 50.0),
) -> tuple[Dataset, CandidateUtility, np.ndarray]:
    """Conditional logit with shared coefficients on ``time_j`` and ``cost_j``.

    Returns the dataset, the generating utility skeleton and its true theta
    (``K_1`` for time, ``K_2`` for cost).
    """
    rng = np.random.default_rng(seed)
    alts = list(alternatives)
    feats = {}
    for a in alts:
        feats[f"time_{a}"] = rng.uniform(*time_range, n)
        feats[f"cost_{a}"] = rng.uniform(*cost_range, n)
    u = CandidateUtility.from_strings({a: f"K_1*time_{a} + K_2*cost_{a}" for a in alts})
    theta = np.asarray(beta, dtype=float)
    obs = [Observation({k: float(v[i]) for k, v in feats.items()}, alts[0], str(i)) for i in range(n)]
    tmp = Dataset(alts, obs)
    y = _draw(utility_matrix(u, tmp, theta), rng)
    obs = [Observation(o.features, alts[j], o.individual) for o, j in zip(obs, y)]
    return Dataset(alts, obs), u, theta


def intercept_only(
    n: int = 3000,
    probs: Sequence[float] = (0.5, 0.3, 0.2),
    seed: int = 0,
    alternatives: Sequence[str] = ("A", "B", "C"),
) -> Dataset:
    rng = np.random.default_rng(seed)
    y = rng.choice(len(alternatives), size=n, p=np.asarray(probs) / np.sum(probs))
    return Dataset(alternatives, [Observation({}, alternatives[j], str(i)) for i, j in enumerate(y)])


# --------------------------------------------------------------------------
# Files in the built-in schema layouts
# --------------------------------------------------------------------------

SWISSMETRO_COLUMNS = (
    "ID", "PURPOSE", "FIRST", "WHO", "LUGGAGE", "AGE", "MALE", "INCOME", "GA",
    "TRAIN_TT", "TRAIN_CO", "TRAIN_HE", "SM_TT", "SM_CO", "SM_HE", "CAR_TT", "CAR_CO", "CHOICE",
)


def write_swissmetro_like(path, n_individuals: int = 60, records: int = 2, seed: int = 0) -> Path:
    """Tab-separated file in the Swissmetro column layout with planted choices.

    Time is in minutes and cost in CHF.  Younger travellers are made more
    time-sensitive so that demographic groups differ.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(1, n_individuals + 1):
        person = {
            "PURPOSE": int(rng.integers(1, 5)),
            "FIRST": int(rng.integers(0, 2)),
            "WHO": int(rng.integers(1, 4)),
            "LUGGAGE": int(rng.integers(0, 3)),
            "AGE": int(rng.integers(1, 5)),
            "MALE": int(rng.integers(0, 2)),
            "INCOME": int(rng.integers(1, 4)),
            "GA": int(rng.random() < 0.15),
        }
        for _ in range(records):
            r = dict(person, ID=i)
            r["TRAIN_TT"] = int(rng.integers(60, 240))
            r["SM_TT"] = int(rng.integers(30, 120))
            r["CAR_TT"] = int(rng.integers(50, 220))
            r["TRAIN_CO"] = 0 if r["GA"] else int(rng.integers(20, 120))
            r["SM_CO"] = int(rng.integers(30, 150))
            r["CAR_CO"] = int(rng.integers(15, 100))
            r["TRAIN_HE"] = int(rng.choice([30, 60, 120]))
            r["SM_HE"] = int(rng.choice([10, 20, 30]))
            k_time = -0.03 if r["AGE"] <= 2 else -0.015
            u = np.array([
                0.2 + k_time * r["TRAIN_TT"] - 0.02 * r["TRAIN_CO"] - 0.005 * r["TRAIN_HE"],
                0.5 + k_time * r["SM_TT"] - 0.02 * r["SM_CO"] - 0.005 * r["SM_HE"],
                k_time * r["CAR_TT"] - 0.02 * r["CAR_CO"],
            ])
            r["CHOICE"] = int(np.argmax(u + rng.gumbel(size=3))) + 1
            rows.append(r)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWISSMETRO_COLUMNS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


VACCINE_COLUMNS = (
    "respondent_id", "covid_threat", "trust_government", "trust_science", "age", "gender",
    "risk_of_covid_greater_than_vax", "have_covid_sick_family_member", "vaccine_safe_to_me",
    "more_attention_to_vax_info", "less_attention_to_vax_info", "vax_protect_long_yes",
    "nurse", "physician", "income_below_median", "income_unknown", "have_university_degree",
    "vaccine_status",
)


def write_vaccine_like(path, n: int = 80, seed: int = 0) -> Path:
    """Comma-separated file in the vaccine-survey layout with planted choices."""
    rng = np.random.default_rng(seed)
    alts = ("Unvaccinated", "Vaccinated_no_booster", "Booster")
    rows = []
    for i in range(1, n + 1):
        r = {
            "respondent_id": i,
            "covid_threat": int(rng.integers(1, 6)),
            "trust_government": int(rng.integers(1, 6)),
            "trust_science": int(rng.integers(1, 6)),
            "age": int(rng.integers(18, 80)),
            "gender": int(rng.integers(0, 2)),
            "risk_of_covid_greater_than_vax": int(rng.integers(0, 2)),
            "have_covid_sick_family_member": int(rng.integers(0, 2)),
            "vaccine_safe_to_me": int(rng.integers(1, 6)),
            "more_attention_to_vax_info": int(rng.integers(0, 2)),
            "less_attention_to_vax_info": int(rng.integers(0, 2)),
            "vax_protect_long_yes": int(rng.integers(0, 2)),
            "nurse": int(rng.random() < 0.05),
            "physician": int(rng.random() < 0.03),
            "income_below_median": int(rng.integers(0, 2)),
            "income_unknown": int(rng.random() < 0.1),
            "have_university_degree": int(rng.integers(0, 2)),
        }
        trust = r["trust_government"] * r["trust_science"] / 25.0
        u = np.array([
            1.0 - 0.3 * r["covid_threat"] - 1.5 * trust,
            0.3 * r["vaccine_safe_to_me"] + trust,
            0.02 * r["age"] + 0.2 * r["covid_threat"] + 0.8 * r["vax_protect_long_yes"] - 1.0,
        ])
        r["vaccine_status"] = alts[int(np.argmax(u + rng.gumbel(size=3)))]
        rows.append(r)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=VACCINE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


# --------------------------------------------------------------------------
# Offline backend scripts
# --------------------------------------------------------------------------

SWISSMETRO_PROPOSALS = (
    ("K_1*car_time + K_2*car_cost", "C_1 + K_1*train_time + K_2*train_cost", "C_2 + K_1*metro_time + K_2*metro_cost"),
    ("K_1*car_time", "C_1 + K_1*train_time", "C_2 + K_1*metro_time"),
    ("K_1*log(car_time) + K_2*car_cost", "C_1 + K_1*log(train_time) + K_2*train_cost", "C_2 + K_1*log(metro_time) + K_2*metro_cost"),
)
VACCINE_PROPOSALS = (
    ("C_1*covid_threat", "C_2 + K_1*vaccine_safe_to_me", "C_3 + K_2*age"),
    ("C_1 + K_1*trust_government*trust_science", "C_2 + K_2*vaccine_safe_to_me", "C_3 + K_3*sqrt(age)"),
)


def _proposal_text(groups) -> str:
    body = ", ".join("(" + ", ".join(f'"{e}"' for e in g) + ")" for g in groups)
    return f"```[{body}]```"


def offline_script(task: str, alternatives: Sequence[str]) -> list[dict]:
    """Repeatable scripted responses covering every purpose for ``task``.

    Proposals follow the schema's proposal order.  Every entry repeats, so
    the script serves any number of groups, iterations and individuals.
    """
    proposals = SWISSMETRO_PROPOSALS if task == "swissmetro" else VACCINE_PROPOSALS
    uniform = {a: round(1.0 / len(alternatives), 6) for a in alternatives}
    return [
        {"purpose": "sample", "contains": "<FEATURES>", "repeat": True,
         "response": '```["time and cost lower utility", "intercepts capture mode preference"]```'},
        {"purpose": "sample", "repeat": True, "response": _proposal_text(proposals)},
        {"purpose": "analyze", "repeat": True, "response": "Good groups share linear time and cost terms."},
        {"purpose": "crossover", "repeat": True, "response": _proposal_text(proposals[:1])},
        {"purpose": "mutate", "repeat": True, "response": _proposal_text(proposals[-1:])},
        {"purpose": "init", "repeat": True, "response": "BALANCED"},
        {"purpose": "loss", "repeat": True, "response": "1. The prediction was too uncertain."},
        {"purpose": "refine", "repeat": True, "response": "Weigh the options evenly but lean toward the fastest one."},
        {"purpose": "predict", "repeat": True, "response": uniform},
    ]


def write_offline_script(path, task: str, alternatives: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(offline_script(task, alternatives), fh, sort_keys=False)
    return path
