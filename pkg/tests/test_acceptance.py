"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (with wall time against its budget); the
lines are printed in the terminal summary by ``conftest.py``.
"""

import math
import random
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy.special import logsumexp

from conftest import ALTS, proposal
from symchoice.adaptation import AdaptConfig, PromptContext, TemplateCatalogue, run_adaptation
from symchoice.analysis import candidate_fragments, fragment_scores
from symchoice.choice import (
    CandidateUtility, FitConfig, choice_probabilities, evaluate_metrics, fit_candidate, group_nll,
    nll_gradient, softmax,
)
from symchoice.data import Dataset, DatasetSchema, Observation, builtin_schema_path
from symchoice.discovery import DiscoveryConfig, DiscoveryContext, run_discovery
from symchoice.expr import (
    Binary, Feature, Num, Param, SymbolicLibrary, Unary, parse_expression, render_expression, validate,
)
from symchoice.llm import mock_backend
from symchoice.synthetic import intercept_only, planted_clogit

RESULTS: dict[int, str] = {}


@contextmanager
def criterion(number, title, budget):
    start = time.perf_counter()
    status = "FAIL"
    try:
        yield
        elapsed = time.perf_counter() - start
        assert elapsed < budget, f"took {elapsed:.2f}s, budget {budget}s"
        status = "PASS"
    finally:
        elapsed = time.perf_counter() - start
        line = f"criterion {number} [{status}] {title} ({elapsed:.2f}s / {budget}s)"
        RESULTS[number] = line
        print(line)


def test_criterion_1_softmax_and_nll():
    with criterion(1, "softmax normalization, shift invariance, uniform CE = ln 3", 1.0):
        rng = np.random.default_rng(0)
        for _ in range(200):
            u = rng.normal(scale=rng.choice([1, 10, 300]), size=rng.integers(2, 8))
            p = softmax(u)
            assert abs(p.sum() - 1) <= 1e-12
            assert np.max(np.abs(softmax(u + rng.normal(scale=100)) - p)) <= 1e-12
        y = rng.integers(0, 3, size=500)
        ce = evaluate_metrics(np.full((500, 3), 1 / 3), y).cross_entropy
        assert abs(ce - 1.0986) < 1e-4 and abs(ce - math.log(3)) <= 1e-6


def test_criterion_2_planted_recovery():
    with criterion(2, "planted CLogit recovery within 10%, NLL at most generator NLL", 30.0):
        data, u, beta = planted_clogit(n=2000, seed=0)
        fitted = fit_candidate(u, data)
        theta = fitted.theta_dict()
        for name, true in zip(("K_1", "K_2"), beta):
            assert abs(theta[name] - true) <= 0.1 * abs(true), (name, theta[name], true)
        assert fitted.nll <= group_nll(u, data, beta) + 1e-6 * len(data)


def test_criterion_3_intercept_only():
    with criterion(3, "intercept-only MLE matches empirical frequencies", 10.0):
        data = intercept_only(n=3000, seed=1)
        u = CandidateUtility.from_strings({"A": "0", "B": "C_1", "C": "C_2"})
        fitted = fit_candidate(u, data)
        p = choice_probabilities(fitted, {}, fitted.theta, data.alternatives)
        freq = data.class_counts() / len(data)
        assert np.max(np.abs(p - freq)) <= 1e-3, (p, freq)


def _analytic_gradient(x, z, y, theta):
    # u_nj = c_j + K_1 x_nj + K_2 z_nj with c_0 = 0; theta = (C_1, C_2, K_1, K_2)
    c = np.array([0.0, theta[0], theta[1]])
    u = c + theta[2] * x + theta[3] * z
    p = np.exp(u - logsumexp(u, axis=1, keepdims=True))
    onehot = np.eye(3)[y]
    resid = p - onehot
    return np.array([resid[:, 1].sum(), resid[:, 2].sum(), (resid * x).sum(), (resid * z).sum()])


def test_criterion_4_gradient_check():
    with criterion(4, "finite-difference NLL gradient vs analytic gradient", 10.0):
        alts = ("A", "B", "C")
        u = CandidateUtility.from_strings({"A": "K_1*x_A + K_2*z_A", "B": "C_1 + K_1*x_B + K_2*z_B", "C": "C_2 + K_1*x_C + K_2*z_C"})
        assert list(u.param_names) == ["C_1", "C_2", "K_1", "K_2"]
        rng = np.random.default_rng(4)
        for _ in range(20):
            n = int(rng.integers(20, 80))
            x, z = rng.normal(size=(n, 3)), rng.uniform(0, 3, size=(n, 3))
            y = rng.integers(0, 3, size=n)
            obs = [
                Observation({**{f"x_{a}": float(x[i, j]) for j, a in enumerate(alts)}, **{f"z_{a}": float(z[i, j]) for j, a in enumerate(alts)}}, alts[y[i]], str(i))
                for i in range(n)
            ]
            theta = rng.normal(size=4)
            fd = nll_gradient(u, Dataset(alts, obs), theta)
            exact = _analytic_gradient(x, z, y, theta)
            assert np.linalg.norm(fd - exact) <= 1e-5 * max(np.linalg.norm(exact), 1e-12)


BEST = ("K_1*car_time", "K_2*train_time", "K_3*metro_time")
LINEAR = ("K_1*car_time", "K_1*train_time", "K_1*metro_time")
LOG = ("K_1*log(car_time)", "K_1*log(train_time)", "K_1*log(metro_time)")
AGE = ("K_1*age", "K_2*age", "C_1")
FLAT = ("0", "C_1", "C_2")


def test_criterion_5_discovery_semantics(travel_data, travel_library):
    with criterion(5, "archive-min selection, plateau stop, non-increasing running best", 5.0):
        llm = mock_backend([
            {"purpose": "sample", "contains": "<FEATURES>", "repeat": True, "response": '```["time lowers utility"]```'},
            ("sample", proposal(BEST, FLAT)),
            ("sample", proposal(LINEAR, AGE)),
            ("sample", proposal(LINEAR, LOG)),
            ("sample", proposal(LOG, AGE)),
            {"purpose": "analyze", "repeat": True, "response": "x"},
            {"purpose": "crossover", "repeat": True, "response": proposal(FLAT)},
            {"purpose": "mutate", "repeat": True, "response": proposal(AGE)},
        ])
        ctx = DiscoveryContext("g", "travellers", ALTS, travel_library, ("Time matters.",))
        cfg = DiscoveryConfig(k=2, max_iter=30, delta=1e-3, crossover=1, mutants=1, fit=FitConfig(starts=2))
        res = run_discovery(ctx, travel_data, cfg, llm)
        assert res.best.iteration == 1
        assert res.best.candidate.key() == CandidateUtility.from_strings(dict(zip(ALTS, BEST))).key()
        assert res.best.loss == min(s.loss for s in res.archive)
        # iteration bests: BEST, LINEAR, LINEAR; the plateau is iteration 3
        assert res.converged_at == 3 and res.iterations == 3 and len(res.running_best) == 3
        assert abs(res.iteration_best[2] - res.iteration_best[1]) < cfg.delta
        assert abs(res.iteration_best[1] - res.iteration_best[0]) >= cfg.delta
        assert all(b <= a for a, b in zip(res.running_best, res.running_best[1:]))


def test_criterion_6_fragment_oracle():
    from test_analysis import brute_force, random_tree, source

    with criterion(6, "fragment scores equal brute force on 50 instances; exemplar extracted", 5.0):
        for seed in range(50):
            rng = random.Random(1000 + seed)
            instance, per_group = {}, {}
            for g in range(rng.randint(1, 3)):
                utilities = [([random_tree(rng, rng.randint(1, 4)) for _ in ALTS], rng.random()) for _ in range(rng.randint(1, 3))]
                instance[g] = utilities
                per_group[str(g)] = [(CandidateUtility.from_strings(dict(zip(ALTS, (source(t) for t in trees)))), acc) for trees, acc in utilities]
            expected = brute_force(instance)
            raw = fragment_scores(per_group).raw
            assert set(raw) == set(expected)
            assert all(math.isclose(raw[f], v, rel_tol=1e-12, abs_tol=1e-15) for f, v in expected.items())
        containing = CandidateUtility.from_strings({
            "Unvaccinated": "C_1 + K_1*covid_threat",
            "Vaccinated_no_booster": "C_2 + K_2*(sqrt(age)*(trust_government + trust_science))",
            "Booster": "K_3*vaccine_safe_to_me",
        })
        assert "(sqrt(age) * (trust_government + trust_science))" in candidate_fragments(containing)


MARKED = ("init", "refine", "predict", "loss")
REFINED = "REFINED: prefer whichever option is fastest."


def _adapt_loss(req):
    if "marker: 1\n" in req.user + "\n" or "marker: 4\n" in req.user + "\n":
        return "0"
    if "marker: 2\n" in req.user + "\n" and REFINED in req.user:
        return "0"
    return "1. The traveller values time more than the template suggests."


def _adapt_predict(req):
    if "marker: 4\n" in req.user + "\n":
        return "I would rather not give numbers."
    return 'Thinking it through.\n```json\n{"Car": 0.2, "Train": 0.3, "Swissmetro": 0.5}\n```'


def test_criterion_7_adaptation_contract():
    with criterion(7, "adaptation: zero-loss fixpoint, bounded history, JSON extraction, fallback", 5.0):
        rng = np.random.default_rng(0)
        people = {
            f"p{m}": [Observation({"car_time": float(rng.uniform(20, 90)), "train_time": float(rng.uniform(20, 90)),
                                   "metro_time": float(rng.uniform(10, 60)), "marker": float(m)}, ALTS[r % 3], f"p{m}", {}, r)
                      for r in range(2)]
            for m in (1, 2, 3, 4)
        }
        best = CandidateUtility.from_strings({"Car": "K_1*car_time", "Train": "K_1*train_time", "Swissmetro": "K_1*metro_time"})
        best = best.with_fit([-0.05], 50.0, 0.5)
        catalogue = TemplateCatalogue.load(builtin_schema_path("swissmetro").with_name("swissmetro_templates.yaml"))
        llm = mock_backend([
            {"purpose": "init", "repeat": True, "response": "BALANCED"},
            {"purpose": "predict", "repeat": True, "response": _adapt_predict},
            {"purpose": "loss", "repeat": True, "response": _adapt_loss},
            {"purpose": "refine", "repeat": True, "response": REFINED},
        ])
        ctx = PromptContext(ALTS)
        cfg = AdaptConfig(iterations=3)
        out = {i: run_adaptation(recs, best, catalogue, cfg, llm, ctx=ctx, group="g") for i, recs in people.items()}
        initial = catalogue.templates["BALANCED"]

        assert out["p1"].text == initial and all(e["action"] == "none" for e in out["p1"].transcript)
        refine_calls = [c for c in llm.provider.calls_for("refine")]
        assert not any("marker: 1\n" in c.user + "\n" for c in refine_calls)
        assert out["p2"].text == REFINED
        assert [e["loss"] for e in out["p2"].transcript] == [1, 0, 0]
        assert sum("marker: 2\n" in c.user + "\n" for c in refine_calls) == 1
        for tpl in out.values():
            assert len(tpl.history) <= cfg.iterations + 1
            its = [r.iteration for r in tpl.history]
            assert its == sorted(set(its))
        for e in out["p1"].transcript:
            assert e["prediction"] == {"Car": 0.2, "Train": 0.3, "Swissmetro": 0.5}
        for e, rec in zip(out["p4"].transcript, [0, 1, 0]):
            expected = choice_probabilities(best, people["p4"][rec], None, ALTS)
            assert np.array_equal(np.array([e["prediction"][a] for a in ALTS]), expected)


def test_criterion_8_determinism_and_cache(tmp_path):
    from test_cli import run, setup_run, tree

    with criterion(8, "run-all cold then warm cache gives byte-identical trees", 120.0):
        cfg, script = setup_run(tmp_path, baselines={"prompt": ["zero-shot"]})
        cache = str(tmp_path / "cache")
        assert run(cfg, script, "run-all", extra=["--cache-dir", cache, "--output", str(tmp_path / "cold")]) == 0
        assert run(cfg, script, "run-all", extra=["--cache-dir", cache, "--output", str(tmp_path / "warm")]) == 0
        cold, warm = tree(tmp_path / "cold"), tree(tmp_path / "warm")
        assert cold and cold == warm


SWISSMETRO_FORMULAS = [
    "K_1*(train_time + metro_time + luggage*log(age + C_1) + age + is_male) + C_2*(first_class + income) - C_3*(GA_pass + headway)",
    "K_1*(car_time + train_time + luggage*log(age + C_1) + age) + C_2*(first_class + income) - C_3*(GA_pass + metro_fare + is_male)",
    "K_1*(metro_time + luggage + age + is_male) + C_2*(first_class + income) - C_3*(headway + GA_pass + is_male)",
    "K_1*(purpose + |payer_type*C_1| - first_class + |luggage|*sqrt(|age + C_2|) + |train_time + C_3| + log(income + C_4)) - C_5",
    "K_1*(|car_time + C_1| + |car_time - train_time + C_2| - |car_cost + train_cost + C_3| + |headway|*sqrt(income + C_4)) + C_5",
    "K_1*(|metro_time + C_1| + |metro_cost + C_2| + sqrt(|age + C_3|) + log(exp(income + C_4) + C_5)) - C_6",
]
VACCINE_FORMULAS = [
    "C_1*covid_threat*(C_2 + trust_government*trust_science*log(age + C_3))*risk_of_covid_greater_than_vax + K_1*have_covid_sick_family_member*log(age + C_4)",
    "C_1*covid_threat + C_2*vaccine_safe_to_me + K_1*(trust_government*trust_science*more_attention_to_vax_info*sqrt(age + C_3))",
    "C_1*exp(age^C_2)*covid_threat*sqrt(vax_protect_long_yes) + C_3*vaccine_safe_to_me + K_1*(trust_government*trust_science*nurse*sqrt(age + C_4))",
    "K_1*sqrt(covid_threat*(risk_of_covid_greater_than_vax + sqrt(age)*gender + C_1))*((trust_government*trust_science)^2 + C_2)"
    " + K_2*more_attention_to_vax_info - K_3*(income_below_median*have_university_degree*(trust_government*trust_science)) + C_3",
    "K_1*(vaccine_safe_to_me + trust_government*trust_science*sqrt(sqrt(age + C_1) + income_unknown + C_2))"
    " + K_2*more_attention_to_vax_info/(less_attention_to_vax_info + C_3) + C_4",
    "K_1*(have_covid_sick_family_member + physician*(trust_government*trust_science)*(sqrt(age + C_1) + C_2)"
    " + nurse*(trust_science*sqrt(age + C_3))) + C_4",
]

OPS_U = ("neg", "abs", "sqrt", "log", "exp")
OPS_B = ("+", "-", "*", "/", "^")


def _random_ast(rng, depth):
    if depth == 0 or rng.random() < 0.3:
        r = rng.random()
        if r < 0.4:
            return Feature(rng.choice(("age", "income", "car_time")))
        if r < 0.8:
            return Param(rng.choice("CK"), rng.randint(1, 5))
        return Num(float(rng.choice([0.5, 1, 2, 3.25, 10])))
    if rng.random() < 0.3:
        return Unary(rng.choice(OPS_U), _random_ast(rng, depth - 1))
    return Binary(rng.choice(OPS_B), _random_ast(rng, depth - 1), _random_ast(rng, depth - 1))


def _roundtrips(e):
    text = render_expression(e)
    again = parse_expression(text)
    return again == e and render_expression(again) == text


def test_criterion_9_parse_render_roundtrip():
    with criterion(9, "parse/render roundtrip on 1000 random ASTs and published utility formulas", 5.0):
        rng = random.Random(9)
        for _ in range(1000):
            assert _roundtrips(_random_ast(rng, rng.randint(0, 6)))
        for task, formulas in (("swissmetro", SWISSMETRO_FORMULAS), ("vaccine", VACCINE_FORMULAS)):
            lib = SymbolicLibrary.for_features(DatasetSchema.load(builtin_schema_path(task)).feature_names)
            for f in formulas:
                e = parse_expression(f)
                assert validate(e, lib) == [], (task, f)
                assert _roundtrips(e), f
