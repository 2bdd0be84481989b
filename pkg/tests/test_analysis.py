import math
import random

import numpy as np
import pytest

from conftest import ALTS, proposal
from symchoice.analysis import (
    FragmentScoreTable, assemble_report, candidate_fragments, fragment_scores, load_report,
    rank_by_heldout, write_report,
)
from symchoice.choice import CandidateUtility, FitConfig, confusion_matrix, evaluate_metrics, fit_candidate, probability_matrix
from symchoice.discovery import DiscoveryConfig, DiscoveryContext, run_discovery
from symchoice.llm import mock_backend

FEATURES = ("age", "trust_government", "trust_science", "income")
UNARY = ("log", "sqrt", "exp")
BINARY = ("+", "-", "*", "/")


def cand(*exprs):
    return CandidateUtility.from_strings(dict(zip(ALTS, exprs)))


# Oracle: random trees as nested tuples, rendered independently of the library.

def random_tree(rng, depth):
    if depth == 0 or rng.random() < 0.25:
        kind = rng.choice(["feat", "feat", "K", "C"])
        return ("feat", rng.choice(FEATURES)) if kind == "feat" else (kind, rng.randint(1, 3))
    if rng.random() < 0.3:
        return ("un", rng.choice(UNARY), random_tree(rng, depth - 1))
    return ("bin", rng.choice(BINARY), random_tree(rng, depth - 1), random_tree(rng, depth - 1))


def source(t):
    if t[0] == "feat":
        return t[1]
    if t[0] in ("K", "C"):
        return f"{t[0]}_{t[1]}"
    if t[0] == "un":
        return f"{t[1]}({source(t[2])})"
    return f"({source(t[2])} {t[1]} {source(t[3])})"


def erased(t):
    if t[0] == "feat":
        return t[1]
    if t[0] in ("K", "C"):
        return t[0]
    if t[0] == "un":
        return f"{t[1]}({erased(t[2])})"
    return f"({erased(t[2])} {t[1]} {erased(t[3])})"


def subtrees(t):
    if t[0] == "un":
        yield t
        yield from subtrees(t[2])
    elif t[0] == "bin":
        yield t
        yield from subtrees(t[2])
        yield from subtrees(t[3])


def brute_force(instance):
    scores = {}
    for g, utilities in instance.items():
        for trees, acc in utilities:
            frags = set()
            for tree in trees:
                for sub in subtrees(tree):
                    frags.add(erased(sub))
            for f in frags:
                scores[f] = scores.get(f, 0.0) + acc
    return scores


class TestFragments:
    def test_single_contributor(self):
        table = fragment_scores({"g": [(cand("log(age)", "K_1*income", "0"), 0.8)]})
        assert table.raw == {"log(age)": 0.8, "(K * income)": 0.8}
        assert table.normalized == {"log(age)": 1.0, "(K * income)": 1.0}

    def test_two_group_hand_sum(self):
        a = cand("log(age)", "0", "0")
        ab = cand("log(age)", "sqrt(income)", "0")
        table = fragment_scores({"g1": [(a, 0.8)], "g2": [(ab, 0.6)]})
        assert table.raw["log(age)"] == pytest.approx(1.4, abs=1e-15)
        assert table.raw["sqrt(income)"] == pytest.approx(0.6, abs=1e-15)
        assert table.normalized["log(age)"] == 1.0
        assert table.normalized["sqrt(income)"] == pytest.approx(0.6 / 1.4, abs=1e-12)
        assert round(table.normalized["sqrt(income)"], 4) == 0.4286

    def test_counted_once_per_candidate(self):
        table = fragment_scores({"g": [(cand("log(age)", "log(age)", "K_1*log(age)"), 0.5)]})
        assert table.raw["log(age)"] == 0.5

    def test_only_top_k(self):
        rows = [(cand(f"log(age) + C_{i + 1}", "0", "0"), 0.5) for i in range(5)]
        assert fragment_scores({"g": rows}, k=3).raw["log(age)"] == 1.5

    def test_empty(self):
        table = fragment_scores({})
        assert len(table) == 0 and table.normalized == {} and table.rows() == []

    def test_accuracy_range(self):
        with pytest.raises(ValueError):
            fragment_scores({"g": [(cand("log(age)", "0", "0"), 1.2)]})

    def test_exemplar_extracted(self):
        u = cand("C_1 + K_1*(sqrt(age)*(trust_government + trust_science))", "C_2 + K_2*income", "0")
        assert "(sqrt(age) * (trust_government + trust_science))" in candidate_fragments(u)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_brute_force(self, seed):
        rng = random.Random(seed)
        instance, per_group = {}, {}
        for g in range(rng.randint(1, 3)):
            utilities = []
            for _ in range(rng.randint(1, 3)):
                trees = [random_tree(rng, rng.randint(1, 4)) for _ in ALTS]
                utilities.append((trees, round(rng.random(), 4)))
            instance[f"g{g}"] = utilities
            per_group[f"g{g}"] = [(cand(*(source(t) for t in trees)), acc) for trees, acc in utilities]
        expected = brute_force(instance)
        table = fragment_scores(per_group)
        assert set(table.raw) == set(expected)
        for f, v in expected.items():
            assert table.raw[f] == pytest.approx(v, rel=1e-12, abs=1e-15)
        if expected:
            top = max(expected.values())
            assert max(table.normalized.values()) == 1.0 or top == 0
        shuffled = dict(reversed(list(per_group.items())))
        assert fragment_scores(shuffled).raw == table.raw

    def test_csv_and_roundtrip(self, tmp_path):
        table = fragment_scores({"g1": [(cand("log(age)", "0", "0"), 0.8)], "g2": [(cand("log(age)", "sqrt(income)", "0"), 0.6)]})
        table.write_csv(tmp_path / "f.csv")
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "fragment,raw,normalized,contributors"
        assert lines[1].startswith("log(age),1.4,1,2")
        back = FragmentScoreTable.from_dict(table.to_dict())
        assert back.raw == table.raw


class TestRanking:
    def test_by_heldout_accuracy(self, travel_data):
        train = travel_data.subset(list(travel_data)[:40])
        good = fit_candidate(cand("K_1*car_time", "K_1*train_time", "K_1*metro_time"), train, FitConfig(starts=2))
        flat = fit_candidate(cand("0", "C_1", "C_2"), train, FitConfig(starts=2))
        ranked = rank_by_heldout([flat, good, good], travel_data, k=3)
        assert len(ranked) == 2
        assert ranked[0][0] is good and ranked[0][1] >= ranked[1][1]

    def test_skips_unfitted(self, travel_data):
        c = cand("0", "C_1", "C_2").with_fit([0, 0], math.inf, None)
        assert rank_by_heldout([c], travel_data) == []


RELATIONS = {"purpose": "sample", "contains": "<FEATURES>", "repeat": True, "response": '```["x"]```'}


@pytest.fixture
def discovery_result(travel_data, travel_library):
    llm = mock_backend([RELATIONS, ("sample", proposal(("K_1*car_time", "K_1*train_time", "K_1*metro_time"), ("0", "C_1", "C_2")))])
    ctx = DiscoveryContext("g", "all travellers", ALTS, travel_library, ("c",))
    return run_discovery(ctx, travel_data, DiscoveryConfig(k=2, max_iter=1, fit=FitConfig(starts=2)), llm)


class TestReport:
    def test_needs_input(self):
        with pytest.raises(ValueError):
            assemble_report()

    def test_discovery_only(self, discovery_result):
        report = assemble_report(discovery={"g": discovery_result})
        assert set(report) == {"groups"}
        assert report["groups"]["g"]["utilities"]["Car"] == "(K_1 * car_time)"

    def test_roundtrip_and_confusion(self, tmp_path, discovery_result, travel_data):
        probs = probability_matrix(discovery_result.best.candidate, travel_data)
        y = travel_data.label_index
        cm = confusion_matrix(probs, y, 3)
        np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(y, minlength=3))
        table = fragment_scores({"g": [(discovery_result.best.candidate, 0.5)]})
        report = assemble_report(
            discovery={"g": discovery_result}, metrics={"overall": evaluate_metrics(probs, y, ALTS)},
            confusion=cm, fragments=table, alternatives=ALTS,
            templates={"p0": {"group": "g", "origin": "BALANCED", "text": "t", "history": [{}]}},
        )
        write_report(report, tmp_path / "r.json")
        assert load_report(tmp_path / "r.json") == report
        assert report["templates"]["p0"]["revisions"] == 0

    def test_non_finite_becomes_null(self):
        report = assemble_report(metrics={"overall": {"accuracy": 0.5, "auc": float("nan")}})
        assert report["metrics"]["overall"]["auc"] is None
