import math

import numpy as np
import pytest

from symchoice.baselines import baseline_table, classical_baselines, optimize_instruction, prompt_baseline, shared_attributes
from symchoice.choice import FitConfig
from symchoice.data import DatasetSchema, builtin_schema_path, load_dataset, split
from symchoice.llm import mock_backend
from symchoice.synthetic import write_swissmetro_like, write_vaccine_like

FAST = FitConfig(starts=2)


@pytest.fixture(scope="module")
def swiss(tmp_path_factory):
    schema = DatasetSchema.load(builtin_schema_path("swissmetro"))
    data = load_dataset(write_swissmetro_like(tmp_path_factory.mktemp("s") / "s.tsv", 150, 2), schema)
    return schema, *split(data, 0.8, seed=0)


@pytest.fixture(scope="module")
def vaccine(tmp_path_factory):
    schema = DatasetSchema.load(builtin_schema_path("vaccine"))
    data = load_dataset(write_vaccine_like(tmp_path_factory.mktemp("v") / "v.csv", 200), schema)
    return schema, *split(data, 0.8, seed=0)


def test_shared_attributes_swissmetro(swiss):
    attrs = shared_attributes(swiss[0])
    assert set(attrs) == {"Train", "Swissmetro", "Car"}
    assert len({len(v) for v in attrs.values()}) == 1


def test_classical_beats_uniform(swiss):
    schema, train, test = swiss
    rows = {r.name: r for r in classical_baselines(train, test, schema, cfg=FAST)}
    assert set(rows) == {"MNL", "CLogit"}
    assert rows["CLogit"].metrics.cross_entropy < math.log(3)
    assert rows["CLogit"].model is not None and not rows["CLogit"].note


def test_clogit_uniform_without_shared_attributes(vaccine):
    schema, train, test = vaccine
    rows = {r.name: r for r in classical_baselines(train, test, schema, cfg=FAST)}
    if shared_attributes(schema) is None:
        assert rows["CLogit"].metrics.cross_entropy == pytest.approx(math.log(3), abs=1e-12)
        assert "uniform" in rows["CLogit"].note
    # unregularized MNL can overfit 160 rows out of sample; in-sample it must beat uniform
    assert rows["MNL"].model.nll / len(train) < math.log(3)


def test_prompt_baseline_parses_and_counts_failures(swiss):
    _, _, test = swiss
    sub = test.subset(list(test)[:3])
    llm = mock_backend([
        ("predict", {"Train": 1, "Swissmetro": 0, "Car": 0}),
        {"purpose": "predict", "repeat": True, "response": "unsure"},
    ])
    res = prompt_baseline(sub, llm, retries=0)
    assert res.name == "zero-shot" and "2 unusable" in res.note
    assert res.metrics.n == 3


def test_few_shot_includes_examples(swiss):
    _, train, test = swiss
    sub = test.subset(list(test)[:1])
    llm = mock_backend([("predict", {"Train": 0.2, "Swissmetro": 0.5, "Car": 0.3})])
    prompt_baseline(sub, llm, mode="few-shot", train=train, shots=2)
    assert llm.provider.calls[0].user.count("<CHOICE>") == 3


def test_unknown_mode(swiss):
    with pytest.raises(ValueError):
        prompt_baseline(swiss[2], mock_backend([("predict", "x")]), mode="oracle")


def test_optimize_instruction(swiss):
    _, train, _ = swiss
    llm = mock_backend([
        {"purpose": "predict", "repeat": True, "response": {"Train": 0.2, "Swissmetro": 0.5, "Car": 0.3}},
        {"purpose": "loss", "repeat": True, "response": "1. wrong"},
        ("refine", "first"), ("refine", "second"),
    ])
    assert optimize_instruction(train, llm, steps=2) == "second"


def test_table(swiss):
    schema, train, test = swiss
    table = baseline_table(classical_baselines(train, test, schema, cfg=FAST))
    assert set(table["MNL"]) >= {"accuracy", "f1", "cross_entropy", "auc"}
    assert all(np.isfinite(v) for v in table["MNL"].values() if isinstance(v, float))
