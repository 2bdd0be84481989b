"""Reference models evaluated on the same split as the main pipeline.

Classical rows are linear logit models fitted by maximum likelihood.  The
prompt-only rows ask the backend for a distribution directly, with no
symbolic utility behind it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import prompts
from .adaptation import _parse_prediction
from .choice import CandidateUtility, FitConfig, Metrics, evaluate_metrics, fit_mnl_baseline, probability_matrix
from .data import Dataset, DatasetSchema
from .llm import LlmClient, LlmError, StructuredOutputError

logger = logging.getLogger(__name__)


@dataclass
class BaselineResult:
    name: str
    metrics: Metrics
    model: CandidateUtility | None = None
    note: str = ""


def shared_attributes(schema: DatasetSchema) -> dict[str, list[str]] | None:
    """Per-alternative attribute lists restricted to labels every alternative has."""
    attrs = schema.alternative_attributes
    if not attrs or set(attrs) != set(schema.alternatives):
        return None
    common = [label for label in attrs[schema.alternatives[0]] if all(label in attrs[a] for a in schema.alternatives)]
    if not common:
        return None
    return {a: [attrs[a][label] for label in common] for a in schema.alternatives}


def classical_baselines(
    train: Dataset,
    test: Dataset,
    schema: DatasetSchema,
    *,
    individual_features: Sequence[str] | None = None,
    cfg: FitConfig = FitConfig(),
) -> list[BaselineResult]:
    """MNL on individual attributes and conditional logit on alternative attributes."""
    feats = list(individual_features if individual_features is not None else schema.profile_features)
    y = test.label_index
    out = []
    mnl = fit_mnl_baseline(train, individual_features=feats, cfg=cfg)
    out.append(BaselineResult("MNL", evaluate_metrics(probability_matrix(mnl, test), y, test.alternatives), mnl))
    alt_feats = shared_attributes(schema)
    if alt_feats is None:
        out.append(BaselineResult("CLogit", evaluate_metrics(np.full((len(test), len(test.alternatives)), 1 / len(test.alternatives)), y), None,
                                  "schema has no shared alternative attributes; uniform predictor reported"))
    else:
        cl = fit_mnl_baseline(train, alternative_features=alt_feats, cfg=cfg)
        out.append(BaselineResult("CLogit", evaluate_metrics(probability_matrix(cl, test), y, test.alternatives), cl))
    return out


def _ask(llm: LlmClient, req, alternatives, retries: int) -> np.ndarray | None:
    problem = ""
    for attempt in range(retries + 1):
        r = req if attempt == 0 else prompts.with_retry_note(req, attempt, problem)
        try:
            return _parse_prediction(llm.complete(r).text, alternatives)
        except StructuredOutputError as exc:
            problem = str(exc)
        except LlmError:
            return None
    return None


def prompt_baseline(
    test: Dataset,
    llm: LlmClient,
    *,
    mode: str = "zero-shot",
    train: Dataset | None = None,
    shots: int = 3,
    instruction: str | None = None,
    retries: int = 2,
) -> BaselineResult:
    """Prompt-only predictor; unusable answers count as a uniform distribution."""
    schema = test.schema
    task = prompts.TaskText.from_schema_task(schema.task if schema else None)
    alts = test.alternatives
    examples = []
    if mode == "few-shot":
        if train is None or len(train) == 0:
            raise ValueError("few-shot needs training records")
        step = max(1, len(train) // shots)
        for o in list(train)[::step][:shots]:
            examples.append((prompts.profile_block(o, schema), prompts.alternatives_block(o, schema, alts), o.label))
    probs, failures = [], 0
    for o in test:
        prof, opts = prompts.profile_block(o, schema), prompts.alternatives_block(o, schema, alts)
        if mode == "few-shot":
            req = prompts.few_shot_request(task, alts, examples, prof, opts)
        elif mode in ("zero-shot", "cot", "instruction"):
            req = prompts.zero_shot_request(task, alts, prof, opts, chain_of_thought=mode == "cot", instruction=instruction)
        else:
            raise ValueError(f"unknown prompt baseline {mode!r}")
        p = _ask(llm, req, alts, retries)
        if p is None:
            failures += 1
            p = np.full(len(alts), 1 / len(alts))
        probs.append(p)
    note = f"{failures} unusable answers replaced by uniform" if failures else ""
    return BaselineResult(mode, evaluate_metrics(np.array(probs), test.label_index, alts), None, note)


def optimize_instruction(
    train: Dataset,
    llm: LlmClient,
    *,
    steps: int = 3,
    start: str = "Weigh every attribute of the options against the profile.",
    retries: int = 2,
) -> str:
    """Refine one shared instruction from graded predictions on training records."""
    schema = train.schema
    task = prompts.TaskText.from_schema_task(schema.task if schema else None)
    alts = train.alternatives
    instruction = start
    records = list(train)
    for t in range(min(steps, len(records))):
        o = records[t]
        prof, opts = prompts.profile_block(o, schema), prompts.alternatives_block(o, schema, alts)
        p = _ask(llm, prompts.zero_shot_request(task, alts, prof, opts, instruction=instruction), alts, retries)
        if p is None:
            continue
        pred = {a: round(float(v), 6) for a, v in zip(alts, p)}
        try:
            critique = llm.complete(prompts.grading_request(task, instruction, prof, opts, pred, o.label)).text
            new = llm.complete(prompts.refine_request(task, instruction, critique, prof)).text.strip()
        except LlmError as exc:
            logger.warning("instruction step %d skipped: %s", t, exc)
            continue
        if new:
            instruction = new
    return instruction


def baseline_table(results: Sequence[BaselineResult]) -> dict[str, Mapping]:
    return {r.name: {**r.metrics.as_dict(), **({"note": r.note} if r.note else {})} for r in results}
