"""Per-individual preference templates refined by LLM critiques.

An individual's template starts as a catalogue entry chosen from their
demographics and the group utility.  Each step predicts one of their
records, asks an evaluator whether the prediction matched, and when it did
not, rewrites the template using the evaluator's critique as the update
direction.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import yaml

from . import prompts
from .choice import CandidateUtility, choice_probabilities, utility_values
from .data import DatasetSchema, Observation
from .llm import LlmClient, LlmError, StructuredOutputError, extract_structured

logger = logging.getLogger(__name__)

POLICIES = ("accept-if-improved", "accept-always")
RENORMALIZE_BAND = (0.9, 1.1)


# --------------------------------------------------------------------------
# Catalogue and configuration
# --------------------------------------------------------------------------

def _normalize_name(text: str) -> str:
    first = text.strip().splitlines()[0] if text.strip() else ""
    return re.sub(r"[^A-Z0-9_]", "", first.strip().strip("\"'`*.").upper().replace(" ", "_"))


@dataclass(frozen=True)
class TemplateCatalogue:
    """Named preference templates; ``fallback`` is used when selection fails."""

    templates: Mapping[str, str]
    fallback: str = "BALANCED"

    def __post_init__(self):
        if not self.templates:
            raise ValueError("template catalogue is empty")
        if self.fallback not in self.templates:
            raise ValueError(f"fallback template {self.fallback!r} is not in the catalogue")

    def resolve(self, text: str) -> str | None:
        name = _normalize_name(text)
        return name if name in self.templates else None

    @classmethod
    def from_dict(cls, d: Mapping) -> "TemplateCatalogue":
        return cls(dict(d["templates"]), d.get("fallback", "BALANCED"))

    @classmethod
    def load(cls, path) -> "TemplateCatalogue":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))


@dataclass(frozen=True)
class AdaptConfig:
    iterations: int = 3
    policy: str = "accept-if-improved"
    retries: int = 2
    temperature: float = 0.0
    seed: int = 0
    scope: str = "train"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if self.scope not in ("train", "all"):
            raise ValueError("scope must be 'train' or 'all'")

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "AdaptConfig":
        return cls(**(d or {}))


@dataclass
class Revision:
    iteration: int
    text: str
    critique: str = ""
    loss: int | None = None
    accepted: bool = True
    note: str = ""


@dataclass
class Template:
    individual: str
    text: str
    group: str = ""
    utility: Mapping[str, str] = field(default_factory=dict)
    origin: str = ""
    history: list[Revision] = field(default_factory=list)
    transcript: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "individual": self.individual,
            "text": self.text,
            "group": self.group,
            "utility": dict(self.utility),
            "origin": self.origin,
            "history": [asdict(r) for r in self.history],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Template":
        return cls(
            individual=d["individual"],
            text=d["text"],
            group=d.get("group", ""),
            utility=d.get("utility", {}),
            origin=d.get("origin", ""),
            history=[Revision(**r) for r in d.get("history", [])],
        )


@dataclass(frozen=True)
class PromptContext:
    """Task wording and record rendering shared by all adaptation prompts."""

    alternatives: tuple[str, ...]
    schema: DatasetSchema | None = None
    task: prompts.TaskText = prompts.TaskText()

    def profile(self, obs: Observation) -> str:
        return prompts.profile_block(obs, self.schema)

    def options(self, obs: Observation) -> str:
        return prompts.alternatives_block(obs, self.schema, self.alternatives)


def _note(llm: LlmClient, **record) -> None:
    llm.audit.write(event="note", **record)


def demographics_text(obs: Observation) -> str:
    if not obs.demographics:
        return "unknown"
    return ", ".join(f"{k}: {v}" for k, v in obs.demographics.items())


def utility_text(best: CandidateUtility, alternatives: Sequence[str]) -> str:
    return "\n".join(f"{a}: {best.rendered()[a]}" for a in alternatives)


def utility_block(best: CandidateUtility, obs: Observation, alternatives: Sequence[str]) -> str:
    """Each alternative's formula with its fitted value for this record."""
    values = utility_values(best, obs.features, None, alternatives)
    rendered = best.rendered()
    return "\n".join(f"{a}: {rendered[a]} = {v:.4f}" for a, v in zip(alternatives, values))


# --------------------------------------------------------------------------
# Steps
# --------------------------------------------------------------------------

def init_template(
    best: CandidateUtility,
    obs: Observation,
    catalogue: TemplateCatalogue,
    llm: LlmClient,
    *,
    ctx: PromptContext,
    retries: int = 2,
    group: str = "",
) -> Template:
    """Pick the catalogue entry that best fits this individual."""
    req = prompts.selector_request(ctx.task, catalogue.templates, demographics_text(obs), utility_text(best, ctx.alternatives))
    name = None
    for attempt in range(retries + 1):
        r = req if attempt == 0 else prompts.with_retry_note(req, attempt, "name not in the catalogue")
        raw = llm.complete(r).text
        name = catalogue.resolve(raw)
        if name is not None:
            break
        logger.info("individual %s: selector returned %r", obs.individual, raw[:80])
    if name is None:
        name = catalogue.fallback
        _note(llm, individual=obs.individual, purpose="init", note=f"no valid template name; fell back to {name}")
    return Template(
        individual=obs.individual,
        text=catalogue.templates[name],
        group=group,
        utility=best.rendered(),
        origin=name,
        history=[Revision(0, catalogue.templates[name], note=f"init:{name}")],
    )


def _parse_prediction(text: str, alternatives: Sequence[str]) -> np.ndarray:
    obj = extract_structured(text, keys=alternatives)
    try:
        p = np.array([float(obj[a]) for a in alternatives])
    except (TypeError, ValueError) as exc:
        raise StructuredOutputError(f"non-numeric probability: {exc}") from exc
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise StructuredOutputError("probabilities must be finite and non-negative")
    total = p.sum()
    if not RENORMALIZE_BAND[0] <= total <= RENORMALIZE_BAND[1]:
        raise StructuredOutputError(f"probabilities sum to {total:.4f}")
    return p / total


def predict(
    template: Template | str,
    best: CandidateUtility,
    obs: Observation,
    llm: LlmClient,
    *,
    ctx: PromptContext,
    retries: int = 2,
    temperature: float | None = 0.0,
) -> np.ndarray:
    """Probability vector over ``ctx.alternatives`` for one record.

    Falls back to the softmax of the group utility when no usable answer
    arrives within ``retries`` re-asks.
    """
    text = template.text if isinstance(template, Template) else template
    alts = ctx.alternatives
    req = prompts.prediction_request(ctx.task, text, ctx.profile(obs), ctx.options(obs), alts, utility_block(best, obs, alts), temperature)
    problem = ""
    for attempt in range(retries + 1):
        r = req if attempt == 0 else prompts.with_retry_note(req, attempt, problem)
        try:
            return _parse_prediction(llm.complete(r).text, alts)
        except StructuredOutputError as exc:
            problem = str(exc)
        except LlmError as exc:
            problem = f"backend failure: {exc}"
            break
    _note(llm, individual=obs.individual, purpose="predict", note=f"fallback to group utility softmax ({problem})")
    return choice_probabilities(best, obs, None, alts)


_INDICATOR_RE = re.compile(r"^[\s\*\"'`(\[]*(?:loss\s*[:=]\s*)?([01])(?![0-9]|\.[0-9])", re.IGNORECASE)


def parse_indicator(text: str) -> int | None:
    m = _INDICATOR_RE.match(text)
    return int(m.group(1)) if m else None


def compute_loss(
    template: Template | str,
    obs: Observation,
    prediction,
    llm: LlmClient,
    *,
    ctx: PromptContext,
    retries: int = 2,
) -> tuple[int, str]:
    """Match indicator (0 = argmax hit) and critique text from the evaluator."""
    text = template.text if isinstance(template, Template) else template
    pred = {a: round(float(p), 6) for a, p in zip(ctx.alternatives, prediction)}
    req = prompts.loss_request(ctx.task, text, ctx.profile(obs), ctx.options(obs), pred, obs.label)
    raw = ""
    for attempt in range(retries + 1):
        r = req if attempt == 0 else prompts.with_retry_note(req, attempt, "answer must start with 0 or 1")
        raw = llm.complete(r).text
        value = parse_indicator(raw)
        if value is not None:
            return value, raw.strip()
    _note(llm, individual=obs.individual, purpose="loss", note="unparseable indicator; treated as mismatch")
    return 1, raw.strip()


def refine_template(
    template: Template,
    critique: str,
    llm: LlmClient,
    *,
    ctx: PromptContext,
    obs: Observation,
    iteration: int,
    policy: str = "accept-if-improved",
    evaluate: Callable[[str], int] | None = None,
) -> Template:
    """One rewrite step.  Mutates and returns ``template``.

    Under ``accept-if-improved`` the rewrite is kept only when ``evaluate``
    (total loss over the individual's records) does not increase.
    """
    if not critique.strip():
        raise ValueError("critique must be non-empty")
    req = prompts.refine_request(ctx.task, template.text, critique, ctx.profile(obs))
    try:
        new_text = llm.complete(req).text.strip()
    except LlmError as exc:
        template.history.append(Revision(iteration, template.text, critique, 1, False, f"rewrite failed: {exc}"))
        _note(llm, individual=template.individual, purpose="refine", note=f"step {iteration} skipped: {exc}")
        return template
    if not new_text:
        template.history.append(Revision(iteration, template.text, critique, 1, False, "empty rewrite"))
        return template
    if policy == "accept-if-improved" and evaluate is not None:
        old_loss, new_loss = evaluate(template.text), evaluate(new_text)
        accepted = new_loss <= old_loss
        note = f"loss {old_loss} -> {new_loss}"
    else:
        accepted, new_loss, note = True, None, "accepted"
    template.history.append(Revision(iteration, new_text, critique, new_loss, accepted, note))
    _note(llm, individual=template.individual, purpose="refine", note=f"step {iteration} {'accepted' if accepted else 'rejected'} ({note})")
    if accepted:
        template.text = new_text
    return template


def run_adaptation(
    records: Sequence[Observation],
    best: CandidateUtility,
    catalogue: TemplateCatalogue,
    cfg: AdaptConfig,
    llm: LlmClient,
    *,
    ctx: PromptContext,
    group: str = "",
) -> Template:
    """Initialize, then iterate predict / evaluate / rewrite over the records round-robin."""
    if not records:
        raise ValueError("an individual needs at least one record")
    template = init_template(best, records[0], catalogue, llm, ctx=ctx, retries=cfg.retries, group=group)
    memo: dict[tuple[str, int], tuple[np.ndarray, int, str]] = {}

    def step(text: str, j: int) -> tuple[np.ndarray, int, str]:
        key = (text, j)
        if key not in memo:
            p = predict(text, best, records[j], llm, ctx=ctx, retries=cfg.retries, temperature=cfg.temperature)
            loss, critique = compute_loss(text, records[j], p, llm, ctx=ctx, retries=cfg.retries)
            memo[key] = (p, loss, critique)
        return memo[key]

    def total_loss(text: str) -> int:
        return sum(step(text, j)[1] for j in range(len(records)))

    for t in range(1, cfg.iterations + 1):
        j = (t - 1) % len(records)
        p, loss, critique = step(template.text, j)
        entry = {
            "individual": template.individual,
            "step": t,
            "record": records[j].record,
            "prediction": dict(zip(ctx.alternatives, (float(x) for x in p))),
            "label": records[j].label,
            "loss": loss,
            "critique": critique,
        }
        if loss == 0:
            entry["action"] = "none"
        else:
            before = len(template.history)
            refine_template(
                template, critique or "prediction did not match the actual choice", llm,
                ctx=ctx, obs=records[j], iteration=t, policy=cfg.policy,
                evaluate=total_loss if cfg.policy == "accept-if-improved" else None,
            )
            rev = template.history[-1] if len(template.history) > before else None
            entry["action"] = "accepted" if rev is not None and rev.accepted else "rejected"
        entry["text"] = template.text
        template.transcript.append(entry)
    return template


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def write_transcript(template: Template, path) -> None:
    """Line-delimited record of every step, ending with the final template."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for entry in template.transcript:
            fh.write(json.dumps({"kind": "step", **entry}, sort_keys=True) + "\n")
        fh.write(json.dumps({"kind": "final", **template.to_dict()}, sort_keys=True) + "\n")
    tmp.replace(path)


def read_transcript(path) -> Template:
    steps, final = [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "step":
                steps.append(rec)
            else:
                final = rec
    if final is None:
        raise ValueError(f"{path}: transcript has no final record")
    tpl = Template.from_dict(final)
    tpl.transcript = steps
    return tpl


def is_prob_vector(p, n: int) -> bool:
    p = np.asarray(p, dtype=float)
    return p.shape == (n,) and bool(np.all(p >= 0)) and math.isclose(p.sum(), 1.0, abs_tol=1e-9)
