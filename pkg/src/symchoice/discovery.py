"""Group-level search over symbolic utilities proposed by an LLM.

Each iteration samples fresh candidate groups (one expression per
alternative), adds crossover children and mutants of the previous round's
best candidates, fits every candidate by maximum likelihood and keeps the
whole archive.  The search stops when the round-best loss changes by less
than ``delta`` or after ``max_iter`` rounds; the winner is the archive-wide
minimum.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import yaml

from . import prompts
from .choice import CandidateUtility, FitConfig, fit_candidate
from .data import Dataset
from .expr import ExpressionError, SymbolicLibrary, parse_expressions, validate
from .llm import LlmClient, LlmError, LlmRequest, StructuredOutputError, extract_structured

logger = logging.getLogger(__name__)


class DiscoveryError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Libraries and configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConceptLibrary:
    """Domain knowledge statements per task."""

    concepts: Mapping[str, tuple[str, ...]]

    def for_task(self, task: str) -> tuple[str, ...]:
        items = self.concepts.get(task, ())
        if not items:
            raise KeyError(f"concept library has no entries for task {task!r}")
        return items

    @classmethod
    def load(cls, path) -> "ConceptLibrary":
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        return cls({k: tuple(v) for k, v in raw.items()})


def load_operator_library(path, features) -> SymbolicLibrary:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return SymbolicLibrary.for_features(features, raw.get("unary", ()), raw.get("binary", ()))


@dataclass(frozen=True)
class DiscoveryConfig:
    k: int = 8
    max_iter: int = 30
    delta: float = 1e-3
    crossover: int = 4
    mutants: int = 4
    hypotheses: int = 3
    retry_budget: int = 3
    seed: int = 0
    workers: int = 1
    fit: FitConfig = FitConfig()

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2 so best and worst candidates differ")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "DiscoveryConfig":
        d = dict(d or {})
        fit = FitConfig.from_dict(d.pop("fit", None))
        return cls(fit=fit, **d)


@dataclass(frozen=True)
class DiscoveryContext:
    """Everything the proposer is conditioned on for one group."""

    group: str
    description: str
    order: tuple[str, ...]
    library: SymbolicLibrary
    concepts: tuple[str, ...]
    task: prompts.TaskText = prompts.TaskText()

    @property
    def variables(self) -> list[str]:
        return sorted(self.library.features)


# --------------------------------------------------------------------------
# Records
# --------------------------------------------------------------------------

@dataclass
class Skip:
    purpose: str
    reason: str
    raw: str
    iteration: int = 0


@dataclass
class Scored:
    """A fitted candidate in the archive."""

    candidate: CandidateUtility
    iteration: int
    index: int
    origin: str = "sample"

    @property
    def loss(self) -> float:
        return self.candidate.nll

    @property
    def accuracy(self) -> float:
        return self.candidate.accuracy or 0.0


@dataclass
class Feedback:
    iteration: int
    best: Scored | None = None
    worst: Scored | None = None
    note: str = ""

    @property
    def best_loss(self) -> float:
        return self.best.loss if self.best is not None else math.inf

    @property
    def worst_loss(self) -> float:
        return self.worst.loss if self.worst is not None else math.inf

    def text(self, order: Sequence[str]) -> str:
        if self.best is None:
            return self.note
        return prompts.feedback_text(
            order, self.best.candidate.rendered(), self.best.loss,
            self.worst.candidate.rendered(), self.worst.loss,
        )


@dataclass
class DiscoveryResult:
    group: str
    description: str
    archive: list[Scored]
    feedback: list[Feedback]
    best: Scored
    iterations: int
    converged_at: int | None
    iteration_best: list[float]
    running_best: list[float]
    iteration_best_accuracy: list[float]
    mean_accuracy: list[float]
    skips: list[Skip] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "description": self.description,
            "best": _scored_to_dict(self.best),
            "iterations": self.iterations,
            "converged_at": self.converged_at,
            "trajectory": {
                "iteration_best_loss": [_num(x) for x in self.iteration_best],
                "running_best_loss": [_num(x) for x in self.running_best],
                "iteration_best_accuracy": [_num(x) for x in self.iteration_best_accuracy],
                "mean_accuracy": [_num(x) for x in self.mean_accuracy],
            },
            "feedback": [
                {
                    "iteration": fb.iteration,
                    "best": fb.best.candidate.rendered() if fb.best else None,
                    "best_loss": _num(fb.best_loss),
                    "worst": fb.worst.candidate.rendered() if fb.worst else None,
                    "worst_loss": _num(fb.worst_loss),
                    "note": fb.note,
                }
                for fb in self.feedback
            ],
            "archive": [_scored_to_dict(s) for s in self.archive],
            "skips": [vars(s) for s in self.skips],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DiscoveryResult":
        archive = [_scored_from_dict(s) for s in d["archive"]]
        traj = d["trajectory"]
        return cls(
            group=d["group"],
            description=d["description"],
            archive=archive,
            feedback=[],
            best=_scored_from_dict(d["best"]),
            iterations=d["iterations"],
            converged_at=d["converged_at"],
            iteration_best=[_inf(x) for x in traj["iteration_best_loss"]],
            running_best=[_inf(x) for x in traj["running_best_loss"]],
            iteration_best_accuracy=[_inf(x) for x in traj["iteration_best_accuracy"]],
            mean_accuracy=[_inf(x) for x in traj["mean_accuracy"]],
            skips=[Skip(**s) for s in d.get("skips", [])],
        )

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DiscoveryResult":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _num(x):
    return float(x) if x is not None and math.isfinite(x) else None


def _inf(x):
    return math.inf if x is None else float(x)


def _scored_to_dict(s: Scored) -> dict:
    c = s.candidate
    theta = c.theta_dict() if c.theta is not None and c.param_names else {}
    return {
        "utilities": c.rendered(),
        "theta": {k: _num(v) for k, v in theta.items()},
        "nll": _num(c.nll),
        "accuracy": _num(c.accuracy) if c.accuracy is not None else None,
        "iteration": s.iteration,
        "index": s.index,
        "origin": s.origin,
    }


def _scored_from_dict(d: Mapping) -> Scored:
    cand = CandidateUtility.from_strings(d["utilities"])
    names = cand.param_names
    theta = np.array([_inf(d["theta"].get(n)) if d["theta"].get(n) is not None else np.nan for n in names])
    nll = _inf(d["nll"])
    return Scored(cand.with_fit(theta, nll, d.get("accuracy")), d["iteration"], d["index"], d.get("origin", "sample"))


# --------------------------------------------------------------------------
# Proposal parsing
# --------------------------------------------------------------------------

def parse_proposals(text: str, order: Sequence[str], library: SymbolicLibrary, purpose: str = "sample") -> tuple[list[CandidateUtility], list[Skip]]:
    """Turn a ``[("expr_a", "expr_b", ...), ...]`` response into validated candidates."""
    try:
        groups = extract_structured(text, arity=len(order))
    except StructuredOutputError as exc:
        return [], [Skip(purpose, f"no expression list: {exc}", text)]
    out, skips = [], []
    for group in groups:
        raw = repr(group)
        if not all(isinstance(g, str) for g in group):
            skips.append(Skip(purpose, "non-string expression", raw))
            continue
        try:
            exprs = parse_expressions(list(group))
        except (ExpressionError, ValueError) as exc:
            skips.append(Skip(purpose, f"parse error: {exc}", raw))
            continue
        problems = [v for e in exprs for v in validate(e, library)]
        if problems:
            skips.append(Skip(purpose, "outside library: " + ", ".join(dict.fromkeys(problems)), raw))
            continue
        out.append(CandidateUtility(dict(zip(order, exprs))))
    return out, skips


def _collect(
    make_request: Callable[[int], LlmRequest],
    want: int,
    ctx: DiscoveryContext,
    llm: LlmClient,
    retry_budget: int,
    skips: list[Skip],
) -> list[CandidateUtility]:
    """Ask for ``want`` groups, re-prompting for the shortfall up to ``retry_budget`` times."""
    found: list[CandidateUtility] = []
    seen: set[str] = set()
    attempt = 0
    while len(found) < want:
        req = make_request(want - len(found))
        if attempt:
            req = prompts.with_retry_note(req, attempt, f"{want - len(found)} valid groups still missing")
        text = llm.complete(req).text
        cands, bad = parse_proposals(text, ctx.order, ctx.library, req.purpose)
        for s in bad:
            logger.info("skipping %s proposal (%s): %s", req.purpose, s.reason, s.raw[:120])
        skips.extend(bad)
        for c in cands:
            if len(found) < want and c.key() not in seen:
                seen.add(c.key())
                found.append(c)
        if len(found) >= want or attempt >= retry_budget:
            break
        attempt += 1
    return found


# --------------------------------------------------------------------------
# Loop steps
# --------------------------------------------------------------------------

def sample_candidates(
    ctx: DiscoveryContext,
    feedback: Feedback | None,
    k: int,
    llm: LlmClient,
    *,
    retry_budget: int = 3,
    skips: list[Skip] | None = None,
) -> list[CandidateUtility]:
    """Two-step proposal: relation suggestions, then ``k`` expression groups."""
    if k < 1:
        raise ValueError("k must be positive")
    skips = skips if skips is not None else []
    rel_text = llm.complete(prompts.relations_request(ctx.task, ctx.description, ctx.variables, ctx.concepts)).text
    try:
        relations = extract_structured(rel_text)
        suggestions = "; ".join(map(str, relations)) if isinstance(relations, list) else rel_text
    except StructuredOutputError:
        suggestions = rel_text.strip()
    fb_text = feedback.text(ctx.order) if feedback is not None else None
    ops = ctx.library.describe_operators()

    def make(n):
        return prompts.proposal_request(ctx.task, ctx.description, ctx.variables, ops, ctx.order, n, suggestions, fb_text)

    found = _collect(make, k, ctx, llm, retry_budget, skips)
    if not found:
        raise DiscoveryError(f"group {ctx.group}: no valid candidate after {retry_budget} retries")
    return found


def build_feedback(scored: Sequence[Scored], t: int) -> Feedback:
    """Best (lowest loss) and worst (highest loss) candidates of one round.

    Ties go to the earlier candidate for the best and the later one for the
    worst.  Fit failures (infinite loss) are ignored; if nothing is finite the
    feedback only carries a note.
    """
    finite = [(i, s) for i, s in enumerate(scored) if math.isfinite(s.loss)]
    if not finite:
        return Feedback(t, note=f"iteration {t}: every candidate failed to fit")
    best = min(finite, key=lambda p: (p[1].loss, p[0]))[1]
    worst = max(finite, key=lambda p: (p[1].loss, p[0]))[1]
    return Feedback(t, best, worst)


def check_convergence(best_t: float, best_prev: float, delta: float) -> bool:
    return abs(best_t - best_prev) < delta


def evolve(
    scored: Sequence[Scored],
    ctx: DiscoveryContext,
    cfg: DiscoveryConfig,
    llm: LlmClient,
    *,
    skips: list[Skip] | None = None,
) -> list[tuple[CandidateUtility, str]]:
    """Analysis, then crossover of the two best and mutation of the best.

    Returns ``(candidate, origin)`` pairs.  Backend failures yield an empty
    list so the caller proceeds with fresh samples only.
    """
    skips = skips if skips is not None else []
    ranked = sorted(
        (s for s in scored if math.isfinite(s.loss)),
        key=lambda s: (s.loss, s.iteration, s.index),
    )
    if not ranked:
        return []
    ops = ctx.library.describe_operators()
    good = ranked[:2]
    bad = ranked[-1:] if len(ranked) > 2 else []
    children: list[tuple[CandidateUtility, str]] = []
    try:
        analysis = llm.complete(
            prompts.analysis_request(
                ctx.task, ctx.description, ctx.order,
                [(s.candidate.rendered(), s.accuracy) for s in good],
                [(s.candidate.rendered(), s.accuracy) for s in bad],
                cfg.hypotheses,
            )
        ).text.strip()
        if len(good) >= 2 and cfg.crossover > 0:
            parents = [s.candidate.rendered() for s in good]

            def make_cross(n):
                return prompts.crossover_request(ctx.order, ctx.variables, ops, parents, n, analysis)

            children += [(c, "crossover") for c in _collect(make_cross, cfg.crossover, ctx, llm, cfg.retry_budget, skips)]
        if cfg.mutants > 0:
            parent = good[0].candidate.rendered()

            def make_mut(m):
                return prompts.mutation_request(ctx.order, ctx.variables, ops, parent, m, analysis)

            children += [(c, "mutate") for c in _collect(make_mut, cfg.mutants, ctx, llm, cfg.retry_budget, skips)]
    except LlmError as exc:
        logger.warning("group %s: evolution step failed (%s); continuing with fresh samples", ctx.group, exc)
        skips.append(Skip("evolve", f"backend failure: {exc}", ""))
        return children
    return children


def _fit_all(cands: Sequence[CandidateUtility], data: Dataset, cfg: DiscoveryConfig, cache: dict[str, CandidateUtility]) -> list[CandidateUtility]:
    todo = []
    for c in cands:
        if c.key() not in cache and c.key() not in {t.key() for t in todo}:
            todo.append(c)
    if cfg.workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            fitted = list(pool.map(lambda c: fit_candidate(c, data, cfg.fit), todo))
    else:
        fitted = [fit_candidate(c, data, cfg.fit) for c in todo]
    for c, f in zip(todo, fitted):
        cache[c.key()] = f
    return [cache[c.key()] for c in cands]


def run_discovery(
    ctx: DiscoveryContext,
    data: Dataset,
    cfg: DiscoveryConfig,
    llm: LlmClient,
) -> DiscoveryResult:
    """Iterate sample -> evolve -> fit -> feedback until the round-best loss plateaus."""
    if len(data) == 0:
        raise DiscoveryError(f"group {ctx.group}: empty dataset")
    if tuple(sorted(ctx.order)) != tuple(sorted(data.alternatives)):
        raise DiscoveryError("proposal order does not match the dataset's alternatives")

    archive: list[Scored] = []
    trail: list[Feedback] = []
    skips: list[Skip] = []
    fit_cache: dict[str, CandidateUtility] = {}
    feedback: Feedback | None = None
    prev_pool: list[Scored] = []
    iter_best, running, best_acc, mean_acc = [], [], [], []
    prev_best = math.inf
    converged_at = None
    t = 0

    for t in range(1, cfg.max_iter + 1):
        n_skips = len(skips)
        try:
            fresh = sample_candidates(ctx, feedback, cfg.k, llm, retry_budget=cfg.retry_budget, skips=skips)
        except DiscoveryError:
            if t == 1:
                raise
            fresh = []
        except LlmError as exc:
            if t == 1:
                raise DiscoveryError(f"group {ctx.group}: proposer failed: {exc}") from exc
            logger.warning("group %s iteration %d: sampling failed (%s)", ctx.group, t, exc)
            fresh = []
        pool: list[tuple[CandidateUtility, str]] = [(c, "sample") for c in fresh]
        if t > 1 and prev_pool:
            pool += evolve(prev_pool, ctx, cfg, llm, skips=skips)
        for s in skips[n_skips:]:
            s.iteration = t

        fitted = _fit_all([c for c, _ in pool], data, cfg, fit_cache)
        scored = [Scored(f, t, i, origin) for i, (f, (_, origin)) in enumerate(zip(fitted, pool))]
        archive.extend(scored)

        fb = build_feedback(scored, t)
        trail.append(fb)
        if fb.best is not None:
            feedback = fb
        best_t = fb.best_loss
        iter_best.append(best_t)
        running.append(min(running[-1], best_t) if running else best_t)
        accs = [s.accuracy for s in scored if math.isfinite(s.loss)]
        best_acc.append(fb.best.accuracy if fb.best is not None else math.nan)
        mean_acc.append(float(np.mean(accs)) if accs else math.nan)
        logger.info("group %s iteration %d: %d candidates, best loss %.4f", ctx.group, t, len(scored), best_t)

        if t > 1 and math.isfinite(best_t) and math.isfinite(prev_best) and check_convergence(best_t, prev_best, cfg.delta):
            converged_at = t
            break
        prev_best = best_t
        prev_pool = [s for s in scored if math.isfinite(s.loss)] or prev_pool

    finite = [s for s in archive if math.isfinite(s.loss)]
    if not finite:
        raise DiscoveryError(f"group {ctx.group}: every candidate failed to fit")
    best = min(finite, key=lambda s: (s.loss, s.iteration, s.index))
    return DiscoveryResult(
        group=ctx.group,
        description=ctx.description,
        archive=archive,
        feedback=trail,
        best=best,
        iterations=t,
        converged_at=converged_at,
        iteration_best=iter_best,
        running_best=running,
        iteration_best_accuracy=best_acc,
        mean_accuracy=mean_acc,
        skips=skips,
    )
