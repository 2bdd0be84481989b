"""Prompt builders for every LLM interaction in the pipeline.

Each builder returns an :class:`~symchoice.llm.LlmRequest`.  Task wording
(the decision being modelled, the expert persona) comes from a
:class:`TaskText`, so the same protocols serve travel, vaccine and custom
schemas.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

from .llm import LlmRequest


@dataclass(frozen=True)
class TaskText:
    decision: str = "choice"
    expert: str = "a behavioural analyst"
    subject: str = "individual"

    @classmethod
    def from_schema_task(cls, task: Mapping | None) -> "TaskText":
        task = task or {}
        return cls(
            decision=task.get("decision", cls.decision),
            expert=task.get("expert", cls.expert),
            subject=task.get("subject", cls.subject),
        )


def _tuple_format(order: Sequence[str]) -> str:
    inner = ",".join(f'"expression_{a}"' for a in order)
    return f"[({inner}), ...]"


def _triplet(order: Sequence[str], exprs: Mapping[str, str]) -> str:
    return ", ".join(f"{a}: {exprs[a]}" for a in order)


def relations_request(task: TaskText, description: str, features: Sequence[str], knowledge: Sequence[str]) -> LlmRequest:
    system = (
        f"You are {task.expert}. You receive the features available for each "
        f"{task.subject} between <FEATURES> tags and background knowledge about the "
        f"{task.decision} between <KNOWLEDGE> tags. Describe, in detailed sentences, how "
        "the features relate to one another and to the decision, including the functional "
        "shape you expect (for example: time: quadratic, cost: log, luggage: linear). "
        "Do not invent new features or modify the given ones."
    )
    user = (
        f"<GROUP DESCRIPTION>{description}</GROUP DESCRIPTION>\n"
        f"<FEATURES>{', '.join(features)}</FEATURES>\n"
        f"<KNOWLEDGE>{' '.join(knowledge)}</KNOWLEDGE>\n\n"
        "Only describe relations between the features. Return them in exactly this format: "
        '```["relation_0","relation_1", ...]```'
    )
    return LlmRequest(system, user, "sample")


def proposal_request(
    task: TaskText,
    description: str,
    variables: Sequence[str],
    operators: str,
    order: Sequence[str],
    n: int,
    suggestions: str,
    feedback: str | None = None,
) -> LlmRequest:
    system = (
        "You propose mathematical utility expressions from the suggestions you are given.\n"
        f"0. Task: utility functions for the {task.decision} of the group: {description}.\n"
        f"1. Use only these variables: {', '.join(variables)}\n"
        '2. Write every constant as "C" and every coefficient as "K" (indexed forms such as C_1, K_2 are allowed; '
        "reuse an index to share a parameter across alternatives).\n"
        f"3. Use only these operators: {operators}\n"
        f"4. Each group contains one utility for each of: {', '.join(order)}, in that order.\n\n"
        f"Propose exactly {n} groups of expressions and return them in exactly this format: "
        f"```{_tuple_format(order)}```"
    )
    user = f"Suggestions: {suggestions}"
    if feedback:
        user += f"\n\nFeedback from the previous round:\n{feedback}"
    return LlmRequest(system, user, "sample")


def feedback_text(order: Sequence[str], best: Mapping[str, str], best_loss: float, worst: Mapping[str, str], worst_loss: float) -> str:
    return (
        f"Best group (loss {best_loss:.4f}): ({_triplet(order, best)})\n"
        f"Worst group (loss {worst_loss:.4f}): ({_triplet(order, worst)})"
    )


def analysis_request(
    task: TaskText,
    description: str,
    order: Sequence[str],
    good: Sequence[tuple[Mapping[str, str], float]],
    bad: Sequence[tuple[Mapping[str, str], float]],
    n: int,
) -> LlmRequest:
    system = (
        "You are a mathematical research assistant. You are shown utility expression groups "
        'labelled "Good Expression" and "Bad Expression". Form hypotheses about the principles '
        "that produce the good groups but not the bad ones.\n"
        "- Concentrate on the mathematical structure of the good expressions and what it means for the application.\n"
        '- A capital "C" is an arbitrary constant.\n'
        "- Do not argue about simplicity or complexity.\n"
        "- Reason step by step, briefly: at most 5 lines."
    )
    lines = []
    for i, (exprs, acc) in enumerate(good, start=1):
        lines.append(f"Good Expression {i}: ({_triplet(order, exprs)}), accuracy: {acc:.4f}")
    for i, (exprs, acc) in enumerate(bad, start=1):
        lines.append(f"Bad Expression {i}: ({_triplet(order, exprs)}), accuracy: {acc:.4f}")
    user = (
        "\n\n".join(lines)
        + f"\n\nThese are {task.decision} utility functions for the group: {description}. "
        f"Propose {n} hypotheses consistent with them, with a short comment on each."
    )
    return LlmRequest(system, user, "analyze")


def crossover_request(
    order: Sequence[str],
    variables: Sequence[str],
    operators: str,
    parents: Sequence[Mapping[str, str]],
    n: int,
    suggestions: str,
) -> LlmRequest:
    system = (
        "You recombine two groups of mathematical expressions following the suggestions given.\n"
        "New groups must blend elements of both references and obey these constraints:\n"
        f"- variables: {', '.join(variables)}\n"
        "- constants written as C, coefficients as K\n"
        f"- operators: {operators}\n"
        f"Propose exactly {n} new groups. Reconcile contradictory suggestions sensibly. "
        f"Return exactly this format: ```{_tuple_format(order)}```"
    )
    refs = "\n".join(f"Reference Expression group {i}: ({_triplet(order, p)})" for i, p in enumerate(parents, start=1))
    user = f"Suggestion: {suggestions}\n{refs}\n\nPropose {n} expression groups suited to the suggestions and references."
    return LlmRequest(system, user, "crossover")


def mutation_request(
    order: Sequence[str],
    variables: Sequence[str],
    operators: str,
    parent: Mapping[str, str],
    m: int,
    suggestions: str,
) -> LlmRequest:
    system = (
        f"You generate mutated variants of a group of expressions ({', '.join(order)}). "
        "A mutation may change coefficients, swap variables or alter operators, guided by the strategies given.\n"
        f"- variables: {', '.join(variables)}\n"
        "- constants written as C, coefficients as K\n"
        f"- operators: {operators}\n"
        f"Produce exactly {m} mutated groups, each with one expression per alternative, all syntactically valid. "
        f"Return exactly this format: ```{_tuple_format(order)}```"
    )
    refs = "\n".join(f"({a}): {parent[a]}" for a in order)
    user = f"Mutation strategies: {suggestions}\n\nReference expressions:\n{refs}\n\nReturn exactly {m} new groups."
    return LlmRequest(system, user, "mutate")


def selector_request(task: TaskText, catalogue: Mapping[str, str], demographics: str, utility: str) -> LlmRequest:
    entries = "\n".join(f"- {name:<18}: {body}" for name, body in catalogue.items())
    system = (
        f"You select a {task.decision} preference template.\n"
        "You receive <DEMOGRAPHICS> and <UTILITY_FUNCTION> blocks. Choose the single "
        "best-matching template from the catalogue and output only its name in uppercase.\n\n"
        f"CATALOGUE\n{entries}\n\n"
        "Output the template name and nothing else."
    )
    user = f"<DEMOGRAPHICS>{demographics}</DEMOGRAPHICS>\n\n<UTILITY_FUNCTION>{utility}</UTILITY_FUNCTION>"
    return LlmRequest(system, user, "init")


def loss_request(task: TaskText, template: str, profile: str, alternatives: str, prediction: Mapping[str, float], actual: str) -> LlmRequest:
    system = (
        f"Assess a {task.decision} prediction for one {task.subject} against their profile and options. "
        "Compare it with the actual choice and explain any discrepancy briefly, focusing on why the "
        "prediction may be wrong and how the preference template should change. "
        "Start your answer with 0 if the predicted most likely option matches the actual choice, 1 otherwise."
    )
    user = (
        f"<TEMPLATE>{template}</TEMPLATE>\n<PROFILE>\n{profile}\n</PROFILE>\n"
        f"<ALTERNATIVES>\n{alternatives}\n</ALTERNATIVES>\n"
        f"<PREDICTION>{json.dumps(prediction)}</PREDICTION>\n<ACTUAL>{actual}</ACTUAL>"
    )
    return LlmRequest(system, user, "loss")


def refine_request(task: TaskText, template: str, critique: str, profile: str) -> LlmRequest:
    system = (
        f"You edit a preference template that guides {task.decision} predictions for one {task.subject}. "
        "Apply the feedback as a small, directed revision: keep what the feedback does not dispute. "
        "Return only the revised template text."
    )
    user = f"<TEMPLATE>{template}</TEMPLATE>\n<PROFILE>\n{profile}\n</PROFILE>\n<FEEDBACK>{critique}</FEEDBACK>"
    return LlmRequest(system, user, "refine")


def _json_format(alternatives: Sequence[str]) -> str:
    body = ",\n".join(f'  "{a}": <float between 0 and 1>' for a in alternatives)
    return "```json\n{\n" + body + "\n}\n```"


def prediction_request(
    task: TaskText,
    template: str,
    profile: str,
    alternatives_block: str,
    alternatives: Sequence[str],
    utility_block: str,
    temperature: float | None = None,
) -> LlmRequest:
    system = (
        f"You estimate the probability that one {task.subject} chooses each option in a {task.decision}: "
        f"{', '.join(alternatives)}.\n"
        "Blocks: <TEMPLATE> (the individual's preference template), <PROFILE> (their attributes), "
        "<ALTERNATIVES> (option attributes) and <UTILITY> (group utility formulas with their values "
        "for this record; higher means more attractive).\n"
        "Use the template as the guide to this person's preference bias, weigh the profile and "
        "options, and give probabilities that sum to 1.\n"
        f"Output only a JSON object:\n{_json_format(alternatives)}"
    )
    user = (
        f"<TEMPLATE>{template}</TEMPLATE>\n<PROFILE>\n{profile}\n</PROFILE>\n"
        f"<ALTERNATIVES>\n{alternatives_block}\n</ALTERNATIVES>\n<UTILITY>\n{utility_block}\n</UTILITY>"
    )
    return LlmRequest(system, user, "predict", temperature=temperature)


# --------------------------------------------------------------------------
# Prompt-only baselines
# --------------------------------------------------------------------------

def zero_shot_request(task: TaskText, alternatives: Sequence[str], profile: str, alternatives_block: str, chain_of_thought: bool = False, instruction: str | None = None) -> LlmRequest:
    system = (
        f"You estimate a probability distribution over the options of a {task.decision} "
        f"({', '.join(alternatives)}) for one record, using only the <PROFILE> and <ALTERNATIVES> blocks.\n"
        f"Output only a JSON object with probabilities summing to 1:\n{_json_format(alternatives)}"
    )
    if instruction:
        system += f"\n\n{instruction}"
    if chain_of_thought:
        system += "\n\nThink step by step before giving the JSON object."
    user = f"<PROFILE>\n{profile}\n</PROFILE>\n<ALTERNATIVES>\n{alternatives_block}\n</ALTERNATIVES>"
    return LlmRequest(system, user, "predict")


def few_shot_request(task: TaskText, alternatives: Sequence[str], shots: Sequence[tuple[str, str, str]], profile: str, alternatives_block: str) -> LlmRequest:
    system = (
        f"You estimate a probability distribution over the options of a {task.decision} "
        f"({', '.join(alternatives)}). Records with a filled <CHOICE> are worked examples. "
        "For the final record, output only the JSON object of probabilities summing to 1."
    )
    blocks = []
    for prof, alts, choice in shots:
        blocks.append(f"<PROFILE>\n{prof}\n</PROFILE>\n<ALTERNATIVES>\n{alts}\n</ALTERNATIVES>\n<CHOICE>\n{choice}\n</CHOICE>")
    blocks.append(f"<PROFILE>\n{profile}\n</PROFILE>\n<ALTERNATIVES>\n{alternatives_block}\n</ALTERNATIVES>\n<CHOICE>\nPredict this record.\n</CHOICE>")
    return LlmRequest(system, "\n".join(blocks), "predict")


def grading_request(task: TaskText, instruction: str, profile: str, alternatives_block: str, prediction: Mapping[str, float], actual: str) -> LlmRequest:
    system = (
        f"You are {task.expert}. Judge a {task.decision} prediction made under the instruction shown. "
        "Start with one line 'Score: <float between 0 and 1>' (1 = well calibrated toward the actual choice), "
        "then suggest how the instruction should change."
    )
    user = (
        f"<INSTRUCTION>{instruction}</INSTRUCTION>\n<PROFILE>\n{profile}\n</PROFILE>\n"
        f"<ALTERNATIVES>\n{alternatives_block}\n</ALTERNATIVES>\n"
        f"<PREDICTION>{json.dumps(prediction)}</PREDICTION>\n<ACTUAL>{actual}</ACTUAL>"
    )
    return LlmRequest(system, user, "loss")


# --------------------------------------------------------------------------
# Record rendering
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def profile_block(obs, schema=None) -> str:
    """Individual-level attributes of ``obs`` as ``name: value`` lines."""
    alt_feats = set()
    names: Sequence[str]
    if schema is not None:
        for attrs in schema.alternative_attributes.values():
            alt_feats.update(attrs.values())
        names = schema.profile_features or [f for f in obs.features if f not in alt_feats]
    else:
        names = list(obs.features)
    lines = [f"{n}: {_fmt(obs.features[n])}" for n in names if n in obs.features]
    lines += [f"{k}: {_fmt(v)}" for k, v in obs.demographics.items() if k not in obs.features]
    return "\n".join(lines)


def alternatives_block(obs, schema=None, alternatives: Sequence[str] = ()) -> str:
    """One line per alternative listing its attributes for this record."""
    if schema is None or not schema.alternative_attributes:
        return "\n".join(alternatives)
    lines = []
    for alt in schema.alternatives:
        attrs = schema.alternative_attributes.get(alt, {})
        desc = ", ".join(f"{label}={_fmt(obs.features[feat])}" for label, feat in attrs.items() if feat in obs.features)
        lines.append(f"{alt}: {desc}" if desc else alt)
    return "\n".join(lines)


def with_retry_note(req: LlmRequest, attempt: int, problem: str) -> LlmRequest:
    """Re-ask after an unusable answer; the note also gives the retry its own cache key."""
    note = f"\n\n[Attempt {attempt + 1}] Your previous answer was unusable ({problem}). Follow the output format exactly."
    return LlmRequest(req.system, req.user + note, req.purpose, req.temperature, req.max_tokens)
