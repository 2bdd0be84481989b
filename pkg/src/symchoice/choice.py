"""Multinomial-logit choice model over symbolic utilities.

Each alternative's systematic utility is an :mod:`symchoice.expr` expression;
choice probabilities are the softmax of those utilities and a candidate is
scored by the summed negative log-likelihood of the observed choices.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .data import Dataset, Observation
from .expr import (
    Binary,
    Expression,
    Feature,
    Num,
    Param,
    evaluate,
    param_sort_key,
    params_of,
    parse_expressions,
    render_expression,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class CandidateUtility:
    """One utility expression per alternative over a shared parameter space."""

    utilities: Mapping[str, Expression]
    theta: np.ndarray | None = field(default=None, compare=False)
    nll: float = math.inf
    accuracy: float | None = None
    fitted: bool = False

    @classmethod
    def from_strings(cls, mapping: Mapping[str, str]) -> "CandidateUtility":
        alts = list(mapping)
        exprs = parse_expressions([mapping[a] for a in alts])
        return cls(dict(zip(alts, exprs)))

    @property
    def alternatives(self) -> tuple[str, ...]:
        return tuple(self.utilities)

    @property
    def param_names(self) -> tuple[str, ...]:
        names = set()
        for e in self.utilities.values():
            names |= params_of(e)
        return tuple(sorted(names, key=param_sort_key))

    def theta_dict(self, theta=None) -> dict[str, float]:
        theta = self.theta if theta is None else theta
        if theta is None:
            raise FitError("candidate has no parameter values")
        theta = np.asarray(theta, dtype=float).ravel()
        names = self.param_names
        if len(theta) != len(names):
            raise ValueError(f"theta has {len(theta)} entries, expected {len(names)}")
        return dict(zip(names, (float(t) for t in theta)))

    def rendered(self) -> dict[str, str]:
        return {a: render_expression(e) for a, e in self.utilities.items()}

    def key(self) -> str:
        """Identity used to deduplicate candidates."""
        return " | ".join(f"{a}: {render_expression(e)}" for a, e in self.utilities.items())

    def with_fit(self, theta, nll: float, accuracy: float | None) -> "CandidateUtility":
        return replace(self, theta=np.asarray(theta, dtype=float), nll=float(nll), accuracy=accuracy, fitted=True)


@dataclass(frozen=True)
class FitConfig:
    starts: int = 8
    seed: int = 0
    max_iter: int = 500
    tol: float = 1e-8
    polish: bool = True
    init_scale: float = 1.0

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "FitConfig":
        return cls(**(d or {}))


# --------------------------------------------------------------------------
# Probabilities and likelihood
# --------------------------------------------------------------------------

def softmax(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    z = u - np.max(u, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _align(u: CandidateUtility, alternatives: Sequence[str] | None) -> tuple[str, ...]:
    if alternatives is None:
        return u.alternatives
    missing = set(alternatives) - set(u.utilities)
    if missing:
        raise ValueError(f"candidate has no utility for {sorted(missing)}")
    return tuple(alternatives)


def utility_values(u: CandidateUtility, features: Mapping, theta=None, alternatives=None) -> np.ndarray:
    """Utilities stacked along the last axis in ``alternatives`` order."""
    alts = _align(u, alternatives)
    params = u.theta_dict(theta) if u.param_names else {}
    cols = [evaluate(u.utilities[a], features, params) for a in alts]
    return np.stack(np.broadcast_arrays(*cols), axis=-1).astype(float)


def choice_probabilities(u: CandidateUtility, obs: Observation | Mapping, theta=None, alternatives=None) -> np.ndarray:
    """Logit choice probabilities for a single observation."""
    features = obs.features if isinstance(obs, Observation) else obs
    return softmax(utility_values(u, features, theta, alternatives))


def utility_matrix(u: CandidateUtility, data: Dataset, theta=None) -> np.ndarray:
    """(N, J) utilities for every observation in ``data``."""
    v = utility_values(u, data.columns, theta, data.alternatives)
    return np.broadcast_to(v, (len(data), len(data.alternatives)))


def probability_matrix(u: CandidateUtility, data: Dataset, theta=None) -> np.ndarray:
    """(N, J) choice probabilities for every observation in ``data``."""
    return softmax(utility_matrix(u, data, theta))


def group_nll(u: CandidateUtility, data: Dataset, theta=None) -> float:
    """Summed negative log-probability of the chosen alternatives."""
    if len(data) == 0:
        raise ValueError("negative log-likelihood of an empty dataset")
    v = utility_matrix(u, data, theta)
    chosen = v[np.arange(len(data)), data.label_index]
    return float(np.sum(logsumexp(v, axis=1) - chosen))


def nll_gradient(u: CandidateUtility, data: Dataset, theta, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of :func:`group_nll` in ``theta``."""
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    for k in range(len(theta)):
        h = step * max(1.0, abs(theta[k]))
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        grad[k] = (group_nll(u, data, up) - group_nll(u, data, down)) / (2 * h)
    return grad


def accuracy_of(u: CandidateUtility, data: Dataset, theta=None) -> float:
    probs = probability_matrix(u, data, theta)
    return float(np.mean(np.argmax(probs, axis=1) == data.label_index))


# --------------------------------------------------------------------------
# Fitting
# --------------------------------------------------------------------------

def fit_parameters(u: CandidateUtility, data: Dataset, cfg: FitConfig = FitConfig()) -> tuple[np.ndarray, float]:
    """Minimize :func:`group_nll` over ``theta`` from several random starts.

    Each start runs a Nelder-Mead simplex and, when ``cfg.polish`` is set, a
    quasi-Newton polish with numeric gradients.  The lowest NLL wins, ties go
    to the earlier start.  Raises :class:`FitError` if no start produces a
    finite likelihood.
    """
    dim = len(u.param_names)
    if dim == 0:
        nll = group_nll(u, data, np.empty(0))
        if not math.isfinite(nll):
            raise FitError("non-finite likelihood")
        return np.empty(0), nll

    def objective(theta):
        val = group_nll(u, data, theta)
        return val if math.isfinite(val) else 1e300

    rng = np.random.default_rng(cfg.seed)
    inits = rng.normal(0.0, cfg.init_scale, size=(cfg.starts, dim))
    best_theta, best_nll = None, math.inf
    for x0 in inits:
        f0 = objective(x0)
        cand_theta, cand_nll = x0, f0
        res = optimize.minimize(
            objective, x0, method="Nelder-Mead",
            options={"maxiter": cfg.max_iter, "fatol": cfg.tol, "xatol": 1e-10, "adaptive": dim > 2},
        )
        if res.fun < cand_nll:
            cand_theta, cand_nll = res.x, float(res.fun)
        if cfg.polish:
            pol = optimize.minimize(objective, cand_theta, method="BFGS", options={"maxiter": cfg.max_iter, "gtol": 1e-8})
            if np.all(np.isfinite(pol.x)) and pol.fun < cand_nll:
                cand_theta, cand_nll = pol.x, float(pol.fun)
        if cand_nll < best_nll:
            best_theta, best_nll = np.asarray(cand_theta, dtype=float), cand_nll
    if best_theta is None or not math.isfinite(best_nll) or best_nll >= 1e300:
        raise FitError("non-finite likelihood at every start")
    return best_theta, best_nll


def fit_candidate(u: CandidateUtility, data: Dataset, cfg: FitConfig = FitConfig()) -> CandidateUtility:
    """Fit ``u`` and attach theta, NLL and in-sample accuracy.

    Fit failures yield an infinite loss instead of raising.
    """
    try:
        theta, nll = fit_parameters(u, data, cfg)
    except FitError as exc:
        logger.info("fit failed for %s: %s", u.key(), exc)
        return replace(u, theta=np.full(len(u.param_names), np.nan), nll=math.inf, accuracy=0.0, fitted=True)
    return u.with_fit(theta, nll, accuracy_of(u, data, theta))


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    accuracy: float
    f1: float
    cross_entropy: float
    auc: float
    n: int = 0

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "f1": self.f1, "cross_entropy": self.cross_entropy, "auc": self.auc, "n": self.n}


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUC with midranks for ties."""
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=float)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def confusion_matrix(probs, labels, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns argmax predictions."""
    pred = np.argmax(np.asarray(probs, dtype=float), axis=1)
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (np.asarray(labels, dtype=int), pred), 1)
    return cm


def evaluate_metrics(probs, labels, alternatives: Sequence[str] | None = None) -> Metrics:
    """Accuracy, macro-F1, cross-entropy (nats) and macro one-vs-rest AUC.

    ``labels`` are class indices, or alternative names when ``alternatives``
    is given.  Classes absent from both truth and prediction score F1 = 0;
    classes without both positives and negatives are left out of the AUC mean.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2:
        raise ValueError("probabilities must be an (N, J) array")
    n, n_classes = probs.shape
    if alternatives is not None:
        index = {a: j for j, a in enumerate(alternatives)}
        try:
            labels = [index[l] if isinstance(l, str) else l for l in labels]
        except KeyError as exc:
            raise ValueError(f"label {exc} is not an alternative") from None
    labels = np.asarray(labels, dtype=int)
    if len(labels) != n:
        raise ValueError(f"{n} prediction rows but {len(labels)} labels")
    if n == 0:
        raise ValueError("no predictions to score")
    if np.any((labels < 0) | (labels >= n_classes)):
        raise ValueError("label outside the alternative set")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1")

    cm = confusion_matrix(probs, labels, n_classes)
    acc = float(np.trace(cm) / n)
    f1s = []
    for c in range(n_classes):
        tp = cm[c, c]
        denom = cm[c, :].sum() + cm[:, c].sum()
        f1s.append(2.0 * tp / denom if denom else 0.0)
    ce = float(np.mean(-np.log(np.clip(probs[np.arange(n), labels], PROB_FLOOR, 1.0))))
    aucs = [_binary_auc(probs[:, c], labels == c) for c in range(n_classes)]
    aucs = [a for a in aucs if not math.isnan(a)]
    auc = float(np.mean(aucs)) if aucs else math.nan
    return Metrics(acc, float(np.mean(f1s)), ce, auc, n)


# --------------------------------------------------------------------------
# Classical baselines
# --------------------------------------------------------------------------

def _linear(terms: list[Expression]) -> Expression:
    if not terms:
        return Num(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = Binary("+", out, t)
    return out


def mnl_utility(
    alternatives: Sequence[str],
    *,
    individual_features: Sequence[str] = (),
    alternative_features: Mapping[str, Sequence[str]] | None = None,
    reference: str | None = None,
) -> CandidateUtility:
    """Linear-in-parameters logit skeleton.

    Every alternative except ``reference`` (default: the first) gets an
    intercept ``C_n``.  ``individual_features`` enter with alternative-specific
    coefficients (MNL); ``alternative_features`` maps each alternative to an
    equal-length list of its own attributes, sharing one coefficient per
    position (conditional logit).
    """
    alternatives = list(alternatives)
    reference = reference or alternatives[0]
    if reference not in alternatives:
        raise ValueError(f"reference {reference!r} is not an alternative")
    if alternative_features:
        lengths = {len(v) for v in alternative_features.values()}
        if len(lengths) != 1 or set(alternative_features) != set(alternatives):
            raise ValueError("alternative_features needs equal-length lists for every alternative")
        n_shared = lengths.pop()
    else:
        n_shared = 0
    utilities = {}
    c_idx = 0
    k_idx = n_shared
    for alt in alternatives:
        terms: list[Expression] = []
        if alt != reference:
            c_idx += 1
            terms.append(Param("C", c_idx))
            for feat in individual_features:
                k_idx += 1
                terms.append(Binary("*", Param("K", k_idx), Feature(feat)))
        for m in range(n_shared):
            terms.append(Binary("*", Param("K", m + 1), Feature(alternative_features[alt][m])))
        utilities[alt] = _linear(terms)
    return CandidateUtility(utilities)


def fit_mnl_baseline(
    data: Dataset,
    *,
    individual_features: Sequence[str] = (),
    alternative_features: Mapping[str, Sequence[str]] | None = None,
    reference: str | None = None,
    cfg: FitConfig = FitConfig(),
) -> CandidateUtility:
    """Build a linear logit model (see :func:`mnl_utility`) and fit it to ``data``."""
    for feat in list(individual_features) + [f for v in (alternative_features or {}).values() for f in v]:
        if feat not in data.columns:
            raise ValueError(f"feature {feat!r} not in dataset")
    u = mnl_utility(
        data.alternatives,
        individual_features=individual_features,
        alternative_features=alternative_features,
        reference=reference,
    )
    theta, nll = fit_parameters(u, data, cfg)
    return u.with_fit(theta, nll, accuracy_of(u, data, theta))

