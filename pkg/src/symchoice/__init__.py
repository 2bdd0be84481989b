"""Symbolic utility discovery and per-individual template adaptation for discrete choice data."""

__version__ = "0.1.0"

from .choice import (
    CandidateUtility,
    FitConfig,
    Metrics,
    choice_probabilities,
    evaluate_metrics,
    fit_candidate,
    fit_mnl_baseline,
    fit_parameters,
    group_nll,
    softmax,
)
from .data import Dataset, DatasetSchema, Observation, load_dataset, split, stratify_groups
from .expr import SymbolicLibrary, evaluate, parse_expression, render_expression, validate
from .llm import LlmClient, LlmRequest, MockProvider, mock_backend

__all__ = [
    "CandidateUtility",
    "Dataset",
    "DatasetSchema",
    "FitConfig",
    "LlmClient",
    "LlmRequest",
    "Metrics",
    "MockProvider",
    "Observation",
    "SymbolicLibrary",
    "choice_probabilities",
    "evaluate",
    "evaluate_metrics",
    "fit_candidate",
    "fit_mnl_baseline",
    "fit_parameters",
    "group_nll",
    "load_dataset",
    "mock_backend",
    "parse_expression",
    "render_expression",
    "softmax",
    "split",
    "stratify_groups",
    "validate",
]
