"""Fragment importance scores and the pipeline report.

A fragment's raw score sums, over groups and each group's top-ranked
utilities, the held-out accuracy of every utility that contains it.  Scores
are then divided by the largest one.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .choice import CandidateUtility, Metrics, accuracy_of
from .data import Dataset
from .expr import enumerate_fragments


def candidate_fragments(u: CandidateUtility) -> set[str]:
    """Union of the fragment sets of every alternative's expression."""
    out: set[str] = set()
    for e in u.utilities.values():
        out |= enumerate_fragments(e)
    return out


@dataclass
class FragmentScoreTable:
    raw: dict[str, float] = field(default_factory=dict)
    provenance: dict[str, list[tuple[str, int, float]]] = field(default_factory=dict)

    @property
    def normalized(self) -> dict[str, float]:
        if not self.raw:
            return {}
        top = max(self.raw.values())
        if top <= 0:
            return {k: 0.0 for k in self.raw}
        return {k: (1.0 if v == top else v / top) for k, v in self.raw.items()}

    def __len__(self) -> int:
        return len(self.raw)

    def rows(self) -> list[dict]:
        """Rows sorted by descending score, then fragment text."""
        norm = self.normalized
        order = sorted(self.raw, key=lambda k: (-self.raw[k], k))
        return [
            {"fragment": k, "raw": self.raw[k], "normalized": norm[k], "contributors": len(self.provenance.get(k, ()))}
            for k in order
        ]

    def to_dict(self) -> dict:
        return {
            "rows": self.rows(),
            "provenance": {k: [list(t) for t in v] for k, v in sorted(self.provenance.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FragmentScoreTable":
        raw = {r["fragment"]: float(r["raw"]) for r in d.get("rows", [])}
        prov = {k: [tuple(t) for t in v] for k, v in d.get("provenance", {}).items()}
        return cls(raw, prov)

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["fragment", "raw", "normalized", "contributors"], lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow({**row, "raw": f"{row['raw']:.10g}", "normalized": f"{row['normalized']:.10g}"})


def fragment_scores(
    per_group: Mapping[str, Sequence[tuple[CandidateUtility, float]]],
    k: int = 3,
) -> FragmentScoreTable:
    """Accuracy-weighted fragment counts over each group's first ``k`` utilities.

    ``per_group`` lists are taken to be ranked already; only the first ``k``
    entries contribute.
    """
    contributions: dict[str, list[float]] = {}
    provenance: dict[str, list[tuple[str, int, float]]] = {}
    for g in sorted(per_group):
        for rank, (u, acc) in enumerate(list(per_group[g])[:k], start=1):
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy {acc} for group {g!r} is outside [0, 1]")
            for frag in candidate_fragments(u):
                contributions.setdefault(frag, []).append(float(acc))
                provenance.setdefault(frag, []).append((g, rank, float(acc)))
    raw = {frag: math.fsum(v) for frag, v in contributions.items()}
    return FragmentScoreTable(raw, provenance)


def rank_by_heldout(candidates: Sequence[CandidateUtility], test: Dataset, k: int = 3) -> list[tuple[CandidateUtility, float]]:
    """Top ``k`` distinct fitted candidates by accuracy on held-out data.

    Ties keep archive order.  Candidates without a finite fit are skipped.
    """
    seen, scored = set(), []
    for i, c in enumerate(candidates):
        if not math.isfinite(c.nll) or c.key() in seen:
            continue
        seen.add(c.key())
        acc = accuracy_of(c, test, c.theta) if len(test) else 0.0
        scored.append((acc, i, c))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [(c, acc) for acc, _, c in scored[:k]]


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------

def _clean(obj: Any) -> Any:
    """JSON-safe copy: non-finite floats become None, arrays become lists."""
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def assemble_report(
    *,
    discovery: Mapping[str, Any] | None = None,
    templates: Mapping[str, Any] | None = None,
    metrics: Mapping[str, Metrics] | None = None,
    confusion: Sequence[Sequence[int]] | None = None,
    fragments: FragmentScoreTable | None = None,
    alternatives: Sequence[str] | None = None,
    baselines: Mapping[str, Metrics] | None = None,
) -> dict:
    """Collect whatever stages ran into one JSON-ready document.

    ``discovery`` maps group ids to ``DiscoveryResult`` objects (or their
    dicts); ``templates`` maps individual ids to ``Template`` objects (or
    dicts); ``metrics`` maps ``"overall"`` and group ids to :class:`Metrics`.
    Absent inputs leave their section out.
    """
    if not any(x is not None for x in (discovery, templates, metrics, fragments, baselines)):
        raise ValueError("report needs at least one input")
    report: dict[str, Any] = {}
    if alternatives is not None:
        report["alternatives"] = list(alternatives)
    if discovery is not None:
        groups = {}
        for g in sorted(discovery):
            r = discovery[g]
            d = r.to_dict() if hasattr(r, "to_dict") else dict(r)
            groups[g] = {
                "description": d["description"],
                "utilities": d["best"]["utilities"],
                "theta": d["best"]["theta"],
                "nll": d["best"]["nll"],
                "accuracy": d["best"]["accuracy"],
                "iterations": d["iterations"],
                "converged_at": d["converged_at"],
                "trajectory": d["trajectory"],
            }
        report["groups"] = groups
    if templates is not None:
        report["templates"] = {
            i: {"group": t["group"], "origin": t["origin"], "text": t["text"], "revisions": len(t["history"]) - 1}
            for i, t in sorted((i, (t.to_dict() if hasattr(t, "to_dict") else dict(t))) for i, t in templates.items())
        }
    if metrics is not None:
        report["metrics"] = {k: m.as_dict() if hasattr(m, "as_dict") else dict(m) for k, m in metrics.items()}
    if confusion is not None:
        report["confusion_matrix"] = [list(map(int, row)) for row in confusion]
    if baselines is not None:
        report["baselines"] = {k: m.as_dict() if hasattr(m, "as_dict") else dict(m) for k, m in baselines.items()}
    if fragments is not None:
        report["fragments"] = fragments.to_dict()
    return _clean(report)


def write_report(report: Mapping, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
