"""Choice datasets: schema, delimited-text ingestion, stratification, splits."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

logger = logging.getLogger(__name__)


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    column: str
    kind: str = "numeric"  # or "categorical"
    codes: Mapping[str, float] | None = None


@dataclass(frozen=True)
class BucketSpec:
    """How one demographic column maps to group buckets.

    Exactly one of ``codes`` (raw value -> label), ``edges`` (right-open bin
    edges with ``labels``) or ``tertiles`` is used.
    """

    column: str
    codes: Mapping[str, str] | None = None
    edges: Sequence[float] | None = None
    labels: Sequence[str] | None = None
    tertiles: bool = False
    descriptions: Mapping[str, str] | None = None

    @classmethod
    def from_dict(cls, column: str, d: Mapping) -> "BucketSpec":
        codes = d.get("codes")
        if codes is not None:
            codes = {_code_key(k): str(v) for k, v in codes.items()}
        spec = cls(
            column=column,
            codes=codes,
            edges=d.get("edges"),
            labels=d.get("labels"),
            tertiles=bool(d.get("tertiles", False)),
            descriptions=d.get("descriptions"),
        )
        if spec.edges is not None and (spec.labels is None or len(spec.labels) != len(spec.edges) + 1):
            raise SchemaError(f"bucket {column!r}: need len(edges)+1 labels")
        if spec.codes is None and spec.edges is None and not spec.tertiles:
            raise SchemaError(f"bucket {column!r}: give codes, edges or tertiles")
        return spec


def _code_key(v) -> str:
    """Normalize raw cell values so ``1``, ``1.0`` and ``"1"`` coincide."""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, float)):
        f = float(v)
        return str(int(f)) if f.is_integer() else repr(f)
    s = str(v).strip()
    try:
        f = float(s)
    except ValueError:
        return s
    return str(int(f)) if math.isfinite(f) and f.is_integer() else s


@dataclass(frozen=True)
class DatasetSchema:
    """Layout of a choice dataset file and the task vocabulary for prompts."""

    name: str
    alternatives: tuple[str, ...]
    label_column: str
    features: tuple[FeatureSpec, ...]
    label_codes: Mapping[str, str] | None = None
    individual_column: str | None = None
    demographics: tuple[str, ...] = ()
    buckets: Mapping[str, BucketSpec] = field(default_factory=dict)
    group_dims: tuple[str, ...] = ()
    delimiter: str = ","
    proposal_order: tuple[str, ...] | None = None
    alternative_attributes: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    profile_features: tuple[str, ...] = ()
    task: Mapping[str, Any] = field(default_factory=dict)
    drop_labels: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.alternatives) < 2:
            raise SchemaError("a choice set needs at least two alternatives")
        if len(set(self.alternatives)) != len(self.alternatives):
            raise SchemaError("duplicate alternative labels")
        if self.proposal_order is not None and sorted(self.proposal_order) != sorted(self.alternatives):
            raise SchemaError("proposal_order must be a permutation of alternatives")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    @property
    def ordered_for_proposals(self) -> tuple[str, ...]:
        return tuple(self.proposal_order or self.alternatives)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetSchema":
        feats = []
        for item in d["features"]:
            if isinstance(item, str):
                item = {"name": item}
            codes = item.get("codes")
            if codes is not None:
                codes = {_code_key(k): float(v) for k, v in codes.items()}
            feats.append(
                FeatureSpec(
                    name=item["name"],
                    column=item.get("column", item["name"]),
                    kind=item.get("kind", "categorical" if codes else "numeric"),
                    codes=codes,
                )
            )
        label_codes = d.get("label_codes")
        if label_codes is not None:
            label_codes = {_code_key(k): str(v) for k, v in label_codes.items()}
        buckets = {k: BucketSpec.from_dict(v.get("column", k), v) for k, v in (d.get("buckets") or {}).items()}
        return cls(
            name=d.get("name", "custom"),
            alternatives=tuple(d["alternatives"]),
            label_column=d["label_column"],
            features=tuple(feats),
            label_codes=label_codes,
            individual_column=d.get("individual_column"),
            demographics=tuple(d.get("demographics", ())),
            buckets=buckets,
            group_dims=tuple(d.get("group_dims", tuple(buckets))),
            delimiter=d.get("delimiter", ","),
            proposal_order=tuple(d["proposal_order"]) if d.get("proposal_order") else None,
            alternative_attributes=d.get("alternative_attributes") or {},
            profile_features=tuple(d.get("profile_features", ())),
            task=d.get("task") or {},
            drop_labels=tuple(_code_key(v) for v in d.get("drop_labels", ())),
        )

    @classmethod
    def load(cls, path) -> "DatasetSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))


def builtin_schema_path(task: str) -> Path:
    path = Path(__file__).parent / "resources" / f"{task}_schema.yaml"
    if not path.exists():
        raise SchemaError(f"no built-in schema for task {task!r}")
    return path


@dataclass(frozen=True)
class Observation:
    """One decision: feature bindings, the chosen alternative, who chose."""

    features: Mapping[str, float]
    label: str
    individual: str = ""
    demographics: Mapping[str, Any] = field(default_factory=dict)
    record: int = 0


class Dataset:
    """Immutable collection of observations over a fixed alternative set."""

    def __init__(self, alternatives: Sequence[str], observations: Sequence[Observation], schema: DatasetSchema | None = None):
        self.alternatives = tuple(alternatives)
        self.observations = tuple(observations)
        self.schema = schema
        index = {a: j for j, a in enumerate(self.alternatives)}
        for obs in self.observations:
            if obs.label not in index:
                raise DataError(f"label {obs.label!r} is not one of {self.alternatives}")
        self._index = index

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    def __getitem__(self, i):
        return self.observations[i]

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, alternatives={self.alternatives})"

    def subset(self, observations) -> "Dataset":
        return Dataset(self.alternatives, list(observations), self.schema)

    @cached_property
    def feature_names(self) -> tuple[str, ...]:
        names: dict[str, None] = {}
        for obs in self.observations:
            names.update(dict.fromkeys(obs.features))
        return tuple(names)

    @cached_property
    def columns(self) -> dict[str, np.ndarray]:
        """Feature columns as float arrays (NaN where an observation lacks one)."""
        return {
            name: np.array([obs.features.get(name, np.nan) for obs in self.observations], dtype=float)
            for name in self.feature_names
        }

    @cached_property
    def label_index(self) -> np.ndarray:
        return np.array([self._index[obs.label] for obs in self.observations], dtype=int)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.label_index, minlength=len(self.alternatives))

    def by_individual(self) -> dict[str, list[Observation]]:
        out: dict[str, list[Observation]] = defaultdict(list)
        for obs in self.observations:
            out[obs.individual].append(obs)
        return dict(out)


@dataclass
class LoadReport:
    rows: int = 0
    kept: int = 0
    dropped: int = 0
    reasons: dict[str, int] = field(default_factory=dict)


def _decode_feature(spec: FeatureSpec, raw: str) -> float:
    if raw is None or raw.strip() == "":
        raise ValueError("missing")
    if spec.codes is not None:
        key = _code_key(raw)
        if key not in spec.codes:
            raise ValueError(f"unknown code {raw!r}")
        return float(spec.codes[key])
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError("non-finite")
    return value


def load_dataset(path, schema: DatasetSchema, *, report: LoadReport | None = None) -> Dataset:
    """Read a delimited file with a header row into a :class:`Dataset`.

    Rows with missing or non-numeric required fields are dropped and counted
    in ``report``; an undecodable label is a hard error naming the row.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    report = report if report is not None else LoadReport()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=schema.delimiter)
        header = set(reader.fieldnames or ())
        required = {f.column for f in schema.features} | {schema.label_column} | set(schema.demographics)
        if schema.individual_column:
            required.add(schema.individual_column)
        missing = sorted(required - header)
        if missing:
            raise SchemaError(f"{path}: columns missing from header: {missing}")

        observations = []
        seen: dict[str, int] = defaultdict(int)
        for rowno, row in enumerate(reader, start=2):
            report.rows += 1
            raw_label = (row.get(schema.label_column) or "").strip()
            if raw_label == "":
                report.dropped += 1
                report.reasons["missing label"] = report.reasons.get("missing label", 0) + 1
                continue
            if _code_key(raw_label) in schema.drop_labels:
                report.dropped += 1
                report.reasons["excluded label"] = report.reasons.get("excluded label", 0) + 1
                continue
            if schema.label_codes is not None:
                label = schema.label_codes.get(_code_key(raw_label))
            else:
                label = raw_label if raw_label in schema.alternatives else None
            if label not in schema.alternatives:
                raise DataError(f"{path}: row {rowno}: label {raw_label!r} is outside {schema.alternatives}")
            try:
                feats = {f.name: _decode_feature(f, row.get(f.column)) for f in schema.features}
            except (TypeError, ValueError) as exc:
                report.dropped += 1
                reason = f"bad feature value ({exc})"
                report.reasons[reason] = report.reasons.get(reason, 0) + 1
                continue
            ind = row[schema.individual_column].strip() if schema.individual_column else str(rowno - 1)
            demo = {c: row[c].strip() for c in schema.demographics}
            observations.append(Observation(feats, label, ind, demo, seen[ind]))
            seen[ind] += 1
    report.kept = len(observations)
    if report.dropped:
        logger.info("%s: dropped %d of %d rows %s", path, report.dropped, report.rows, report.reasons)
    if not observations:
        raise DataError(f"{path}: no usable rows")
    return Dataset(schema.alternatives, observations, schema)


# --------------------------------------------------------------------------
# Stratification
# --------------------------------------------------------------------------

GroupKey = tuple  # tuple of bucket labels, one per dimension


def _numeric(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        raise DataError(f"demographic value {v!r} is not numeric") from None


def resolve_buckets(dataset: Dataset, dims: Sequence[str], buckets: Mapping[str, BucketSpec]) -> dict[str, BucketSpec]:
    """Replace ``tertiles`` specs by concrete edges computed from ``dataset``."""
    resolved = {}
    for dim in dims:
        spec = buckets[dim]
        if spec.tertiles:
            values = np.array([_numeric(o.demographics[spec.column]) for o in dataset])
            edges = [float(x) for x in np.quantile(values, [1 / 3, 2 / 3])] if len(values) else [0.0, 0.0]
            spec = BucketSpec(spec.column, edges=edges, labels=("low", "mid", "high"), descriptions=spec.descriptions)
        resolved[dim] = spec
    return resolved


def bucket_labels(spec: BucketSpec) -> list[str]:
    if spec.codes is not None:
        return list(dict.fromkeys(spec.codes.values()))
    if spec.labels is not None:
        return list(spec.labels)
    return ["low", "mid", "high"]


def assign_bucket(spec: BucketSpec, value) -> str:
    if spec.codes is not None:
        key = _code_key(value)
        if key not in spec.codes:
            raise DataError(f"{spec.column}: value {value!r} has no bucket")
        return spec.codes[key]
    x = _numeric(value)
    pos = int(np.searchsorted(np.asarray(spec.edges, dtype=float), x, side="right"))
    return spec.labels[pos]


def stratify_groups(dataset: Dataset, dims: Sequence[str], buckets: Mapping[str, BucketSpec]) -> dict[GroupKey, Dataset]:
    """Partition observations by demographic bucket tuple.

    Every combination of bucket labels is present in the result, including
    empty cells (size 0), so callers can report and skip them.
    """
    for dim in dims:
        if dim not in buckets:
            raise SchemaError(f"grouping dimension {dim!r} has no bucket spec")
        col = buckets[dim].column
        if dataset.schema is not None and dataset.schema.demographics and col not in dataset.schema.demographics:
            raise SchemaError(f"grouping dimension {dim!r} is not a demographic column")
    specs = resolve_buckets(dataset, dims, buckets)
    cells: dict[GroupKey, list[Observation]] = {
        key: [] for key in itertools.product(*(bucket_labels(specs[d]) for d in dims))
    }
    for obs in dataset:
        try:
            key = tuple(assign_bucket(specs[d], obs.demographics[specs[d].column]) for d in dims)
        except KeyError as exc:
            raise SchemaError(f"observation lacks demographic column {exc}") from None
        cells.setdefault(key, []).append(obs)
    groups = {key: dataset.subset(obs) for key, obs in cells.items()}
    for key, g in groups.items():
        logger.info("group %s: %d observations", key, len(g))
    return groups


def group_slug(key: GroupKey) -> str:
    return "__".join(str(k) for k in key) if key else "all"


def describe_group(key: GroupKey, dims: Sequence[str], buckets: Mapping[str, BucketSpec]) -> str:
    parts = []
    for dim, label in zip(dims, key):
        desc = (buckets[dim].descriptions or {}).get(label) if dim in buckets else None
        parts.append(desc or f"{dim} {label}")
    return ", ".join(parts) if parts else "all individuals"


# --------------------------------------------------------------------------
# Splits and subset sampling
# --------------------------------------------------------------------------

def _allocate(sizes: Sequence[int], total: int) -> list[int]:
    """Largest-remainder allocation of ``total`` proportional to ``sizes``."""
    n = sum(sizes)
    exact = [total * s / n for s in sizes]
    base = [min(int(math.floor(e)), s) for e, s in zip(exact, sizes)]
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - base[i]), i))
    short = total - sum(base)
    for i in order:
        if short <= 0:
            break
        if base[i] < sizes[i]:
            base[i] += 1
            short -= 1
    return base


def split(dataset: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Individual-level train/test split, stratified by each individual's first label."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    people = dataset.by_individual()
    n = len(people)
    n_train = int(round(ratio * n))
    if n < 2 or n_train == 0 or n_train == n:
        raise DataError(f"cannot split {n} individuals at ratio {ratio}")
    strata: dict[str, list[str]] = defaultdict(list)
    for ind in sorted(people):
        strata[people[ind][0].label].append(ind)
    labels = [a for a in dataset.alternatives if a in strata]
    rng = np.random.default_rng(seed)
    quotas = _allocate([len(strata[a]) for a in labels], n_train)
    train_ids = set()
    for a, q in zip(labels, quotas):
        members = list(strata[a])
        rng.shuffle(members)
        train_ids.update(members[:q])
    train = [o for o in dataset if o.individual in train_ids]
    test = [o for o in dataset if o.individual not in train_ids]
    return dataset.subset(train), dataset.subset(test)


def sample_subset(
    dataset: Dataset,
    n_individuals: int,
    *,
    records_per_individual: int = 1,
    dims: Sequence[str] = (),
    buckets: Mapping[str, BucketSpec] | None = None,
    seed: int = 0,
) -> Dataset:
    """Draw an approximately strata-balanced subset of individuals.

    Individuals are taken round-robin across demographic cells (shuffled
    within each cell); each contributes its first ``records_per_individual``
    records and must have at least that many.
    """
    rng = np.random.default_rng(seed)
    people = {k: v for k, v in dataset.by_individual().items() if len(v) >= records_per_individual}
    if dims:
        specs = resolve_buckets(dataset, dims, buckets or {})
        cells: dict[tuple, list[str]] = defaultdict(list)
        for ind in sorted(people):
            demo = people[ind][0].demographics
            cells[tuple(assign_bucket(specs[d], demo[specs[d].column]) for d in dims)].append(ind)
    else:
        cells = {(): sorted(people)}
    queues = []
    for key in sorted(cells):
        members = list(cells[key])
        rng.shuffle(members)
        queues.append(members)
    chosen: list[str] = []
    while len(chosen) < n_individuals and any(queues):
        for q in queues:
            if q and len(chosen) < n_individuals:
                chosen.append(q.pop(0))
    if len(chosen) < n_individuals:
        raise DataError(f"only {len(chosen)} eligible individuals, wanted {n_individuals}")
    keep = set(chosen)
    obs = []
    for ind in sorted(keep):
        obs.extend(people[ind][:records_per_individual])
    return dataset.subset(obs)
