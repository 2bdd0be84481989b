"""Batch entry points: ``symchoice <command> --config run.yaml``.

Commands: discover, adapt, predict, evaluate, baselines, fragments, run-all.
The config file is the single source of truth; flags only override it.
Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

Output layout under ``output``::

    manifest.json                    config hash, seed, code version, input hashes
    discovery/<group>.json           one result per non-empty group
    discovery/skipped.json           empty groups
    adaptation/transcripts/<id>.jsonl
    adaptation/skipped.json          individuals whose group has no result
    predictions.csv                  test-set probabilities
    metrics.json                     overall, per group, confusion matrix
    baselines.json
    fragments.csv, fragments.json
    report.json                      written by run-all
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from . import __version__, prompts
from .adaptation import AdaptConfig, PromptContext, Template, TemplateCatalogue, predict, read_transcript, run_adaptation, write_transcript
from .analysis import FragmentScoreTable, assemble_report, fragment_scores, rank_by_heldout, write_report
from .baselines import baseline_table, classical_baselines, optimize_instruction, prompt_baseline
from .choice import FitConfig, confusion_matrix, evaluate_metrics
from .data import (
    BucketSpec, DatasetSchema, assign_bucket, builtin_schema_path, describe_group, group_slug,
    load_dataset, resolve_buckets, sample_subset, split, stratify_groups,
)
from .discovery import ConceptLibrary, DiscoveryConfig, DiscoveryContext, DiscoveryResult, load_operator_library, run_discovery
from .llm import LlmClient, client_from_config

logger = logging.getLogger("symchoice")

RESOURCES = Path(__file__).parent / "resources"
TASK_ALIASES = {"travel": "swissmetro"}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    task: str
    schema: DatasetSchema
    data: Path
    output: Path
    seed: int = 0
    split_ratio: float = 0.8
    subset: Mapping[str, Any] | None = None
    group_dims: tuple[str, ...] = ()
    buckets: Mapping[str, BucketSpec] = field(default_factory=dict)
    discovery: DiscoveryConfig = DiscoveryConfig()
    adaptation: AdaptConfig = AdaptConfig()
    fit: FitConfig = FitConfig()
    llm: Mapping[str, Any] = field(default_factory=dict)
    concepts: Path = RESOURCES / "concepts.yaml"
    library: Path = RESOURCES / "symbolic_library.yaml"
    templates: Path | None = None
    baselines: Mapping[str, Any] = field(default_factory=dict)
    cache_dir: Path | None = None
    raw: Mapping[str, Any] = field(default_factory=dict)
    source: Path | None = None

    @property
    def task_key(self) -> str:
        return self.schema.name

    def hash(self) -> str:
        # Output and cache locations do not change results, so they stay out of the hash.
        semantic = {k: v for k, v in self.raw.items() if k not in ("output", "cache_dir")}
        blob = json.dumps(semantic, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


def _path(value, base: Path, what: str, must_exist: bool = True) -> Path:
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if must_exist and not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def load_config(path, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Read and validate a pipeline config; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(raw, path.parent.resolve(), source=path)


def config_from_dict(raw: Mapping[str, Any], base: Path, source: Path | None = None) -> PipelineConfig:
    raw = dict(raw)
    for key in ("task", "data", "output"):
        if key not in raw:
            raise ConfigError(f"config is missing required key {key!r}")
    task = str(raw["task"])
    try:
        if task.endswith((".yaml", ".yml")):
            schema = DatasetSchema.load(_path(task, base, "schema file"))
        else:
            schema = DatasetSchema.load(builtin_schema_path(TASK_ALIASES.get(task, task)))
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"cannot load schema for task {task!r}: {exc}") from None
    groups = raw.get("groups") or {}
    buckets = dict(schema.buckets)
    try:
        for name, spec in (groups.get("buckets") or {}).items():
            buckets[name] = BucketSpec.from_dict(spec.get("column", name), spec)
        dims = tuple(groups.get("dims", schema.group_dims))
        for d in dims:
            if d not in buckets:
                raise ConfigError(f"grouping dimension {d!r} has no bucket spec")
        seed = int(raw.get("seed", 0))
        fit = FitConfig.from_dict({"seed": seed, **(raw.get("fit") or {})})
        disc = dict(raw.get("discovery") or {})
        disc.setdefault("seed", seed)
        dcfg = DiscoveryConfig.from_dict({**disc, "fit": {**vars(fit), **(disc.get("fit") or {})}})
        acfg = AdaptConfig.from_dict({"seed": seed, **(raw.get("adaptation") or {})})
        ratio = float((raw.get("split") or {}).get("ratio", 0.8))
        if not 0 < ratio < 1:
            raise ConfigError("split.ratio must lie in (0, 1)")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    templates = raw.get("templates")
    default_templates = RESOURCES / f"{schema.name}_templates.yaml"
    return PipelineConfig(
        task=task,
        schema=schema,
        data=_path(raw["data"], base, "data file"),
        output=_path(raw["output"], base, "output", must_exist=False),
        seed=seed,
        split_ratio=ratio,
        subset=raw.get("subset"),
        group_dims=dims,
        buckets=buckets,
        discovery=dcfg,
        adaptation=acfg,
        fit=fit,
        llm=dict(raw.get("llm") or {}),
        concepts=_path(raw["concepts"], base, "concept library") if raw.get("concepts") else RESOURCES / "concepts.yaml",
        library=_path(raw["library"], base, "symbolic library") if raw.get("library") else RESOURCES / "symbolic_library.yaml",
        templates=_path(templates, base, "template catalogue") if templates else (default_templates if default_templates.exists() else None),
        baselines=dict(raw.get("baselines") or {}),
        cache_dir=_path(raw["cache_dir"], base, "cache dir", must_exist=False) if raw.get("cache_dir") else None,
        raw=raw,
        source=source,
    )


# --------------------------------------------------------------------------
# Shared pipeline state
# --------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", str(name))


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


class Pipeline:
    """Loads data once and derives split, groups and the backend client."""

    def __init__(self, cfg: PipelineConfig, *, mock_script: Path | None = None):
        self.cfg = cfg
        self.mock_script = mock_script
        self.out = cfg.output
        data = load_dataset(cfg.data, cfg.schema)
        if cfg.subset:
            data = sample_subset(
                data, int(cfg.subset["individuals"]),
                records_per_individual=int(cfg.subset.get("records", 1)),
                dims=cfg.group_dims, buckets=cfg.buckets, seed=cfg.seed,
            )
        self.data = data
        self.train, self.test = split(data, cfg.split_ratio, cfg.seed)
        self.specs = resolve_buckets(data, cfg.group_dims, cfg.buckets)
        self.train_groups = stratify_groups(self.train, cfg.group_dims, self.specs)
        self.test_groups = stratify_groups(self.test, cfg.group_dims, self.specs)
        self.task_text = prompts.TaskText.from_schema_task(cfg.schema.task)
        self.ctx = PromptContext(data.alternatives, cfg.schema, self.task_text)
        self._llm: LlmClient | None = None

    # backend ---------------------------------------------------------------
    @property
    def llm(self) -> LlmClient:
        if self._llm is None:
            cache_dir = self.cfg.cache_dir or self.out.parent / f".{self.out.name}_cache"
            self._llm = client_from_config(
                self.cfg.llm,
                mock_script=self.mock_script,
                cache_path=self.cfg.llm.get("cache_path") or cache_dir / "llm_cache.jsonl",
                audit_path=self.cfg.llm.get("audit_path") or cache_dir / "audit.jsonl",
            )
        return self._llm

    # groups ----------------------------------------------------------------
    def group_of(self, obs) -> str:
        key = tuple(assign_bucket(self.specs[d], obs.demographics[self.specs[d].column]) for d in self.cfg.group_dims)
        return group_slug(key)

    def describe(self, key) -> str:
        return describe_group(key, self.cfg.group_dims, self.specs)

    def discovery_path(self, slug: str) -> Path:
        return self.out / "discovery" / f"{_safe(slug)}.json"

    def load_results(self) -> dict[str, DiscoveryResult]:
        out = {}
        for key in self.train_groups:
            p = self.discovery_path(group_slug(key))
            if p.exists():
                out[group_slug(key)] = DiscoveryResult.load(p)
        return out

    def transcript_path(self, individual: str) -> Path:
        return self.out / "adaptation" / "transcripts" / f"{_safe(individual)}.jsonl"

    def write_manifest(self, command: str) -> None:
        inputs = {"data": _sha256(self.cfg.data), "concepts": _sha256(self.cfg.concepts), "library": _sha256(self.cfg.library)}
        if self.cfg.source is not None:
            inputs["config"] = _sha256(self.cfg.source)
        if self.cfg.templates is not None:
            inputs["templates"] = _sha256(self.cfg.templates)
        if self.mock_script is not None:
            inputs["mock_script"] = _sha256(Path(self.mock_script))
        manifest = {
            "command": command,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "code_version": __version__,
            "inputs": inputs,
            "records": {"total": len(self.data), "train": len(self.train), "test": len(self.test)},
        }
        _dump_json(manifest, self.out / "manifest.json")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_discover(p: Pipeline) -> dict[str, DiscoveryResult]:
    cfg = p.cfg
    concepts = ConceptLibrary.load(cfg.concepts).for_task(cfg.task_key)
    library = load_operator_library(cfg.library, p.data.feature_names)
    results, skipped = {}, []
    for key, gdata in sorted(p.train_groups.items()):
        slug = group_slug(key)
        if len(gdata) == 0:
            skipped.append({"group": slug, "reason": "no training records"})
            logger.info("group %s: empty, skipped", slug)
            continue
        ctx = DiscoveryContext(slug, p.describe(key), cfg.schema.ordered_for_proposals, library, concepts, p.task_text)
        result = run_discovery(ctx, gdata, cfg.discovery, p.llm)
        result.save(p.discovery_path(slug))
        results[slug] = result
        logger.info("group %s: best loss %.4f after %d iterations", slug, result.best.loss, result.iterations)
    _dump_json({"skipped": skipped}, p.out / "discovery" / "skipped.json")
    return results


def _individuals_in_scope(p: Pipeline) -> list[tuple[str, list, int]]:
    """(individual, records, iterations) for everyone who needs a template."""
    acfg = p.cfg.adaptation
    train_people = p.train.by_individual()
    test_people = p.test.by_individual()
    out = [(i, recs, acfg.iterations) for i, recs in sorted(train_people.items())]
    test_iters = acfg.iterations if acfg.scope == "all" else 0
    out += [(i, recs, test_iters) for i, recs in sorted(test_people.items())]
    return out


def cmd_adapt(p: Pipeline) -> dict[str, Template]:
    cfg = p.cfg
    if cfg.templates is None:
        raise ConfigError(f"no template catalogue for task {cfg.task!r}; set 'templates' in the config")
    catalogue = TemplateCatalogue.load(cfg.templates)
    results = p.load_results()
    if not results:
        raise RuntimeError(f"no discovery results under {p.out / 'discovery'}; run 'discover' first")
    templates, skipped = {}, []
    for ind, recs, iters in _individuals_in_scope(p):
        slug = p.group_of(recs[0])
        path = p.transcript_path(ind)
        if path.exists():
            templates[ind] = read_transcript(path)
            continue
        if slug not in results:
            skipped.append({"individual": ind, "group": slug, "reason": "no discovery result for group"})
            continue
        acfg = AdaptConfig(**{**vars(cfg.adaptation), "iterations": iters})
        tpl = run_adaptation(recs, results[slug].best.candidate, catalogue, acfg, p.llm, ctx=p.ctx, group=slug)
        write_transcript(tpl, path)
        templates[ind] = tpl
    _dump_json({"skipped": skipped}, p.out / "adaptation" / "skipped.json")
    return templates


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def cmd_predict(p: Pipeline) -> Path:
    results = p.load_results()
    alts = p.data.alternatives
    path = p.out / "predictions.csv"
    rows = []
    for obs in p.test:
        slug = p.group_of(obs)
        tpath = p.transcript_path(obs.individual)
        if slug not in results or not tpath.exists():
            logger.warning("individual %s: no template or group result; not predicted", obs.individual)
            continue
        tpl = read_transcript(tpath)
        prob = predict(tpl, results[slug].best.candidate, obs, p.llm, ctx=p.ctx,
                       retries=p.cfg.adaptation.retries, temperature=p.cfg.adaptation.temperature)
        rows.append([obs.individual, obs.record, slug, obs.label] + [_fmt(v) for v in prob])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["individual", "record", "group", "label"] + [f"p_{a}" for a in alts])
        w.writerows(rows)
    return path


def read_predictions(path: Path, alternatives: Sequence[str]) -> tuple[list[dict], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    probs = np.array([[float(r[f"p_{a}"]) for a in alternatives] for r in rows]).reshape(len(rows), len(alternatives))
    return rows, probs


def cmd_evaluate(p: Pipeline) -> dict:
    alts = p.data.alternatives
    path = p.out / "predictions.csv"
    if not path.exists():
        cmd_predict(p)
    rows, probs = read_predictions(path, alts)
    if not rows:
        raise RuntimeError("no test predictions to evaluate")
    probs = probs / probs.sum(axis=1, keepdims=True)
    index = {a: j for j, a in enumerate(alts)}
    labels = np.array([index[r["label"]] for r in rows])
    metrics = {"overall": evaluate_metrics(probs, labels).as_dict()}
    for g in sorted({r["group"] for r in rows}):
        mask = np.array([r["group"] == g for r in rows])
        metrics[g] = evaluate_metrics(probs[mask], labels[mask]).as_dict()
    doc = {
        "alternatives": list(alts),
        "metrics": metrics,
        "confusion_matrix": confusion_matrix(probs, labels, len(alts)).tolist(),
        "missing": len(p.test) - len(rows),
    }
    _dump_json(_finite(doc), p.out / "metrics.json")
    return doc


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def cmd_baselines(p: Pipeline) -> dict:
    bcfg = p.cfg.baselines
    results = classical_baselines(p.train, p.test, p.cfg.schema, individual_features=bcfg.get("mnl_features"), cfg=p.cfg.fit)
    for mode in bcfg.get("prompt", ()):
        if mode == "instruction":
            instr = optimize_instruction(p.train, p.llm, steps=int(bcfg.get("instruction_steps", 3)))
            res = prompt_baseline(p.test, p.llm, mode="instruction", instruction=instr)
        else:
            res = prompt_baseline(p.test, p.llm, mode=mode, train=p.train, shots=int(bcfg.get("shots", 3)))
        results.append(res)
    table = _finite(baseline_table(results))
    models = {r.name: r.model.rendered() for r in results if r.model is not None}
    _dump_json({"metrics": table, "models": models}, p.out / "baselines.json")
    return table


def cmd_fragments(p: Pipeline, k: int = 3) -> FragmentScoreTable:
    results = p.load_results()
    if not results:
        raise RuntimeError(f"no discovery results under {p.out / 'discovery'}")
    per_group = {}
    for key, test_g in p.test_groups.items():
        slug = group_slug(key)
        if slug in results and len(test_g):
            per_group[slug] = rank_by_heldout([s.candidate for s in results[slug].archive], test_g, k)
    table = fragment_scores(per_group, k)
    table.write_csv(p.out / "fragments.csv")
    _dump_json(table.to_dict(), p.out / "fragments.json")
    return table


def cmd_run_all(p: Pipeline) -> dict:
    results = cmd_discover(p)
    templates = cmd_adapt(p)
    cmd_predict(p)
    metrics = cmd_evaluate(p)
    baselines = cmd_baselines(p)
    table = cmd_fragments(p)
    report = assemble_report(
        discovery=results,
        templates=templates,
        metrics={k: v for k, v in metrics["metrics"].items()},
        confusion=metrics["confusion_matrix"],
        fragments=table,
        alternatives=p.data.alternatives,
        baselines=baselines,
    )
    write_report(report, p.out / "report.json")
    return report


COMMANDS = {
    "discover": cmd_discover,
    "adapt": cmd_adapt,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "baselines": cmd_baselines,
    "fragments": cmd_fragments,
    "run-all": cmd_run_all,
}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symchoice", description="Symbolic utility discovery and template adaptation for choice data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", "-c", required=True, help="pipeline config file (YAML)")
        sp.add_argument("--mock-script", help="scripted backend file for offline runs")
        sp.add_argument("--output", help="override the output directory")
        sp.add_argument("--data", help="override the data file")
        sp.add_argument("--seed", type=int, help="override the seed")
        sp.add_argument("--cache-dir", help="directory for the response cache and audit log")
        sp.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    cwd = Path.cwd()
    overrides = {
        "output": str((cwd / args.output).resolve()) if args.output else None,
        "data": str((cwd / args.data).resolve()) if args.data else None,
        "seed": args.seed,
        "cache_dir": str((cwd / args.cache_dir).resolve()) if args.cache_dir else None,
    }
    try:
        cfg = load_config(args.config, overrides)
        mock = Path(args.mock_script) if args.mock_script else None
        if mock is not None and not mock.exists():
            raise ConfigError(f"mock script not found: {mock}")
        pipeline = Pipeline(cfg, mock_script=mock)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # data load failures
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        pipeline.write_manifest(args.command)
        COMMANDS[args.command](pipeline)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
