"""Offline evaluation: benchmarks, ablations, stage-granularity sweeps.

A benchmark is a JSONL file of instances with gold intents and a
reference answer. Running one produces a report with per-instance text
metrics, micro intent F1, an error tally, and the engine fingerprint so
two reports are comparable only when their knobs match.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from .config import RunFlags, run_fingerprint
from .engine import Engine
from .errors import ConfigError, EmptyText, MedAideError
from .intent import IntentTaxonomy
from .metrics import TEXT_METRICS, intent_f1, score_pair

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkInstance:
    id: str
    query: str
    reference: str
    intents: frozenset[str]
    stage: str


def load_benchmark(path: str | Path, taxonomy: IntentTaxonomy) -> list[BenchmarkInstance]:
    """Instances from JSONL lines of {"id","query","reference","intents","stage"}."""
    instances: list[BenchmarkInstance] = []
    seen: set[str] = set()
    known = set(taxonomy.ids)
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            instance = BenchmarkInstance(
                id=str(row["id"]),
                query=str(row["query"]),
                reference=str(row["reference"]),
                intents=frozenset(str(i) for i in row["intents"]),
                stage=str(row.get("stage", "")),
            )
        except (json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad benchmark line: {exc}") from exc
        if instance.id in seen:
            raise ConfigError(f"{path}:{lineno}: duplicate instance id {instance.id!r}")
        seen.add(instance.id)
        if not instance.query.strip():
            raise EmptyText(f"{path}:{lineno}: empty query")
        if not instance.reference.strip():
            raise EmptyText(f"{path}:{lineno}: empty reference")
        unknown = instance.intents - known
        if not instance.intents or unknown:
            raise ConfigError(f"{path}:{lineno}: bad gold intents (unknown: {sorted(unknown)})")
        instances.append(instance)
    if not instances:
        raise ConfigError(f"{path}: empty benchmark")
    return instances


def run_benchmark(engine: Engine, instances: list[BenchmarkInstance], flags: RunFlags = RunFlags()) -> dict:
    """Run every instance through the engine and score the answers.

    Engine errors on one instance land in the error tally instead of
    aborting the run; scored aggregates cover the surviving instances.
    """
    per_instance: list[dict] = []
    errors: list[dict] = []
    predicted_sets: list[set[str]] = []
    gold_sets: list[set[str]] = []
    for instance in instances:
        try:
            result = engine.run_query(instance.query, flags=flags)
        except MedAideError as exc:
            logger.warning("instance %s failed: %s", instance.id, exc)
            errors.append({"id": instance.id, "type": type(exc).__name__, "detail": str(exc)})
            continue
        metrics = score_pair(result.response, instance.reference, engine.token_embedder)
        predicted_sets.append(set(result.activation.activated))
        gold_sets.append(set(instance.intents))
        per_instance.append(
            {
                "id": instance.id,
                "stage": instance.stage,
                "response": result.response,
                "metrics": metrics,
                "activated": list(result.activation.activated),
                "gold": sorted(instance.intents),
                "stages_run": list(result.stages_run),
            }
        )
    means = {
        metric: (
            sum(row["metrics"][metric] for row in per_instance) / len(per_instance)
            if per_instance
            else 0.0
        )
        for metric in TEXT_METRICS
    }
    return {
        "fingerprint": run_fingerprint(engine.config, flags),
        "flags": flags.as_dict(),
        "count": len(instances),
        "scored": len(per_instance),
        "errors": errors,
        "instances": per_instance,
        "means": means,
        "intent_f1": intent_f1(predicted_sets, gold_sets),
    }


DEFAULT_ABLATION_CELLS: tuple[tuple[str, RunFlags], ...] = (
    ("full", RunFlags()),
    ("no_rie", RunFlags(no_rie=True)),
    ("prompt_recognizer", RunFlags(recognizer="prompt")),
    ("no_decision_analysis", RunFlags(no_decision_analysis=True)),
)


def run_ablation(
    engine: Engine,
    instances: list[BenchmarkInstance],
    base_flags: RunFlags = RunFlags(),
    cells: tuple[tuple[str, RunFlags], ...] = DEFAULT_ABLATION_CELLS,
) -> dict:
    """The benchmark under each ablation cell, base flags merged in."""
    reports: dict[str, dict] = {}
    for name, cell_flags in cells:
        merged = replace(
            base_flags,
            no_rie=base_flags.no_rie or cell_flags.no_rie,
            no_decision_analysis=base_flags.no_decision_analysis or cell_flags.no_decision_analysis,
            recognizer=cell_flags.recognizer or base_flags.recognizer,
            stages=cell_flags.stages or base_flags.stages,
        )
        reports[name] = run_benchmark(engine, instances, merged)
    return {"cells": reports}


def run_stage_sweep(
    engine: Engine,
    instances: list[BenchmarkInstance],
    base_flags: RunFlags = RunFlags(),
    granularities: tuple[int, ...] = (2, 3, 4, 5, 6),
) -> dict:
    """The benchmark at every stage granularity."""
    reports: dict[str, dict] = {}
    for k in granularities:
        if not 2 <= k <= 6:
            raise ConfigError(f"granularity must be 2..6, got {k}")
        reports[str(k)] = run_benchmark(engine, instances, replace(base_flags, stages=k))
    return {"granularities": reports}


def summary_table(report: dict) -> str:
    """Fixed-width text summary of one benchmark report."""
    lines = [
        f"fingerprint: {report['fingerprint']}",
        f"instances:   {report['scored']}/{report['count']} scored, {len(report['errors'])} errors",
        f"intent_f1:   {report['intent_f1']:.4f}",
    ]
    for metric in TEXT_METRICS:
        lines.append(f"{metric:<16} {report['means'][metric]:8.3f}")
    return "\n".join(lines)
