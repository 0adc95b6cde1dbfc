"""Per-location pipelines and the run-level orchestration.

One job is (location, task, variant). The ``full`` variant runs guided
extraction with the reliability gate and joint inference; ``no_factors``
swaps the guided factor sets for the fixed generic placeholders;
``no_reliability`` uses single-variant extraction with unconditional
acceptance; ``single_llm`` bypasses all layers with one direct prompt.
Jobs run on a bounded worker pool and all run outputs (predictions,
audit transcripts, similarity log) are written in deterministic order so
replay runs are byte-identical regardless of worker width.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .backend import ChatBackend
from .domain import (
    Dimension,
    FactorSet,
    Level,
    LocationSample,
    PAIRS,
    PredictionOutput,
    TaskSpec,
    pair_label,
)
from .errors import ConfigError
from .extraction import PairExtraction, extract_reliable
from .guidance import generic_factor_map
from .inference import infer, infer_single_llm
from .reliability import ReliabilityConfig

logger = logging.getLogger(__name__)

VARIANTS = ("full", "no_factors", "no_reliability", "single_llm")
GUIDED_VARIANTS = ("full", "no_reliability")

FactorMap = Mapping[tuple[Dimension, Level], FactorSet]


@dataclass(frozen=True)
class LocationRun:
    """Outcome of one (location, task, variant) job."""

    prediction: PredictionOutput
    pairs: Mapping[tuple[Dimension, Level], PairExtraction] | None = None

    def audit_doc(self) -> dict:
        doc: dict = {
            "location_id": self.prediction.location_id,
            "task_id": self.prediction.task_id,
            "variant": self.prediction.variant,
        }
        if self.pairs is not None:
            doc["pairs"] = {
                pair_label(d, r): self.pairs[(d, r)].to_dict() for d, r in PAIRS
            }
        doc["prediction"] = self.prediction.to_dict()
        return doc


def predict_location(
    sample: LocationSample,
    task: TaskSpec,
    variant: str,
    backend: ChatBackend,
    rel_cfg: ReliabilityConfig | None = None,
    factor_map: FactorMap | None = None,
) -> LocationRun:
    """Run one variant pipeline for one location and task."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r} (one of {VARIANTS})")
    rel_cfg = rel_cfg or ReliabilityConfig()

    if variant == "single_llm":
        return LocationRun(prediction=infer_single_llm(task, sample, backend))

    if variant == "no_factors":
        factor_map = generic_factor_map(task)
    elif factor_map is None:
        raise ConfigError(f"variant {variant!r} needs a guided factor map for task {task.id!r}")

    pairs = extract_reliable(
        sample,
        factor_map,
        backend,
        cfg=rel_cfg,
        reliability_enabled=(variant != "no_reliability"),
    )
    records = [pe.record for pe in pairs.values()]
    prediction = infer(task, records, backend, variant=variant, threshold=rel_cfg.threshold)
    return LocationRun(prediction=prediction, pairs=pairs)


@dataclass
class RunOutcome:
    """Everything a prediction run produced, in deterministic order."""

    predictions: list[PredictionOutput] = field(default_factory=list)
    runs: list[LocationRun] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    @property
    def clamp_count(self) -> int:
        return sum(1 for p in self.predictions if p.clamped)


def run_predictions(
    samples: Sequence[LocationSample],
    tasks: Sequence[TaskSpec],
    variants: Sequence[str],
    backend: ChatBackend,
    rel_cfg: ReliabilityConfig | None = None,
    factor_maps: Mapping[str, FactorMap] | None = None,
    workers: int = 4,
) -> RunOutcome:
    """Run every (location, task, variant) job on a bounded worker pool.

    ``factor_maps`` maps task id to its guided factor map and is required
    for the guided variants. Per-job failures are collected (and counted),
    not propagated; failed jobs are excluded from the predictions.
    """
    rel_cfg = rel_cfg or ReliabilityConfig()
    factor_maps = factor_maps or {}
    for variant in variants:
        if variant in GUIDED_VARIANTS:
            missing = [t.id for t in tasks if t.id not in factor_maps]
            if missing:
                raise ConfigError(
                    f"variant {variant!r} needs guided factor maps for tasks {missing}"
                )

    jobs = [
        (sample, task, variant)
        for variant in variants
        for task in tasks
        for sample in samples
    ]
    outcome = RunOutcome()
    indexed: dict[tuple[str, str, str], LocationRun] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {
            (sample.id, task.id, variant): pool.submit(
                predict_location,
                sample,
                task,
                variant,
                backend,
                rel_cfg,
                factor_maps.get(task.id),
            )
            for sample, task, variant in jobs
        }
        for key, future in futures.items():
            location_id, task_id, variant = key
            try:
                indexed[key] = future.result()
            except Exception as exc:
                logger.error("job %s failed: %s", key, exc)
                outcome.failures.append(
                    {
                        "location_id": location_id,
                        "task_id": task_id,
                        "variant": variant,
                        "error": str(exc),
                    }
                )

    for key in sorted(indexed):
        run = indexed[key]
        outcome.runs.append(run)
        outcome.predictions.append(run.prediction)
    outcome.failures.sort(key=lambda f: (f["location_id"], f["task_id"], f["variant"]))
    if outcome.failures:
        logger.warning("%d job(s) failed and were excluded", len(outcome.failures))
    return outcome


# --------------------------------------------------------------------------
# Run artifacts
# --------------------------------------------------------------------------

def write_predictions(predictions: Sequence[PredictionOutput], path: str | Path) -> None:
    """Line-delimited predictions, sorted by (location, task, variant)."""
    ordered = sorted(predictions, key=lambda p: (p.location_id, p.task_id, p.variant))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for pred in ordered:
            fh.write(json.dumps(pred.to_dict(), ensure_ascii=False) + "\n")


def load_predictions(path: str | Path) -> list[PredictionOutput]:
    predictions = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                predictions.append(PredictionOutput.from_dict(json.loads(line)))
    return predictions


def write_audit(outcome: RunOutcome, audit_dir: str | Path) -> int:
    """One transcript file per job under audit/<variant>/<task>/<location>.json."""
    audit_dir = Path(audit_dir)
    written = 0
    for run in outcome.runs:
        pred = run.prediction
        target = audit_dir / pred.variant / pred.task_id
        target.mkdir(parents=True, exist_ok=True)
        doc = run.audit_doc()
        (target / f"{pred.location_id}.json").write_text(
            json.dumps(doc, ensure_ascii=False, indent=1), encoding="utf-8"
        )
        written += 1
    return written


def write_similarity_log(outcome: RunOutcome, path: str | Path) -> int:
    """One similarity report line per settled record, for audit."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for run in outcome.runs:
        if run.pairs is None:
            continue
        pred = run.prediction
        for d, r in PAIRS:
            pe = run.pairs[(d, r)]
            if pe.report is None:
                continue
            lines.append(
                {
                    "location_id": pred.location_id,
                    "task_id": pred.task_id,
                    "variant": pred.variant,
                    "pair": pair_label(d, r),
                    "status": pe.record.status,
                    "report": pe.report.to_dict(),
                }
            )
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line, ensure_ascii=False) + "\n")
    return len(lines)
