"""Ground-truth handling, regression metrics, and the ablation runner.

Predictions are scored with MAE, MSE and RMSE per (task, variant).
Ablation tables report each variant's relative change against the full
pipeline as arrow-tagged percentages with two decimals, computed from the
unrounded metric values.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .backend import ChatBackend
from .domain import LocationSample, PredictionOutput, TaskSpec
from .errors import AlignmentError, EvaluationError
from .guidance import guide
from .pipeline import GUIDED_VARIANTS, RunOutcome, run_predictions
from .reliability import ReliabilityConfig

logger = logging.getLogger(__name__)

BASELINE_VARIANT = "full"


@dataclass(frozen=True)
class EvalReport:
    """Error metrics for one task under one pipeline variant."""

    task_id: str
    variant: str
    n: int
    mae: float
    mse: float
    rmse: float

    def __post_init__(self) -> None:
        if self.n <= 0:
            raise ValueError("n must be positive")
        if min(self.mae, self.mse, self.rmse) < 0:
            raise ValueError("metrics must be nonnegative")
        if abs(self.rmse - math.sqrt(self.mse)) > 1e-12:
            raise ValueError("rmse must equal sqrt(mse)")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "variant": self.variant,
            "n": self.n,
            "mae": self.mae,
            "mse": self.mse,
            "rmse": self.rmse,
        }


def rescale_to_unit_interval_times_ten(values: Sequence[float]) -> list[float]:
    """Min-max rescale raw values onto [0, 10].

    All-equal input maps every value to the midpoint 5.0.
    """
    if len(values) == 0:
        raise EvaluationError("cannot rescale an empty value list")
    floats = [float(v) for v in values]
    if any(not math.isfinite(v) for v in floats):
        raise EvaluationError("cannot rescale non-finite values")
    low, high = min(floats), max(floats)
    if low == high:
        return [5.0] * len(floats)
    span = high - low
    return [10.0 * (v - low) / span for v in floats]


def metrics(
    predictions: Mapping[str, float],
    truths: Mapping[str, float],
    task_id: str = "",
    variant: str = "",
) -> EvalReport:
    """MAE / MSE / RMSE over pairs aligned by location id."""
    if not predictions:
        raise EvaluationError("no predictions to score")
    missing = sorted(set(predictions) - set(truths))
    extra = sorted(set(truths) - set(predictions))
    if missing or extra:
        raise AlignmentError(
            f"prediction/truth ids do not align (no truth for {missing}, no prediction for {extra})"
        )
    errors = [predictions[k] - truths[k] for k in predictions]
    n = len(errors)
    mae = math.fsum(abs(e) for e in errors) / n
    mse = math.fsum(e * e for e in errors) / n
    return EvalReport(task_id=task_id, variant=variant, n=n, mae=mae, mse=mse, rmse=math.sqrt(mse))


# --------------------------------------------------------------------------
# Table rendering
# --------------------------------------------------------------------------

def format_change(baseline: float, value: float) -> str:
    """Relative change as an arrow-tagged two-decimal percentage.

    Computed from the unrounded inputs; equal values render ``0.00%``.
    A zero baseline with a nonzero value has no defined percentage and
    renders ``n/a``.
    """
    if value == baseline:
        return "0.00%"
    if baseline == 0:
        return "n/a"
    pct = (value - baseline) / baseline * 100.0
    arrow = "↑" if pct > 0 else "↓"
    return f"{arrow}{abs(pct):.2f}%"


def format_metric(value: float, baseline: float | None = None) -> str:
    """Metric cell: two decimals, plus the change versus baseline if given."""
    cell = f"{value:.2f}"
    if baseline is not None:
        cell += f" ({format_change(baseline, value)})"
    return cell


def render_report_table(
    reports: Sequence[EvalReport], baseline_variant: str = BASELINE_VARIANT
) -> str:
    """Aligned plain-text table, one block per task, changes vs the baseline variant."""
    by_task: dict[str, list[EvalReport]] = {}
    for report in reports:
        by_task.setdefault(report.task_id, []).append(report)

    rows: list[tuple[str, str, str, str, str]] = [("Task / Variant", "MAE", "MSE", "RMSE", "n")]
    for task_id in sorted(by_task):
        task_reports = by_task[task_id]
        baseline = next((r for r in task_reports if r.variant == baseline_variant), None)
        rows.append((f"[{task_id}]", "", "", "", ""))
        ordered = sorted(
            task_reports, key=lambda r: (r.variant != baseline_variant, r.variant)
        )
        for report in ordered:
            is_base = baseline is not None and report.variant == baseline_variant
            base = None if is_base or baseline is None else baseline
            rows.append(
                (
                    f"  {report.variant}",
                    format_metric(report.mae, base.mae if base else None),
                    format_metric(report.mse, base.mse if base else None),
                    format_metric(report.rmse, base.rmse if base else None),
                    str(report.n),
                )
            )
    widths = [max(len(row[col]) for row in rows) for col in range(5)]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
    return "\n".join(lines)


def write_reports_csv(
    reports: Sequence[EvalReport],
    path: str | Path,
    baseline_variant: str = BASELINE_VARIANT,
) -> None:
    """Delimited report table with relative-change columns versus the baseline."""
    baselines = {r.task_id: r for r in reports if r.variant == baseline_variant}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["task_id", "variant", "n", "mae", "mse", "rmse", "mae_vs_full", "mse_vs_full", "rmse_vs_full"]
        )
        for report in sorted(reports, key=lambda r: (r.task_id, r.variant != baseline_variant, r.variant)):
            base = baselines.get(report.task_id)
            changes = ["", "", ""]
            if base is not None and report.variant != baseline_variant:
                changes = [
                    format_change(base.mae, report.mae),
                    format_change(base.mse, report.mse),
                    format_change(base.rmse, report.rmse),
                ]
            writer.writerow(
                [report.task_id, report.variant, report.n,
                 repr(report.mae), repr(report.mse), repr(report.rmse), *changes]
            )


def load_ground_truth_csv(path: str | Path) -> dict[tuple[str, str], float]:
    """Load the (location_id, task_id) -> raw_value table."""
    table: dict[tuple[str, str], float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"location_id", "task_id", "raw_value"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise EvaluationError(
                f"{path}: ground truth needs columns {sorted(required)}, got {reader.fieldnames}"
            )
        for row in reader:
            table[(row["location_id"], row["task_id"])] = float(row["raw_value"])
    return table


def truth_for_task(
    samples: Iterable[LocationSample], task_id: str
) -> dict[str, float]:
    return {
        s.id: s.ground_truth[task_id] for s in samples if task_id in s.ground_truth
    }


def score_outcome(
    predictions: Sequence[PredictionOutput],
    truths: Mapping[tuple[str, str], float],
) -> list[EvalReport]:
    """Score all (task, variant) groups found in the predictions."""
    groups: dict[tuple[str, str], dict[str, float]] = {}
    for pred in predictions:
        groups.setdefault((pred.task_id, pred.variant), {})[pred.location_id] = pred.value
    reports = []
    for (task_id, variant), pred_map in sorted(groups.items()):
        truth_map = {
            loc: truths[(loc, task_id)] for loc in pred_map if (loc, task_id) in truths
        }
        missing = sorted(set(pred_map) - set(truth_map))
        if missing:
            raise AlignmentError(
                f"no ground truth for task {task_id!r} at locations {missing}"
            )
        reports.append(metrics(pred_map, truth_map, task_id=task_id, variant=variant))
    return reports


def run_experiment(
    samples: Sequence[LocationSample],
    tasks: Sequence[TaskSpec],
    variants: Sequence[str],
    backend: ChatBackend,
    rel_cfg: ReliabilityConfig | None = None,
    factor_cache_dir: str | Path | None = None,
    workers: int = 4,
) -> tuple[list[EvalReport], RunOutcome]:
    """Run the experimental matrix and score it against dataset ground truth.

    Guided factor maps are produced (or loaded from cache) once per task.
    Locations that fail in the pipeline are excluded from the metrics with
    a logged count; locations without ground truth for a task are skipped.
    """
    rel_cfg = rel_cfg or ReliabilityConfig()
    factor_maps = {}
    if any(v in GUIDED_VARIANTS for v in variants):
        for task in tasks:
            cache = (
                Path(factor_cache_dir) / f"factors_{task.id}.json"
                if factor_cache_dir is not None
                else None
            )
            factor_maps[task.id] = guide(task, backend, cache_path=cache, workers=workers)

    scored_tasks = []
    for task in tasks:
        if any(task.id in s.ground_truth for s in samples):
            scored_tasks.append(task)
        else:
            logger.warning("task %s has no ground truth in the dataset; skipping", task.id)
    if not scored_tasks:
        raise EvaluationError("no task has ground truth in the dataset")

    outcome = run_predictions(
        samples, scored_tasks, variants, backend, rel_cfg, factor_maps, workers=workers
    )
    if outcome.failures:
        logger.warning(
            "excluding %d failed job(s) from metrics", len(outcome.failures)
        )
    truths = {
        (s.id, t.id): s.ground_truth[t.id]
        for s in samples
        for t in scored_tasks
        if t.id in s.ground_truth
    }
    scorable = [
        p for p in outcome.predictions if (p.location_id, p.task_id) in truths
    ]
    return score_outcome(scorable, truths), outcome
