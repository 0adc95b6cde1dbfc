"""Predictive-factor guidance: research each (dimension, level) pair, then
summarize into validated six-factor sets.

The layer is a two-call protocol against the chat backend: a research
prompt produces a brief per (dimension, level) pair, and a summary prompt
compresses it into exactly six named, described factors. Factor sets that
fail validation are re-requested with the violation list quoted back.
Results are cached to disk per task so extraction runs never re-research.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .backend import ChatBackend, ChatRequest
from .domain import (
    Dimension,
    FactorSet,
    Level,
    PAIRS,
    PredictiveFactor,
    TaskSpec,
    pair_label,
    validate_factor_set,
)
from .errors import DegenerateReportError, GuidanceError, InvalidFactorSetError
from .structured import extract_json_object

logger = logging.getLogger(__name__)

MIN_REPORT_CHARS = 400
RESEARCH_RETRIES = 2
SUMMARY_RETRIES = 2

_DIMENSION_FRAMING = {
    Dimension.SOCIAL: "the social dimension (people, activity, community and use patterns)",
    Dimension.BUILT_ENVIRONMENTAL: (
        "the built environmental dimension (physical form, infrastructure, "
        "land use and natural features)"
    ),
}
_LEVEL_FRAMING = {
    Level.MACRO: "the macro level (neighborhood and area scale)",
    Level.STREET: "the street level (streetscape and eye-level scale)",
}


@dataclass(frozen=True)
class ResearchReport:
    """Research brief for one (dimension, level) pair of one task."""

    task_id: str
    dimension: Dimension
    level: Level
    body: str

    def __post_init__(self) -> None:
        if not self.body.strip():
            raise ValueError("report body must be nonempty")


def _research_request(task: TaskSpec, d: Dimension, r: Level, seed: int) -> ChatRequest:
    system = (
        "You are an urban research analyst. Produce focused, evidence-minded "
        "research briefs on what drives human-centered urban outcomes."
    )
    user = (
        f"Prediction task: {task.description}\n"
        f"Scope the analysis to {_DIMENSION_FRAMING[d]} at {_LEVEL_FRAMING[r]}.\n\n"
        "Identify the six most influential predictive factors for this task "
        "within that scope. Write a brief report that discusses the evidence "
        "and lists the factors as numbered lines in the form "
        "'1. <factor name>: <one-sentence measurable definition>'."
    )
    return ChatRequest(system_prompt=system, user_prompt=user, variant_seed=seed)


def research(
    task: TaskSpec,
    dimension: Dimension,
    level: Level,
    backend: ChatBackend,
    min_chars: int = MIN_REPORT_CHARS,
) -> ResearchReport:
    """Produce the research brief for one (dimension, level) pair.

    Short responses are considered degenerate and retried with a fresh
    generation slot, up to ``RESEARCH_RETRIES`` times.
    """
    last_len = 0
    for attempt in range(1 + RESEARCH_RETRIES):
        resp = backend.complete(_research_request(task, dimension, level, seed=attempt))
        body = resp.text.strip()
        last_len = len(body)
        if last_len >= min_chars:
            return ResearchReport(task_id=task.id, dimension=dimension, level=level, body=body)
        logger.warning(
            "degenerate report for %s (%d chars < %d), attempt %d",
            pair_label(dimension, level), last_len, min_chars, attempt + 1,
        )
    raise DegenerateReportError(
        f"{pair_label(dimension, level)}: report stayed below {min_chars} chars "
        f"after {1 + RESEARCH_RETRIES} attempts (last was {last_len})"
    )


def _summary_request(task: TaskSpec, report: ResearchReport, feedback: str) -> ChatRequest:
    system = (
        "You distill urban research briefs into structured sets of "
        "predictive factors."
    )
    user = (
        f"Prediction task: {task.description}\n"
        f"Research brief for {_DIMENSION_FRAMING[report.dimension]} at "
        f"{_LEVEL_FRAMING[report.level]}:\n\n{report.body}\n\n"
        'Respond with a JSON object of the form {"factors": [{"name": "...", '
        '"description": "..."}]} containing exactly 6 factors. Names must be '
        "short distinct noun phrases; each description is one measurable sentence."
    )
    if feedback:
        user += f"\n\nYour previous factor set was rejected: {feedback}. Return a corrected JSON object."
    return ChatRequest(
        system_prompt=system, user_prompt=user, response_format="structured_object"
    )


def summarize(
    report: ResearchReport,
    task: TaskSpec,
    backend: ChatBackend,
) -> FactorSet:
    """Compress a research brief into a validated six-factor set."""
    feedback = ""
    for attempt in range(1 + SUMMARY_RETRIES):
        resp = backend.complete(_summary_request(task, report, feedback))
        try:
            payload = extract_json_object(resp.text)
            raw_factors = payload.get("factors", [])
            if not isinstance(raw_factors, list):
                raise ValueError('"factors" is not a list')
            factors = tuple(
                PredictiveFactor(
                    name=str(f.get("name", "")).strip(),
                    description=str(f.get("description", "")).strip(),
                )
                for f in raw_factors
                if isinstance(f, dict)
            )
        except ValueError as exc:
            feedback = f"response was not a usable JSON object ({exc})"
            logger.warning("summary attempt %d unparseable: %s", attempt + 1, exc)
            continue
        fs = FactorSet(
            task_id=report.task_id,
            dimension=report.dimension,
            level=report.level,
            factors=factors,
        )
        violations = validate_factor_set(fs)
        if not violations:
            return fs
        feedback = "; ".join(violations)
        logger.warning("summary attempt %d rejected: %s", attempt + 1, feedback)
    raise InvalidFactorSetError(
        f"{pair_label(report.dimension, report.level)}: no valid factor set "
        f"after {1 + SUMMARY_RETRIES} attempts (last: {feedback})"
    )


def guide(
    task: TaskSpec,
    backend: ChatBackend,
    cache_path: str | Path | None = None,
    workers: int = 4,
) -> dict[tuple[Dimension, Level], FactorSet]:
    """Produce the four factor sets for a task, one per (dimension, level).

    When ``cache_path`` exists it is loaded and no backend call is made;
    otherwise the four research/summary chains run concurrently and the
    result (factor sets plus report bodies) is persisted there.
    """
    if cache_path is not None and Path(cache_path).exists():
        return load_factor_cache(cache_path, task_id=task.id)

    def one_pair(pair: tuple[Dimension, Level]) -> tuple[ResearchReport, FactorSet]:
        d, r = pair
        report = research(task, d, r, backend)
        return report, summarize(report, task, backend)

    results: dict[tuple[Dimension, Level], tuple[ResearchReport, FactorSet]] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {pair: pool.submit(one_pair, pair) for pair in PAIRS}
        errors = []
        for pair, future in futures.items():
            try:
                results[pair] = future.result()
            except Exception as exc:
                errors.append(f"{pair_label(*pair)}: {exc}")
        if errors:
            raise GuidanceError("; ".join(errors))

    factor_map = {pair: fs for pair, (_report, fs) in results.items()}
    if cache_path is not None:
        save_factor_cache(
            cache_path, task, factor_map, {pair: rep.body for pair, (rep, _fs) in results.items()}
        )
    return factor_map


def save_factor_cache(
    path: str | Path,
    task: TaskSpec,
    factor_map: dict[tuple[Dimension, Level], FactorSet],
    reports: dict[tuple[Dimension, Level], str] | None = None,
) -> None:
    doc = {
        "task": task.to_dict(),
        "pairs": [
            {
                "dimension": d.value,
                "level": r.value,
                "report": (reports or {}).get((d, r), ""),
                "factors": [f.to_dict() for f in factor_map[(d, r)].factors],
            }
            for d, r in PAIRS
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, ensure_ascii=False, indent=1), encoding="utf-8")


def load_factor_cache(
    path: str | Path, task_id: str | None = None
) -> dict[tuple[Dimension, Level], FactorSet]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    cached_task = doc["task"]["id"]
    if task_id is not None and cached_task != task_id:
        raise GuidanceError(f"factor cache {path} is for task {cached_task!r}, not {task_id!r}")
    factor_map: dict[tuple[Dimension, Level], FactorSet] = {}
    for entry in doc["pairs"]:
        d, r = Dimension(entry["dimension"]), Level(entry["level"])
        fs = FactorSet(
            task_id=cached_task,
            dimension=d,
            level=r,
            factors=tuple(PredictiveFactor.from_dict(f) for f in entry["factors"]),
        )
        violations = validate_factor_set(fs)
        if violations:
            raise GuidanceError(f"factor cache {path} invalid for {pair_label(d, r)}: {violations}")
        factor_map[(d, r)] = fs
    missing = [pair_label(d, r) for d, r in PAIRS if (d, r) not in factor_map]
    if missing:
        raise GuidanceError(f"factor cache {path} is missing pairs: {missing}")
    return factor_map


# Fixed placeholder factors for the no_factors ablation: the guided factor
# sets are replaced with this generic six-factor set for every (dimension,
# level) pair. Versioned so ablation runs stay reproducible.
PLACEHOLDER_FACTORS_VERSION = 1

GENERIC_FACTORS: tuple[PredictiveFactor, ...] = (
    PredictiveFactor("overall character", "General impression of the area around the location."),
    PredictiveFactor("activity level", "How much human activity is visible or expected."),
    PredictiveFactor("infrastructure", "State of streets, utilities and public facilities."),
    PredictiveFactor("accessibility", "How easy the location is to reach and move through."),
    PredictiveFactor("amenities", "Availability of shops, services and public amenities."),
    PredictiveFactor("environment quality", "Perceived quality of the physical surroundings."),
)


def generic_factor_map(task: TaskSpec) -> dict[tuple[Dimension, Level], FactorSet]:
    """The no_factors ablation map: the same generic set for all four pairs."""
    return {
        (d, r): FactorSet(task_id=task.id, dimension=d, level=r, factors=GENERIC_FACTORS)
        for d, r in PAIRS
    }
