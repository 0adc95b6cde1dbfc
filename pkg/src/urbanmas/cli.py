"""Operator entry point: staged subcommands over a shared run configuration.

Stages mirror the pipeline layers: ``factors`` materializes the per-task
factor caches, ``ingest`` resolves location context, ``predict`` runs the
prediction pipelines, and ``evaluate`` scores predictions against ground
truth. Every command writes a manifest (config snapshot, backend mode,
dataset and cassette fingerprints) sufficient to reproduce the run in
replay mode.

Config file is JSON with the same keys as the flags; flags override the
file. Environment: URBANMAS_API_KEY, URBANMAS_API_BASE, URBANMAS_MODEL.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

from . import __version__
from .backend import (
    ChatBackend,
    LiveBackend,
    LiveConfig,
    MockBackend,
    RecordingBackend,
    ReplayBackend,
)
from .domain import (
    LocationSample,
    PAIRS,
    TaskSpec,
    builtin_task,
    load_samples,
    save_samples,
)
from .errors import ConfigError, EnrichmentError, UrbanMasError
from .evaluation import (
    load_ground_truth_csv,
    render_report_table,
    rescale_to_unit_interval_times_ten,
    score_outcome,
    write_reports_csv,
)
from .geo import GeoClient, IngestConfig
from .guidance import guide
from .pipeline import (
    GUIDED_VARIANTS,
    VARIANTS,
    load_predictions,
    run_predictions,
    write_audit,
    write_predictions,
    write_similarity_log,
)
from .reliability import ReliabilityConfig

logger = logging.getLogger(__name__)

BACKEND_MODES = ("live", "mock", "replay", "record")


@dataclass
class RunConfig:
    """Resolved configuration for one CLI invocation."""

    backend: str = "mock"
    dataset: str = ""
    tasks: tuple[str, ...] = ("running_amount",)
    custom_tasks: tuple[TaskSpec, ...] = ()
    variants: tuple[str, ...] = ("full",)
    workers: int = 4
    offline: bool = False
    cassette: str = ""
    record_source: str = "live"
    out_dir: str = "runs/out"
    cache_dir: str = "runs/geocache"
    factor_dir: str = "runs/factors"
    seed: int = 0
    poi_radius_m: float = 300.0
    poi_limit: int = 25
    reliability: ReliabilityConfig = field(default_factory=ReliabilityConfig)
    model: str | None = None
    api_base: str | None = None
    temperature: float | None = None
    top_p: float | None = None
    requests_per_minute: float = 60.0
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if self.backend not in BACKEND_MODES:
            raise ConfigError(f"backend must be one of {BACKEND_MODES}, got {self.backend!r}")
        if self.record_source not in ("live", "mock"):
            raise ConfigError("record_source must be 'live' or 'mock'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(f"unknown variants {unknown} (choose from {VARIANTS})")
        if self.backend in ("replay", "record") and not self.cassette:
            raise ConfigError(f"backend {self.backend!r} requires --cassette")

    def resolve_tasks(self) -> list[TaskSpec]:
        custom = {t.id: t for t in self.custom_tasks}
        resolved = []
        for task_id in self.tasks:
            try:
                resolved.append(custom.get(task_id) or builtin_task(task_id))
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if not resolved:
            raise ConfigError("no tasks selected")
        return resolved

    def snapshot(self) -> dict:
        data = asdict(self)
        data["custom_tasks"] = [t.to_dict() for t in self.custom_tasks]
        data["reliability"] = self.reliability.to_dict()
        return data


def load_config(path: str | Path | None, overrides: dict) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus CLI overrides."""
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    data.update({k: v for k, v in overrides.items() if v is not None})

    custom_tasks = tuple(TaskSpec.from_dict(t) for t in data.pop("custom_tasks", ()))
    reliability = ReliabilityConfig.from_dict(data.pop("reliability", {}))
    tasks = data.pop("tasks", ("running_amount",))
    if isinstance(tasks, str):
        tasks = tuple(t.strip() for t in tasks.split(",") if t.strip())
    variants = data.pop("variants", ("full",))
    if isinstance(variants, str):
        variants = tuple(v.strip() for v in variants.split(",") if v.strip())

    known = {f.name for f in RunConfig.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(
        custom_tasks=custom_tasks,
        reliability=reliability,
        tasks=tuple(tasks),
        variants=tuple(variants),
        **data,
    )


def make_backend(cfg: RunConfig) -> ChatBackend:
    if cfg.backend == "mock":
        return MockBackend()
    if cfg.backend == "replay":
        return ReplayBackend(cfg.cassette)
    live_cfg = LiveConfig.from_env(
        model=cfg.model,
        api_base=cfg.api_base,
        temperature=cfg.temperature,
        top_p=cfg.top_p,
        requests_per_minute=cfg.requests_per_minute,
        max_in_flight=cfg.max_in_flight,
    )
    if cfg.backend == "live":
        return LiveBackend(live_cfg)
    inner: ChatBackend = MockBackend() if cfg.record_source == "mock" else LiveBackend(live_cfg)
    return RecordingBackend(inner, cfg.cassette)


def _sha256_file(path: str | Path) -> str:
    p = Path(path)
    if not path or not p.is_file():
        return ""
    return hashlib.sha256(p.read_bytes()).hexdigest()


def write_manifest(cfg: RunConfig, command: str) -> Path:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "backend_mode": cfg.backend,
        "seed": cfg.seed,
        "dataset_sha256": _sha256_file(cfg.dataset),
        "cassette_sha256": _sha256_file(cfg.cassette),
        "config": cfg.snapshot(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return path


def _ingest_config(cfg: RunConfig) -> IngestConfig:
    return IngestConfig(
        cache_dir=Path(cfg.cache_dir),
        poi_radius_m=cfg.poi_radius_m,
        poi_limit=cfg.poi_limit,
        offline=cfg.offline,
    )


def _load_dataset(cfg: RunConfig) -> list[LocationSample]:
    if not cfg.dataset:
        raise ConfigError("--dataset is required for this command")
    samples = load_samples(cfg.dataset)
    if not samples:
        raise ConfigError(f"dataset {cfg.dataset} contains no samples")
    return samples


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_factors(cfg: RunConfig) -> int:
    backend = make_backend(cfg)
    write_manifest(cfg, "factors")
    for task in cfg.resolve_tasks():
        cache_path = Path(cfg.factor_dir) / f"factors_{task.id}.json"
        had_cache = cache_path.exists()
        factor_map = guide(task, backend, cache_path=cache_path, workers=cfg.workers)
        source = "cache" if had_cache else cfg.backend
        print(f"task={task.id} (from {source})")
        for d, r in PAIRS:
            fs = factor_map[(d, r)]
            print(f"  [{d.value}, {r.value}]")
            for i, factor in enumerate(fs.factors, 1):
                print(f"    {i}. {factor.name}: {factor.description}")
    return 0


def cmd_ingest(cfg: RunConfig) -> int:
    samples = _load_dataset(cfg)
    client = GeoClient(_ingest_config(cfg))
    write_manifest(cfg, "ingest")

    enriched: dict[str, LocationSample] = {}
    hard_failures: dict[str, str] = {}

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        futures = {s.id: pool.submit(client.enrich, s) for s in samples}
        for sample in samples:
            try:
                enriched[sample.id] = futures[sample.id].result()
            except EnrichmentError as exc:
                hard_failures[sample.id] = str(exc)
                enriched[sample.id] = sample

    out_path = Path(cfg.out_dir) / "enriched.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_samples((enriched[s.id] for s in samples), out_path)

    with_address = sum(1 for s in enriched.values() if s.address)
    with_pois = sum(1 for s in enriched.values() if s.pois)
    total_requests = client.cache_hits + client.cache_misses
    hit_pct = 100.0 * client.cache_hits / total_requests if total_requests else 0.0
    print(f"ingested {len(samples)} sample(s) -> {out_path}")
    print(f"  with address: {with_address}; with POIs: {with_pois}")
    print(
        f"  cache hits: {client.cache_hits}/{total_requests} ({hit_pct:.0f}%); "
        f"network calls: {client.network_calls}"
    )
    if hard_failures:
        print(f"  failed completely: {len(hard_failures)}: {sorted(hard_failures)}")
    return 1 if len(hard_failures) == len(samples) else 0


def cmd_predict(cfg: RunConfig) -> int:
    samples = _load_dataset(cfg)
    tasks = cfg.resolve_tasks()
    backend = make_backend(cfg)
    write_manifest(cfg, "predict")

    factor_maps = {}
    if any(v in GUIDED_VARIANTS for v in cfg.variants):
        from .guidance import load_factor_cache

        for task in tasks:
            cache_path = Path(cfg.factor_dir) / f"factors_{task.id}.json"
            if not cache_path.exists():
                raise ConfigError(
                    f"no factor cache for task {task.id!r} at {cache_path}; "
                    f"run `urbanmas factors --tasks {task.id}` first"
                )
            factor_maps[task.id] = load_factor_cache(cache_path, task_id=task.id)

    outcome = run_predictions(
        samples, tasks, cfg.variants, backend, cfg.reliability, factor_maps, workers=cfg.workers
    )

    out_dir = Path(cfg.out_dir)
    write_predictions(outcome.predictions, out_dir / "predictions.jsonl")
    write_audit(outcome, out_dir / "audit")
    write_similarity_log(outcome, out_dir / "similarity_reports.jsonl")

    print(
        f"predicted {len(outcome.predictions)} (location, task, variant) job(s) "
        f"-> {out_dir / 'predictions.jsonl'}"
    )
    if outcome.clamp_count:
        print(f"  clamped values: {outcome.clamp_count}")
    if outcome.failures:
        print(f"  failed jobs: {len(outcome.failures)} (excluded)")
        for failure in outcome.failures:
            print(
                f"    {failure['location_id']}/{failure['task_id']}/{failure['variant']}: "
                f"{failure['error']}"
            )
    return 1 if outcome.failures else 0


def cmd_evaluate(cfg: RunConfig, predictions_path: str | None, truth_path: str | None,
                 rescale_truth: bool) -> int:
    pred_file = Path(predictions_path or (Path(cfg.out_dir) / "predictions.jsonl"))
    if not pred_file.is_file():
        raise ConfigError(f"predictions file not found: {pred_file}")
    predictions = load_predictions(pred_file)
    if not predictions:
        raise ConfigError(f"no predictions in {pred_file}")

    if truth_path:
        truths = load_ground_truth_csv(truth_path)
        if rescale_truth:
            by_task: dict[str, list[tuple[str, float]]] = {}
            for (loc, task_id), value in truths.items():
                by_task.setdefault(task_id, []).append((loc, value))
            truths = {}
            for task_id, rows in by_task.items():
                rescaled = rescale_to_unit_interval_times_ten([v for _, v in rows])
                truths.update({(loc, task_id): v for (loc, _), v in zip(rows, rescaled)})
        out_of_range = {
            key: v for key, v in truths.items() if not 0.0 <= v <= 10.0
        }
        if out_of_range:
            raise ConfigError(
                f"{len(out_of_range)} ground-truth value(s) outside [0, 10]; "
                "pass --rescale-truth to min-max rescale raw values"
            )
    else:
        samples = _load_dataset(cfg)
        truths = {
            (s.id, task_id): value for s in samples for task_id, value in s.ground_truth.items()
        }
    if not truths:
        raise ConfigError("no ground truth available (dataset has none and no --truth given)")

    reports = score_outcome(predictions, truths)
    write_manifest(cfg, "evaluate")
    out_dir = Path(cfg.out_dir)
    write_reports_csv(reports, out_dir / "reports.csv")
    table = render_report_table(reports)
    (out_dir / "reports.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--backend", choices=BACKEND_MODES, help="chat backend mode")
    parser.add_argument("--dataset", help="location samples (line-delimited JSON)")
    parser.add_argument("--tasks", help="comma-separated task ids")
    parser.add_argument(
        "--variant", action="append", dest="variants", choices=VARIANTS,
        help="pipeline variant (repeatable)",
    )
    parser.add_argument("--offline", action="store_true", default=None,
                        help="serve geo data from cache only; never touch the network")
    parser.add_argument("--cassette", help="cassette path for replay/record backends")
    parser.add_argument("--out", dest="out_dir", help="run output directory")
    parser.add_argument("--workers", type=int, help="worker pool width")
    parser.add_argument("--cache-dir", dest="cache_dir", help="geo cache directory")
    parser.add_argument("--factor-dir", dest="factor_dir", help="factor cache directory")
    parser.add_argument("--record-source", dest="record_source", choices=("live", "mock"),
                        help="inner backend for record mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="urbanmas",
        description="Multi-agent zero-shot prediction pipeline for human-centered urban tasks.",
    )
    parser.add_argument("--version", action="version", version=f"urbanmas {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_factors = sub.add_parser("factors", help="research and cache predictive factor sets")
    _add_common(p_factors)

    p_ingest = sub.add_parser("ingest", help="resolve location context (address, POIs, imagery)")
    _add_common(p_ingest)

    p_predict = sub.add_parser("predict", help="run prediction pipelines")
    _add_common(p_predict)

    p_eval = sub.add_parser("evaluate", help="score predictions against ground truth")
    _add_common(p_eval)
    p_eval.add_argument("--predictions", help="predictions file (default: <out>/predictions.jsonl)")
    p_eval.add_argument("--truth", help="ground-truth CSV (location_id, task_id, raw_value)")
    p_eval.add_argument("--rescale-truth", action="store_true",
                        help="min-max rescale raw truth values onto [0, 10]")

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    args = build_parser().parse_args(argv)
    overrides = {
        key: getattr(args, key, None)
        for key in (
            "backend", "dataset", "tasks", "variants", "offline", "cassette",
            "out_dir", "workers", "cache_dir", "factor_dir", "record_source",
        )
    }
    if overrides.get("variants") is not None:
        overrides["variants"] = tuple(overrides["variants"])
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "factors":
            return cmd_factors(cfg)
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.predictions, args.truth, args.rescale_truth)
        raise ConfigError(f"unknown command {args.command!r}")
    except UrbanMasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
