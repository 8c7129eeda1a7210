"""Multi-run experiments over the pipeline, plus lookup of tuned overlays."""

import itertools
import json
import logging
import os
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from pidsbench.cache import STAGES, normalize_stage
from pidsbench.config import ConfigTree, OverrideSet, apply_overrides, load_config
from pidsbench.errors import ConfigError, PidsbenchError
from pidsbench.pipeline import run_pipeline

logger = logging.getLogger(__name__)

SWEEP_METHODS = ("grid",)
REPORT_NAME = "sweep_report.jsonl"
INSTABILITY_NAME = "instability.jsonl"


@dataclass(frozen=True)
class SweepSpec:
    method: str
    parameters: dict[str, list[Any]]

    def __post_init__(self) -> None:
        if self.method not in SWEEP_METHODS:
            raise ConfigError(f"unsupported sweep method {self.method!r}; allowed: grid", "method")
        if not self.parameters:
            raise ConfigError("sweep needs at least one parameter", "parameters")

    @classmethod
    def from_file(cls, path: str | Path) -> "SweepSpec":
        """Read a sweep file: ``method`` plus ``parameters`` mapping dotted paths to ``values``."""
        path = Path(path)
        if not path.is_file():
            raise ConfigError("sweep file not found", str(path))
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"failed to parse sweep file: {e}", str(path)) from e
        if not isinstance(doc, dict) or not isinstance(doc.get("parameters"), dict):
            raise ConfigError("sweep file needs a 'parameters' mapping", str(path))

        parameters: dict[str, list[Any]] = {}
        for name, entry in doc["parameters"].items():
            values = entry.get("values") if isinstance(entry, dict) else entry
            if not isinstance(values, list):
                raise ConfigError("parameter needs a 'values' list", f"parameters.{name}")
            parameters[str(name)] = values
        return cls(method=str(doc.get("method", "grid")), parameters=parameters)


@dataclass(frozen=True)
class MetricAggregate:
    metric_name: str
    mean: float
    std: float
    std_rel: float | None

    def as_record(self) -> dict[str, Any]:
        return {"metric": self.metric_name, "mean": self.mean, "std": self.std, "std_rel": self.std_rel}


@dataclass
class SweepRun:
    index: int
    overrides: dict[str, str]
    status: str
    metrics: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    def as_record(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "overrides": self.overrides,
            "status": self.status,
            "metrics": self.metrics,
            "error": self.error,
        }


@dataclass
class SweepReport:
    sweep_id: str
    directory: Path
    runs: list[SweepRun] = field(default_factory=list)

    @property
    def report_path(self) -> Path:
        return self.directory / REPORT_NAME

    def by_status(self, status: str) -> list[SweepRun]:
        return [r for r in self.runs if r.status == status]


# ---------------------------------------------------------------------------
# Grid sweeps
# ---------------------------------------------------------------------------


def render_value(value: Any) -> str:
    """Render a sweep value the way it would be typed on the command line."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(render_value(v) for v in value)
    return str(value)


def expand_grid(spec: SweepSpec) -> list[OverrideSet]:
    """Cartesian product over the parameters in lexicographic key order."""
    keys = sorted(spec.parameters)
    for key in keys:
        if not spec.parameters[key]:
            raise ConfigError("empty value list", f"parameters.{key}")
    combos = itertools.product(*(spec.parameters[k] for k in keys))
    return [OverrideSet(tuple((k, render_value(v)) for k, v in zip(keys, combo))) for combo in combos]


def _claim(path: Path) -> bool:
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
    except FileExistsError:
        return False
    with os.fdopen(fd, "w") as f:
        f.write(f"{os.getpid()}\n")
    return True


def _write_json(path: Path, record: dict[str, Any]) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(json.dumps(record, sort_keys=True) + "\n")
    os.replace(tmp, path)


def run_sweep(
    base_cfg: ConfigTree,
    spec: SweepSpec,
    dataset: str,
    *,
    cache_root: Path,
    data_dir: Path,
    sweep_id: str | None = None,
    system: str = "custom",
    ledger_path: Path | None = None,
) -> SweepReport:
    """Run every override set of the grid against one shared cache root.

    Flow:
    1. Create the sweep directory, or join it when sweep_id names an existing one
    2. Claim each override set with an exclusive claim file; sets claimed by
       another process are skipped
    3. Run the pipeline for each claimed set, recording failures and moving on
    4. Write sweep_report.jsonl from every finished run result, ordered by index
    """
    sweep_id = sweep_id or f"{time.strftime('%Y%m%d-%H%M%S')}-{uuid.uuid4().hex[:6]}"
    directory = Path(cache_root) / "sweeps" / sweep_id
    (directory / "claims").mkdir(parents=True, exist_ok=True)
    (directory / "runs").mkdir(exist_ok=True)

    grid = expand_grid(spec)
    logger.info("Sweep %s: %d runs in %s", sweep_id, len(grid), directory)
    for index, overrides in enumerate(grid):
        if not _claim(directory / "claims" / f"{index}.claim"):
            logger.info("Sweep run %d already claimed; skipping", index)
            continue
        run = SweepRun(index=index, overrides=overrides.as_dict(), status="ok")
        try:
            cfg = apply_overrides(base_cfg, overrides)
            result = run_pipeline(
                cfg, dataset, cache_root=cache_root, data_dir=data_dir,
                ledger_path=ledger_path, system=system,
            )
            run.metrics = result.metrics
            logger.info("Sweep run %d ok (%s)", index, ", ".join(f"{k}={v}" for k, v in overrides))
        except PidsbenchError as e:
            run.status = "failed"
            run.error = str(e)
            logger.warning("Sweep run %d failed: %s", index, e)
        except Exception as e:
            run.status = "failed"
            run.error = f"{type(e).__name__}: {e}"
            logger.exception("Sweep run %d crashed", index)
        _write_json(directory / "runs" / f"{index}.json", run.as_record())

    report = SweepReport(sweep_id=sweep_id, directory=directory)
    for index, overrides in enumerate(grid):
        path = directory / "runs" / f"{index}.json"
        if path.is_file():
            rec = json.loads(path.read_text())
            report.runs.append(SweepRun(rec["index"], rec["overrides"], rec["status"], rec["metrics"], rec["error"]))
        else:
            report.runs.append(SweepRun(index, overrides.as_dict(), "pending"))
    with open(report.report_path, "w", encoding="utf-8") as f:
        for run in report.runs:
            f.write(json.dumps(run.as_record(), sort_keys=True) + "\n")
    return report


def read_sweep_report(path: str | Path) -> list[dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# Instability
# ---------------------------------------------------------------------------


def aggregate_metrics(runs: list[dict[str, float]]) -> list[MetricAggregate]:
    """Mean, population std and relative std (percent) of each metric across runs."""
    names = sorted({name for run in runs for name in run})
    out: list[MetricAggregate] = []
    for name in names:
        values = np.array([run[name] for run in runs if run.get(name) is not None], dtype=np.float64)
        if values.size == 0:
            continue
        mean = float(values.mean())
        std = float(values.std())
        out.append(MetricAggregate(name, mean, std, 100.0 * std / mean if mean != 0 else None))
    return out


def run_n_times(
    cfg: ConfigTree,
    dataset: str,
    *,
    cache_root: Path,
    data_dir: Path,
    iterations: int = 5,
    restart_from: str = "training",
    out_dir: Path | None = None,
    system: str = "custom",
    ledger_path: Path | None = None,
) -> list[MetricAggregate]:
    """Rerun the pipeline with seeds base+i from restart_from and aggregate the metrics."""
    if iterations < 2:
        raise ConfigError(f"iterations must be at least 2, got {iterations}", "experiment.run_n_times.iterations")
    stage = normalize_stage(restart_from)
    if STAGES.index(stage) < STAGES.index("training"):
        logger.warning("restart_from=%s re-derives %s and later stages on every iteration", restart_from, stage)

    base_seed = int(cfg.get("training.seed", 0))
    runs: list[dict[str, float]] = []
    for i in range(iterations):
        seeded = apply_overrides(cfg, OverrideSet((("training.seed", str(base_seed + i)),)))
        result = run_pipeline(
            seeded, dataset, cache_root=cache_root, data_dir=data_dir,
            restart_from=stage, ledger_path=ledger_path, system=system,
        )
        logger.info("Iteration %d/%d (seed %d) finished", i + 1, iterations, base_seed + i)
        runs.append(result.metrics)

    aggregates = aggregate_metrics(runs)
    out_dir = Path(out_dir) if out_dir else Path(cache_root) / "experiments" / f"run_n_times-{uuid.uuid4().hex[:8]}"
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / INSTABILITY_NAME, "w", encoding="utf-8") as f:
        for agg in aggregates:
            f.write(json.dumps(agg.as_record(), sort_keys=True) + "\n")
    logger.info("Instability report: %s", out_dir / INSTABILITY_NAME)
    return aggregates


# ---------------------------------------------------------------------------
# Tuned overlays
# ---------------------------------------------------------------------------


def tuned_path(system: str, dataset: str, config_dir: str | Path) -> Path:
    return Path(config_dir) / "tuned" / dataset / f"{system}.yml"


def resolve_tuned(system: str, dataset: str, config_dir: str | Path) -> ConfigTree:
    """Load the tuned overlay for (system, dataset); merge it with ``merge_overlay``."""
    path = tuned_path(system, dataset, config_dir)
    if not path.is_file():
        raise ConfigError(f"no tuned configuration for {system} on {dataset}", str(path))
    return load_config(path, config_dir)
