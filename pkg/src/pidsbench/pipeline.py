"""Seven-stage pipeline executor on top of the stage cache.

Each stage runner reads its predecessors' artifact directories and writes its
own outputs into a staging directory; the cache commit protocol publishes
that directory under the stage digest.
"""

import json
import logging
import shutil
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from pidsbench import ledger
from pidsbench.batching import (
    apply_batching,
    build_neighbor_index,
    neighbor_k,
    read_batches,
    read_neighbors,
    wants_neighbor_index,
    write_batches,
    write_neighbors,
)
from pidsbench.cache import (
    STAGES,
    commit_stage,
    normalize_stage,
    plan_pipeline,
    stage_args,
    staging_dir_for,
)
from pidsbench.config import ConfigTree, validate_config
from pidsbench.errors import ConfigError, EvaluationError
from pidsbench.evaluate import (
    ScoreReport,
    compute_metrics,
    export_plot_data,
    read_scores,
    score_nodes,
    select_threshold,
    write_metrics,
    write_scores,
)
from pidsbench.featurize import (
    build_corpus,
    embed_node,
    embedding_method,
    feature_spec_from,
    skipgram_params,
    train_skipgram,
)
from pidsbench.ingest import (
    DatasetManifest,
    Entity,
    ParseSummary,
    ProvGraph,
    build_windows,
    find_dataset,
    load_ground_truth,
    read_events,
    read_graphs,
    split_dataset,
    write_graphs,
    write_labels,
    write_split,
)
from pidsbench.model import ModelConfig, prepare_batch, read_checkpoint, train, write_checkpoint
from pidsbench.serialize import read_tensors, write_tensors
from pidsbench.transform import apply_transforms
from pidsbench.triage import run_triage, write_triage

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class StageOutcome:
    stage: str
    digest: str
    decision: str
    artifact_dir: Path
    seconds: float = 0.0


@dataclass
class RunResult:
    run_id: str
    dataset: str
    stages: list[StageOutcome] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    metrics_path: Path | None = None

    @property
    def executed(self) -> list[str]:
        return [s.stage for s in self.stages if s.decision == "Miss"]

    def artifact_dir(self, stage: str) -> Path:
        return next(s.artifact_dir for s in self.stages if s.stage == stage)


@dataclass
class StageContext:
    cfg: ConfigTree
    manifest: DatasetManifest
    dirs: dict[str, Path] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Stage runners
# ---------------------------------------------------------------------------


def run_construction(ctx: StageContext, out: Path) -> None:
    section = ctx.cfg.section("construction")
    summary = ParseSummary()
    events = read_events(
        ctx.manifest.events_path, float(section.get("max_malformed_ratio", 0.01)), summary
    )
    windows = build_windows(
        events,
        window_minutes=int(section.get("window_minutes", 15)),
        reorder_slack_seconds=int(section.get("reorder_slack_seconds", 60)),
    )
    gt = load_ground_truth(ctx.manifest.labels_path, ctx.manifest.dataset_id)
    split = split_dataset(windows, gt, ctx.manifest.train_end, ctx.manifest.val_end)
    write_split(out / "graphs.jsonl", split)
    write_labels(out / "labels.csv", gt)
    info = {
        "dataset_id": ctx.manifest.dataset_id,
        "train_end": ctx.manifest.train_end,
        "val_end": ctx.manifest.val_end,
        "windows": {name: len(getattr(split, name)) for name in SPLITS},
        "parsed": summary.parsed,
        "skipped": summary.skipped,
    }
    (out / "split.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def run_transformation(ctx: StageContext, out: Path) -> None:
    graphs = read_graphs(ctx.dirs["construction"] / "graphs.jsonl")
    methods = ctx.cfg.get("transformation.used_methods")
    path = out / "graphs.jsonl"
    path.write_text("")
    for name in SPLITS:
        write_graphs(path, [apply_transforms(g, methods) for g in graphs[name]], split=name)


def _latest_entities(windows: list[ProvGraph]) -> dict[str, Entity]:
    """Base entity id → its attributes as last observed."""
    latest: dict[str, Entity] = {}
    for g in windows:
        for entity in g.nodes.values():
            latest[entity.id] = entity
    return dict(sorted(latest.items()))


def run_featurization(ctx: StageContext, out: Path) -> None:
    section = ctx.cfg.section("featurization")
    graphs = read_graphs(ctx.dirs["transformation"] / "graphs.jsonl")
    spec = feature_spec_from(ctx.cfg.get("construction.node_features"))
    dim = int(section.get("emb_dim", 128))
    method = embedding_method(section.get("used_method", "word2vec"))

    table = None
    if method == "skipgram":
        params = skipgram_params(section)
        train_entities = _latest_entities(graphs["train"])
        corpus = build_corpus(train_entities.values(), spec, int(params["min_count"]))
        table = train_skipgram(
            corpus,
            dim=dim,
            epochs=int(section.get("epochs", 50)),
            alpha=float(params["alpha"]),
            window=int(params["window_size"]),
            negative=int(params["negative"]),
            seed=int(section.get("seed", 0)),
        )
        write_tensors(
            out / "embeddings.tensors",
            {"vectors": table.vectors},
            {"dim": dim, "seed": table.seed, "epoch_losses": table.epoch_losses},
        )
        (out / "vocab.json").write_text(json.dumps(corpus.tokens, indent=1) + "\n")

    entities = _latest_entities([g for name in SPLITS for g in graphs[name]])
    matrix = np.stack([embed_node(e, method, table, dim, spec) for e in entities.values()])
    write_tensors(out / "features.tensors", {"features": matrix}, {"ids": list(entities), "method": method})


def run_batching(ctx: StageContext, out: Path) -> None:
    section = ctx.cfg.section("batching")
    graphs = read_graphs(ctx.dirs["transformation"] / "graphs.jsonl")
    per_split = {name: apply_batching(graphs[name], section) for name in SPLITS}
    (out / "batches.jsonl").write_text("")
    for name in SPLITS:
        write_batches(out / "batches.jsonl", name, per_split[name])

    neighbors_path = out / "neighbors.jsonl"
    neighbors_path.write_text("")
    if wants_neighbor_index(section):
        ordered = [b for name in SPLITS for b in per_split[name]]
        snapshots = build_neighbor_index(ordered, neighbor_k(section))
        offset = 0
        for name in SPLITS:
            count = len(per_split[name])
            write_neighbors(neighbors_path, name, snapshots[offset:offset + count])
            offset += count


def load_features(featurization_dir: Path) -> tuple[dict[str, np.ndarray], int]:
    tensors, meta = read_tensors(featurization_dir / "features.tensors")
    matrix = tensors["features"]
    return dict(zip(meta["ids"], matrix)), matrix.shape[1]


def _prepared(ctx: StageContext, model_cfg: ModelConfig) -> tuple[dict[str, list], int]:
    features, in_dim = load_features(ctx.dirs["featurization"])
    batches = read_batches(ctx.dirs["batching"] / "batches.jsonl")
    neighbors = read_neighbors(ctx.dirs["batching"] / "neighbors.jsonl")
    needs = model_cfg.encoder == "tgn"
    prepared = {}
    for name in SPLITS:
        snaps = neighbors.get(name) or [None] * len(batches[name])
        prepared[name] = [prepare_batch(b, features, n, needs) for b, n in zip(batches[name], snaps)]
    return prepared, in_dim


def run_training(ctx: StageContext, out: Path) -> None:
    model_cfg = ModelConfig.from_training(ctx.cfg.section("training"))
    prepared, in_dim = _prepared(ctx, model_cfg)
    checkpoints = train(prepared["train"], prepared["val"], model_cfg, in_dim)
    for ckpt in checkpoints:
        write_checkpoint(out / f"checkpoint_{ckpt.epoch}.tensors", ckpt, model_cfg, in_dim)
    losses = [{"epoch": c.epoch, "train_loss": c.train_loss, "val_loss": c.val_loss} for c in checkpoints]
    (out / "losses.json").write_text(json.dumps(losses, indent=2) + "\n")


def _checkpoint_paths(training_dir: Path) -> list[Path]:
    paths = training_dir.glob("checkpoint_*.tensors")
    return sorted(paths, key=lambda p: int(p.stem.split("_")[1]))


def run_evaluation(ctx: StageContext, out: Path) -> None:
    paths = _checkpoint_paths(ctx.dirs["training"])
    if not paths:
        raise EvaluationError(f"no checkpoints in {ctx.dirs['training']}")
    node_eval = ctx.cfg.get("evaluation.node_evaluation", {}) or {}
    reduce = node_eval.get("score_reduce", "max")
    dst_only = bool(node_eval.get("use_dst_node_loss", False))
    gt = load_ground_truth(ctx.dirs["construction"] / "labels.csv", ctx.manifest.dataset_id)

    _, model_cfg, _ = read_checkpoint(paths[0])
    prepared, _ = _prepared(ctx, model_cfg)

    epochs = []
    for path in paths:
        ckpt, _, _ = read_checkpoint(path)
        val_scores = score_nodes(ckpt.parameters, prepared["val"], model_cfg, reduce, dst_only)
        test_scores = score_nodes(ckpt.parameters, prepared["test"], model_cfg, reduce, dst_only)
        threshold = select_threshold(node_eval, val_scores, test_scores)
        report = ScoreReport(
            scores=test_scores,
            labels={n: gt.malicious.get(n) for n in test_scores},
            threshold=threshold,
            epoch=ckpt.epoch,
        )
        metrics = compute_metrics(report)
        write_metrics(out / "metrics.jsonl", ckpt.epoch, metrics)
        write_scores(out / f"scores_{ckpt.epoch}.csv", report)
        export_plot_data(
            report, gt, out / f"epoch_{ckpt.epoch}",
            bins=int(node_eval.get("histogram_bins", 50)),
            top_k=int(node_eval.get("top_k", 200)),
        )
        epochs.append({"epoch": ckpt.epoch, "threshold": threshold, "metrics": dict(metrics.as_records())})
        logger.info(
            "Epoch %d: threshold %.6f, %d detections, precision %.3f, recall %.3f",
            ckpt.epoch, threshold, metrics.tp + metrics.fp, metrics.precision, metrics.recall,
        )

    final = epochs[-1]
    summary = {
        "threshold_method": node_eval.get("threshold_method", "max_val_loss"),
        "final_epoch": final["epoch"],
        "threshold": final["threshold"],
        "metrics": final["metrics"],
        "epochs": epochs,
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def read_report(evaluation_dir: Path) -> dict[str, Any]:
    return json.loads((evaluation_dir / "report.json").read_text())


def run_triage_stage(ctx: StageContext, out: Path) -> None:
    section = ctx.cfg.section("triage")
    summary = read_report(ctx.dirs["evaluation"])
    epoch = summary["final_epoch"]
    report = read_scores(ctx.dirs["evaluation"] / f"scores_{epoch}.csv", summary["threshold"], epoch)
    result = run_triage(report, section.get("used_method", "score"), bool(section.get("use_kmeans", False)))
    write_triage(out / "triage.csv", result)


RUNNERS: dict[str, Callable[[StageContext, Path], None]] = {
    "construction": run_construction,
    "transformation": run_transformation,
    "featurization": run_featurization,
    "batching": run_batching,
    "training": run_training,
    "evaluation": run_evaluation,
    "triage": run_triage_stage,
}


# ---------------------------------------------------------------------------
# Executor
# ---------------------------------------------------------------------------


def run_pipeline(
    cfg: ConfigTree,
    dataset: str,
    *,
    cache_root: Path,
    data_dir: Path,
    restart_from: str | None = None,
    fresh_root: bool = False,
    ledger_path: Path | None = None,
    system: str = "custom",
    run_id: str | None = None,
) -> RunResult:
    """Plan and execute the seven stages for one config and dataset.

    Flow:
    1. Validate the config; violations raise ConfigError with dotted paths
    2. Locate the dataset directory and its manifest
    3. Plan every stage against the cache (Hit or Miss)
    4. Run each Miss into a staging directory and commit it
    5. Record every stage in the run ledger

    Returns:
        RunResult with per-stage decisions and the final epoch's metrics.
    """
    violations = validate_config(cfg)
    if violations:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(str(v) for v in violations))

    manifest = find_dataset(dataset, data_dir)
    cache_root = Path(cache_root)
    ledger_path = Path(ledger_path) if ledger_path else cache_root / "ledger.db"
    run_id = run_id or uuid.uuid4().hex[:12]
    first_forced = STAGES.index(normalize_stage(restart_from)) if restart_from else len(STAGES)

    plan = plan_pipeline(cfg, cache_root, dataset, restart_from=restart_from, fresh_root=fresh_root)
    ledger.init_schema(str(ledger_path))
    ledger.record_run_start(str(ledger_path), run_id, system, dataset)

    result = RunResult(run_id=run_id, dataset=dataset)
    ctx = StageContext(cfg=cfg, manifest=manifest)
    for index, (key, decision) in enumerate(plan):
        stage = key.stage_name
        started = time.monotonic()
        if decision.is_hit:
            logger.info("Stage %s hit: %s", stage, decision.artifact_dir)
        else:
            logger.info("Stage %s miss: running into %s", stage, decision.artifact_dir)
            staging = staging_dir_for(decision)
            try:
                RUNNERS[stage](ctx, staging)
                commit_stage(key, decision, staging, stage_args(cfg, stage, dataset), force=index >= first_forced)
            except Exception as e:
                shutil.rmtree(staging, ignore_errors=True)
                ledger.record_stage(str(ledger_path), run_id, stage, key.digest, decision.kind.value, "failed",
                                    time.monotonic() - started)
                ledger.record_run_end(str(ledger_path), run_id, "failed", error=str(e))
                logger.error("Stage %s failed: %s", stage, e)
                raise
        seconds = time.monotonic() - started
        ctx.dirs[stage] = decision.artifact_dir
        ledger.record_stage(str(ledger_path), run_id, stage, key.digest, decision.kind.value, "ok", seconds)
        result.stages.append(StageOutcome(stage, key.digest, decision.kind.value, decision.artifact_dir, seconds))

    evaluation_dir = ctx.dirs["evaluation"]
    result.metrics = read_report(evaluation_dir)["metrics"]
    result.metrics_path = evaluation_dir / "metrics.jsonl"
    ledger.record_run_end(str(ledger_path), run_id, "ok", metrics_path=str(result.metrics_path))
    logger.info("Run %s finished; executed %s", run_id, ", ".join(result.executed) or "nothing (all hits)")
    return result
