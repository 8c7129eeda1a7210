"""Node-level anomaly scoring, thresholding and detection metrics."""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from pidsbench.errors import EvaluationError, ModelError
from pidsbench.ingest import GroundTruth
from pidsbench.model import BatchArrays, ModelConfig, forward, params_from_arrays

logger = logging.getLogger(__name__)

REDUCERS = ("max", "mean")
BENIGN_SERIES = "benign"


@dataclass
class ScoreReport:
    scores: dict[str, float]
    labels: dict[str, int | None]
    threshold: float
    epoch: int

    def detections(self) -> list[str]:
        return sorted(n for n, s in self.scores.items() if s > self.threshold)


@dataclass
class MetricSet:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    average_precision: float | None = None
    auc_roc: float | None = None
    discrimination: float | None = None
    per_attack_recall: dict[int, float] = field(default_factory=dict)

    def as_records(self) -> list[tuple[str, float]]:
        records: list[tuple[str, float]] = [
            ("tp", self.tp), ("fp", self.fp), ("tn", self.tn), ("fn", self.fn),
            ("precision", self.precision), ("recall", self.recall), ("f1", self.f1),
        ]
        for name in ("average_precision", "auc_roc", "discrimination"):
            value = getattr(self, name)
            if value is not None:
                records.append((name, value))
        for attack, value in sorted(self.per_attack_recall.items()):
            records.append((f"recall_attack_{attack}", value))
        return records


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def score_nodes(
    params: dict[str, np.ndarray],
    batches: Iterable[BatchArrays],
    cfg: ModelConfig,
    reduce: str = "max",
    use_dst_only: bool = False,
) -> dict[str, float]:
    """Reduce every loss assigned to a node across all batches into one score.

    Edge losses go to both endpoints (destination only with use_dst_only);
    node objectives use per-node losses. Nodes that receive no loss score 0.
    """
    if reduce not in REDUCERS:
        raise EvaluationError(f"unknown score reducer {reduce!r}")
    model = params_from_arrays(params)
    totals: dict[str, float] = {}
    counts: dict[str, int] = {}

    def assign(node: str, loss: float) -> None:
        if reduce == "max":
            totals[node] = max(totals.get(node, loss), loss)
        else:
            totals[node] = totals.get(node, 0.0) + loss
        counts[node] = counts.get(node, 0) + 1

    seen: set[str] = set()
    for arrays in batches:
        seen.update(arrays.base_ids)
        try:
            result = forward(arrays, model, cfg)
        except ModelError as e:
            raise EvaluationError(f"cannot score batch: {e}") from e
        if result.edge_rows is not None:
            for row, loss in zip(result.edge_rows, result.item_losses):
                if not use_dst_only:
                    assign(arrays.base_ids[arrays.src[row]], float(loss))
                assign(arrays.base_ids[arrays.dst[row]], float(loss))
        else:
            for base, loss in zip(arrays.base_ids, result.item_losses):
                assign(base, float(loss))

    scores = {}
    for node in sorted(seen):
        if node not in counts:
            scores[node] = 0.0
        elif reduce == "mean":
            scores[node] = totals[node] / counts[node]
        else:
            scores[node] = totals[node]
    return scores


# ---------------------------------------------------------------------------
# Thresholds
# ---------------------------------------------------------------------------


def threshold_fixed(v: float) -> float:
    if v < 0:
        raise EvaluationError(f"fixed threshold must be non-negative, got {v}")
    return float(v)


def threshold_max_val(val_scores: dict[str, float]) -> float:
    if not val_scores:
        raise EvaluationError("max_val_loss threshold needs validation scores")
    return float(max(val_scores.values()))


def threshold_mean_val(val_scores: dict[str, float]) -> float:
    if not val_scores:
        raise EvaluationError("mean_val_loss threshold needs validation scores")
    return float(np.mean(list(val_scores.values())))


def threshold_kmeans(scores: dict[str, float] | Iterable[float], k: int = 2, iters: int = 100,
                     top_k: int = 0) -> float:
    """Two-cluster 1-D k-means seeded at min and max; threshold is the centroid midpoint.

    With top_k > 0 only the top_k highest scores are clustered.
    """
    if k != 2:
        raise EvaluationError(f"only k=2 is supported, got {k}")
    values = np.sort(np.fromiter(scores.values() if isinstance(scores, dict) else scores, dtype=np.float64))
    if top_k > 0:
        values = values[-top_k:]
    if len(np.unique(values)) < k:
        raise EvaluationError(f"k-means thresholding needs at least {k} distinct scores")

    c0, c1 = float(values[0]), float(values[-1])
    assignment = None
    for _ in range(max(iters, 1)):
        midpoint = (c0 + c1) / 2
        new_assignment = values > midpoint
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        c0 = float(values[~assignment].mean())
        c1 = float(values[assignment].mean())
    return (c0 + c1) / 2


def select_threshold(node_eval: dict[str, Any], val_scores: dict[str, float],
                     test_scores: dict[str, float]) -> float:
    method = node_eval.get("threshold_method", "max_val_loss")
    iters = int(node_eval.get("kmeans_iters", 100))
    top_k = int(node_eval.get("kmeans_top_k", 0))
    if method == "fixed":
        return threshold_fixed(float(node_eval.get("fixed_threshold", 0.0)))
    if method == "kmeans":
        return threshold_kmeans(test_scores, iters=iters, top_k=top_k)
    if method == "max_val_loss":
        threshold = threshold_max_val(val_scores)
    elif method == "mean_val_loss":
        threshold = threshold_mean_val(val_scores)
    else:
        raise EvaluationError(f"unknown threshold method {method!r}")
    if node_eval.get("use_kmeans"):
        try:
            threshold = max(threshold, threshold_kmeans(test_scores, iters=iters, top_k=top_k))
        except EvaluationError as e:
            logger.warning("k-means refinement skipped: %s", e)
    return threshold


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def normalize_scores(scores: dict[str, float]) -> dict[str, float]:
    """Min-max normalization; a zero range maps every score to 1.0."""
    if not scores:
        return {}
    lo, hi = min(scores.values()), max(scores.values())
    if hi == lo:
        return {n: 1.0 for n in scores}
    return {n: (s - lo) / (hi - lo) for n, s in scores.items()}


def ranking(scores: dict[str, float]) -> list[str]:
    """Nodes by descending score, ties by node id."""
    return sorted(scores, key=lambda n: (-scores[n], n))


def average_precision(scores: dict[str, float], positives: set[str]) -> float:
    hits = 0
    total = 0.0
    for k, node in enumerate(ranking(scores), start=1):
        if node in positives:
            hits += 1
            total += hits / k
    return total / len(positives)


def auc_roc(scores: dict[str, float], positives: set[str]) -> float:
    """Mann-Whitney form with average ranks; ties count one half."""
    nodes = sorted(scores)
    values = np.array([scores[n] for n in nodes])
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    avg_rank = np.cumsum(counts) - (counts - 1) / 2.0
    ranks = avg_rank[inverse]
    is_pos = np.array([n in positives for n in nodes])
    n_pos, n_neg = int(is_pos.sum()), int((~is_pos).sum())
    return float((ranks[is_pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(report: ScoreReport) -> MetricSet:
    positives = {n for n, label in report.labels.items() if label is not None and n in report.scores}
    negatives = set(report.scores) - positives
    detected = set(report.detections())

    tp = len(detected & positives)
    fp = len(detected & negatives)
    fn = len(positives) - tp
    tn = len(negatives) - fp
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    metrics = MetricSet(
        tp=tp, fp=fp, tn=tn, fn=fn,
        precision=precision, recall=recall,
        f1=_ratio(2 * precision * recall, precision + recall),
    )

    attacks: dict[int, list[str]] = {}
    for node in positives:
        attacks.setdefault(report.labels[node], []).append(node)
    metrics.per_attack_recall = {
        attack: len(set(nodes) & detected) / len(nodes) for attack, nodes in sorted(attacks.items())
    }

    if positives and negatives:
        metrics.average_precision = average_precision(report.scores, positives)
        metrics.auc_roc = auc_roc(report.scores, positives)
        norm = normalize_scores(report.scores)
        metrics.discrimination = float(
            np.mean([norm[n] for n in positives]) - np.mean([norm[n] for n in negatives])
        )
    else:
        logger.warning("Degenerate labels (%d positive, %d negative); ranking metrics omitted",
                       len(positives), len(negatives))
    return metrics


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def write_metrics(path: str | Path, epoch: int, metrics: MetricSet) -> None:
    with open(path, "a", encoding="utf-8") as f:
        for name, value in metrics.as_records():
            f.write(json.dumps({"epoch": epoch, "metric": name, "value": value}, sort_keys=True) + "\n")


def read_metrics(path: str | Path) -> dict[int, dict[str, float]]:
    out: dict[int, dict[str, float]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out.setdefault(rec["epoch"], {})[rec["metric"]] = rec["value"]
    return out


def write_scores(path: str | Path, report: ScoreReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["node_id", "score", "label"])
        for node in sorted(report.scores):
            label = report.labels.get(node)
            writer.writerow([node, repr(report.scores[node]), "" if label is None else label])


def read_scores(path: str | Path, threshold: float, epoch: int) -> ScoreReport:
    scores: dict[str, float] = {}
    labels: dict[str, int | None] = {}
    with open(path, "r", newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            scores[row["node_id"]] = float(row["score"])
            labels[row["node_id"]] = int(row["label"]) if row["label"] else None
    return ScoreReport(scores=scores, labels=labels, threshold=threshold, epoch=epoch)


def export_plot_data(report: ScoreReport, gt: GroundTruth, out_dir: str | Path,
                     bins: int = 50, top_k: int = 200) -> tuple[Path, Path]:
    """Per-attack histograms of normalized scores and the top-K ranked node table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    norm = normalize_scores(report.scores)
    edges = np.linspace(0.0, 1.0, bins + 1)

    series: dict[str, list[float]] = {BENIGN_SERIES: []}
    for attack in gt.attack_ids:
        series[f"attack_{attack}"] = []
    for node, value in norm.items():
        label = report.labels.get(node)
        series.setdefault(BENIGN_SERIES if label is None else f"attack_{label}", []).append(value)

    hist_path = out_dir / "score_histogram.csv"
    with open(hist_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["series", "bin_start", "bin_end", "count"])
        for name, values in series.items():
            counts, _ = np.histogram(values, bins=edges)
            for i, count in enumerate(counts):
                writer.writerow([name, f"{edges[i]:.4f}", f"{edges[i + 1]:.4f}", int(count)])

    top_path = out_dir / "top_ranked.csv"
    with open(top_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["rank", "node_id", "score", "label"])
        for rank, node in enumerate(ranking(report.scores)[:top_k], start=1):
            label = report.labels.get(node)
            writer.writerow([rank, node, f"{norm[node]:.6f}", BENIGN_SERIES if label is None else label])
    return hist_path, top_path
