"""Detection prioritization."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

from pidsbench.evaluate import ScoreReport, ranking

logger = logging.getLogger(__name__)


@dataclass
class TriageResult:
    ranked: list[tuple[str, float]] = field(default_factory=list)


def triage_by_score(report: ScoreReport) -> TriageResult:
    """Above-threshold nodes by descending score, ties by node id."""
    detected = {n: s for n, s in report.scores.items() if s > report.threshold}
    return TriageResult(ranked=[(n, detected[n]) for n in ranking(detected)])


def run_triage(report: ScoreReport, method: str = "score", use_kmeans: bool = False) -> TriageResult:
    if use_kmeans:
        logger.warning("triage.use_kmeans is not supported and is ignored")
    if method == "none":
        return TriageResult()
    if method == "depimpact":
        logger.warning("depimpact triage is not available; ranking detections by score")
    return triage_by_score(report)


def write_triage(path: str | Path, result: TriageResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["rank", "node_id", "score"])
        for rank, (node, score) in enumerate(result.ranked, start=1):
            writer.writerow([rank, node, repr(score)])
