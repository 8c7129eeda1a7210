"""Tests for pidsbench.triage."""

import csv

from pidsbench.evaluate import ScoreReport
from pidsbench.triage import run_triage, triage_by_score, write_triage


def report():
    return ScoreReport(
        scores={"n1": 0.2, "n2": 5.0, "n3": 3.0, "n4": 3.0, "n5": 1.0},
        labels={},
        threshold=1.0,
        epoch=1,
    )


class TestTriage:
    def test_orders_detections_by_score(self):
        assert triage_by_score(report()).ranked == [("n2", 5.0), ("n3", 3.0), ("n4", 3.0)]

    def test_threshold_is_exclusive(self):
        assert "n5" not in dict(triage_by_score(report()).ranked)

    def test_none(self):
        assert run_triage(report(), "none").ranked == []

    def test_depimpact_falls_back_to_score(self, caplog):
        result = run_triage(report(), "depimpact", use_kmeans=True)
        assert result.ranked == triage_by_score(report()).ranked
        assert "depimpact" in caplog.text
        assert "use_kmeans" in caplog.text

    def test_write(self, tmp_path):
        path = tmp_path / "triage.csv"
        write_triage(path, run_triage(report()))
        with open(path) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["rank", "node_id", "score"]
        assert rows[1] == ["1", "n2", "5.0"]
        assert len(rows) == 4
