"""Tests for the synthetic dataset generator."""

import pytest
import yaml

from pidsbench.errors import IngestError
from pidsbench.ingest import build_windows, load_ground_truth, read_events, split_dataset
from pidsbench.synthetic import (
    BASE_TS,
    BEACON_PERIOD_NS,
    BEACON_TEMPLATE,
    NS_PER_HOUR,
    _entity_id,
    _netflow,
    generate_synthetic,
)


@pytest.fixture
def generated(tmp_path):
    events, labels = generate_synthetic(seed=3, n_benign_events=1200, n_attack_chains=2, span_hours=3,
                                        out_dir=tmp_path / "DS", dataset_id="DS")
    return tmp_path / "DS", events, labels


class TestGenerateSynthetic:
    def test_files_written(self, generated):
        directory, events, labels = generated
        assert events.is_file() and labels.is_file()
        manifest = yaml.safe_load((directory / "dataset.yml").read_text())
        assert manifest["dataset_id"] == "DS"
        assert manifest["train_end"] == BASE_TS + NS_PER_HOUR
        assert manifest["val_end"] == BASE_TS + 2 * NS_PER_HOUR

    def test_event_count(self, generated):
        _, events, _ = generated
        assert len(list(read_events(events))) == 1200 + 2 * 4

    def test_deterministic(self, tmp_path):
        a = generate_synthetic(11, 1000, 1, 3, tmp_path / "a")
        b = generate_synthetic(11, 1000, 1, 3, tmp_path / "b")
        assert a[0].read_bytes() == b[0].read_bytes()
        assert a[1].read_bytes() == b[1].read_bytes()

    def test_seed_changes_output(self, tmp_path):
        a = generate_synthetic(1, 1000, 1, 3, tmp_path / "a")
        b = generate_synthetic(2, 1000, 1, 3, tmp_path / "b")
        assert a[0].read_bytes() != b[0].read_bytes()

    def test_attack_nodes_labeled_by_chain(self, generated):
        _, _, labels = generated
        gt = load_ground_truth(labels)
        assert gt.attack_ids == [1, 2]
        assert len(gt.malicious) == 8

    def test_split_has_no_leakage(self, generated):
        directory, events, labels = generated
        manifest = yaml.safe_load((directory / "dataset.yml").read_text())
        windows = build_windows(read_events(events), window_minutes=15)
        split = split_dataset(windows, load_ground_truth(labels), manifest["train_end"], manifest["val_end"])
        assert split.train and split.val and split.test
        assert windows[0].window_start == BASE_TS

    def test_rejects_tiny_inputs(self, tmp_path):
        with pytest.raises(IngestError):
            generate_synthetic(0, 10, 1, 3, tmp_path)
        with pytest.raises(IngestError):
            generate_synthetic(0, 1000, 1, 1, tmp_path)


class TestSplitBoundaries:
    @pytest.mark.parametrize("span_hours", [3, 4, 5])
    def test_boundaries_at_thirds(self, tmp_path, span_hours):
        generate_synthetic(0, 1000, 2, span_hours, tmp_path)
        manifest = yaml.safe_load((tmp_path / "dataset.yml").read_text())
        span = span_hours * NS_PER_HOUR
        assert manifest["train_end"] == BASE_TS + span // 3
        assert manifest["val_end"] == BASE_TS + 2 * span // 3

    @pytest.mark.parametrize("span_hours", [4, 5])
    def test_attacks_in_final_third(self, tmp_path, span_hours):
        events, labels = generate_synthetic(0, 2000, 5, span_hours, tmp_path)
        malicious = load_ground_truth(labels).malicious
        span = span_hours * NS_PER_HOUR
        attack_ts = [ev.ts for ev in read_events(events) if ev.src.id in malicious or ev.dst.id in malicious]
        assert len(attack_ts) == 5 * 4
        assert min(attack_ts) >= BASE_TS + 2 * span / 3


class TestBeacon:
    def test_fixed_period_across_span(self, tmp_path):
        events, _ = generate_synthetic(0, 1000, 0, 3, tmp_path)
        flow = _netflow(*BEACON_TEMPLATE.beacon)["id"]
        beacon = _entity_id("beacon", BEACON_TEMPLATE.path)
        ts = [ev.ts for ev in read_events(events) if ev.src.id == beacon and ev.dst.id == flow]
        assert ts == list(range(BASE_TS, BASE_TS + 3 * NS_PER_HOUR, BEACON_PERIOD_NS))
