"""End-to-end pipeline runs on a generated dataset."""

import json

import pytest

from pidsbench import ledger
from pidsbench.cache import STAGES
from pidsbench.config import OverrideSet, apply_overrides, load_config
from pidsbench.errors import ConfigError, EvaluationError, IngestError
from pidsbench.evaluate import read_metrics
from pidsbench.ingest import DatasetManifest
from pidsbench.pipeline import StageContext, run_evaluation, run_pipeline
from pidsbench.serialize import read_tensors

pytestmark = pytest.mark.slow

SMALL = (
    ("featurization.used_method", "hfh"),
    ("featurization.emb_dim", "16"),
    ("batching.intra_graph_batching.size", "64"),
    ("training.encoder.used_methods", "linear"),
    ("training.node_hid_dim", "16"),
    ("training.decoder.mlp.hidden_dim", "16"),
    ("training.num_epochs", "8"),
    ("training.lr", "0.1"),
    ("evaluation.node_evaluation.use_dst_node_loss", "false"),
)


def small_cfg(config_dir, *extra):
    cfg = load_config(config_dir / "orthrus.yml", config_dir)
    return apply_overrides(cfg, OverrideSet(SMALL + tuple(extra)))


@pytest.fixture
def run(config_dir, synthetic_data_dir, tmp_path):
    cache_root = tmp_path / "cache"

    def go(*extra, **kwargs):
        return run_pipeline(small_cfg(config_dir, *extra), "SYNTH",
                            cache_root=cache_root, data_dir=synthetic_data_dir, system="orthrus", **kwargs)

    go.cache_root = cache_root
    return go


class TestPipeline:
    def test_cold_then_warm(self, run):
        cold = run()
        assert cold.executed == list(STAGES)
        warm = run()
        assert warm.executed == []
        assert [s.digest for s in warm.stages] == [s.digest for s in cold.stages]
        assert warm.metrics == cold.metrics

    def test_training_change_reuses_upstream(self, run):
        run()
        changed = run(("training.encoder.used_methods", "tgn"))
        assert changed.executed == ["training", "evaluation", "triage"]

    def test_force_restart(self, run):
        run()
        assert run(restart_from="gnn_training").executed == ["training", "evaluation", "triage"]

    def test_artifacts(self, run):
        result = run()
        split = json.loads((result.artifact_dir("construction") / "split.json").read_text())
        assert split["dataset_id"] == "SYNTH"
        assert all(split["windows"][name] > 0 for name in ("train", "val", "test"))

        tensors, meta = read_tensors(result.artifact_dir("featurization") / "features.tensors")
        assert tensors["features"].shape == (len(meta["ids"]), 19)

        training = result.artifact_dir("training")
        assert sorted(p.name for p in training.glob("checkpoint_*.tensors"))[0] == "checkpoint_1.tensors"
        losses = json.loads((training / "losses.json").read_text())
        assert len(losses) == 8
        assert losses[-1]["train_loss"] < losses[0]["train_loss"]

        evaluation = result.artifact_dir("evaluation")
        assert sorted(read_metrics(evaluation / "metrics.jsonl")) == list(range(1, 9))
        assert (evaluation / "epoch_8" / "top_ranked.csv").is_file()
        assert (result.artifact_dir("triage") / "triage.csv").read_text().startswith("rank,node_id,score")

    def test_detects_attacks(self, run):
        metrics = run().metrics
        assert metrics["auc_roc"] > 0.5
        assert set(metrics) >= {"precision", "recall", "f1", "average_precision", "recall_attack_1"}

    def test_ledger(self, run):
        result = run()
        db = str(run.cache_root / "ledger.db")
        assert ledger.get_run(db, result.run_id)["status"] == "ok"
        log = ledger.stage_log(db, result.run_id)
        assert [r["stage_name"] for r in log] == list(STAGES)
        assert all(r["decision"] == "Miss" and r["status"] == "ok" for r in log)

    def test_invalid_config(self, run):
        with pytest.raises(ConfigError, match="node_hid_dim"):
            run(("training.node_hid_dim", "2"))

    def test_failed_stage_recorded(self, run, synthetic_data_dir):
        (synthetic_data_dir / "SYNTH" / "events.jsonl").write_text("garbage\n")
        with pytest.raises(IngestError, match="malformed"):
            run(run_id="broken")
        db = str(run.cache_root / "ledger.db")
        assert ledger.get_run(db, "broken")["status"] == "failed"
        last = ledger.stage_log(db, "broken")[-1]
        assert (last["stage_name"], last["status"]) == ("construction", "failed")
        assert not list((run.cache_root / "construction").iterdir())

    def test_zero_epochs_rejected_before_running(self, run):
        with pytest.raises(ConfigError, match="num_epochs"):
            run(("training.num_epochs", "0"))
        assert not (run.cache_root / "construction").exists()


class TestRunEvaluation:
    def test_missing_checkpoints(self, config_dir, tmp_path):
        manifest = DatasetManifest("DS", tmp_path, 1, 2)
        ctx = StageContext(cfg=small_cfg(config_dir), manifest=manifest, dirs={"training": tmp_path})
        with pytest.raises(EvaluationError, match="no checkpoints"):
            run_evaluation(ctx, tmp_path / "out")
