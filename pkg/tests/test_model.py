"""Tests for pidsbench.model."""

import dataclasses

import numpy as np
import pytest

from pidsbench.batching import Batch, BatchOrigin, NeighborIndex
from pidsbench.errors import ModelError, NonFiniteGradientError
from pidsbench.ingest import Edge
from pidsbench.model import (
    ModelConfig,
    backward_and_step,
    encode,
    forward,
    init_params,
    prepare_batch,
    read_checkpoint,
    train,
    write_checkpoint,
)

from .conftest import make_graph

IN_DIM = 6


def features_for(names):
    rng = np.random.default_rng(11)
    return {n: rng.normal(size=IN_DIM) for n in names}


def batch_of(edges, start=0, kinds=None):
    g = make_graph(edges, start=start, kinds=kinds)
    return Batch(g, [0] * len(g.edges), BatchOrigin.INTRA)


FEATURES = features_for("abcdef")


def learnable_batches(n=6):
    """Edge type is determined by the source node."""
    out = []
    for i in range(n):
        t = i * 100
        out.append(prepare_batch(batch_of([
            ("a", "b", "read", t + 1), ("c", "d", "write", t + 2),
            ("e", "f", "send", t + 3), ("a", "d", "read", t + 4),
            ("c", "f", "write", t + 5), ("e", "b", "send", t + 6),
        ], start=t), FEATURES))
    return out


class TestModelConfig:
    @pytest.mark.parametrize("kwargs", [
        {"encoder": "gat"},
        {"objective": "link"},
        {"decoder": "cosine"},
        {"node_hid_dim": 2},
        {"sage_layers": 3},
        {"epochs": 0},
        {"activation": "gelu"},
        {"decoder_activation": "sigmoid"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ModelError):
            ModelConfig(**kwargs)

    def test_from_training(self):
        cfg = ModelConfig.from_training({
            "node_hid_dim": 32, "lr": 0.01, "num_epochs": 4, "seed": 9,
            "encoder": {"used_methods": "sage", "sage": {"num_layers": 2, "activation": "tanh"}},
            "decoder": {"used_method": "mlp", "mlp": {"hidden_dim": 16, "activation": "tanh"}},
            "objective": {"used_method": "node_type"},
        })
        assert (cfg.encoder, cfg.sage_layers, cfg.activation) == ("sage", 2, "tanh")
        assert (cfg.node_hid_dim, cfg.lr, cfg.epochs, cfg.seed) == (32, 0.01, 4, 9)
        assert (cfg.objective, cfg.decoder_hidden_dim, cfg.decoder_activation) == ("node_type", 16, "tanh")

    def test_empty_encoder_list_means_none(self):
        cfg = ModelConfig.from_training({"encoder": {"used_methods": []}})
        assert cfg.encoder == "none"
        assert cfg.embedding_dim(IN_DIM) == IN_DIM


class TestInitParams:
    def test_sage_shapes(self):
        params = init_params(ModelConfig(encoder="sage", sage_layers=2, node_hid_dim=8), IN_DIM, 12, 3)
        shapes = {k: p.value.shape for k, p in params.items()}
        assert shapes == {
            "encoder.0.weight": (12, 8), "encoder.0.bias": (8,),
            "encoder.1.weight": (16, 8), "encoder.1.bias": (8,),
            "decoder.0.weight": (16, 8), "decoder.0.bias": (8,),
            "decoder.1.weight": (8, 12), "decoder.1.bias": (12,),
        }

    @pytest.mark.parametrize("objective,out_dim", [("edge_type", 12), ("node_type", 3), ("feat_recon", IN_DIM)])
    def test_decoder_output(self, objective, out_dim):
        params = init_params(ModelConfig(objective=objective, node_hid_dim=8), IN_DIM, 12, 3)
        assert params["decoder.1.weight"].value.shape[1] == out_dim

    def test_seeded(self):
        a = init_params(ModelConfig(seed=4, node_hid_dim=8), IN_DIM, 12, 3)
        b = init_params(ModelConfig(seed=4, node_hid_dim=8), IN_DIM, 12, 3)
        c = init_params(ModelConfig(seed=5, node_hid_dim=8), IN_DIM, 12, 3)
        assert all(np.array_equal(a[k].value, b[k].value) for k in a)
        assert not np.array_equal(a["encoder.0.weight"].value, c["encoder.0.weight"].value)
        assert not a["encoder.0.bias"].value.any()


class TestPrepareBatch:
    def test_rows_sorted_and_ops_indexed(self):
        b = batch_of([("c", "a", "write", 1), ("a", "b", "read", 2)], kinds={"b": "file"})
        arrays = prepare_batch(b, FEATURES)
        assert arrays.keys == ["a", "b", "c"]
        assert arrays.src.tolist() == [2, 0] and arrays.dst.tolist() == [0, 1]
        assert arrays.kinds.tolist() == [0, 1, 0]
        assert np.array_equal(arrays.x[2], FEATURES["c"])

    def test_unknown_and_synthetic_ops_flagged(self):
        b = batch_of([("a", "b", "read", 1), ("a", "c", "pseudo_root", 2)])
        b.graph.edges[0] = Edge("a", "b", "read", 1, 1, synthetic=True)
        arrays = prepare_batch(b, FEATURES)
        assert arrays.ops.tolist()[1] == -1
        assert arrays.synthetic.tolist() == [True, True]

    def test_aggregation_pairs_unique(self):
        arrays = prepare_batch(batch_of([("a", "b", "read", 1), ("a", "b", "read", 2)]), FEATURES)
        assert len(arrays.src) == 2
        assert list(zip(arrays.agg_src, arrays.agg_dst)) == [(0, 1)]

    def test_missing_features(self):
        with pytest.raises(ModelError, match="no features"):
            prepare_batch(batch_of([("a", "zz", "read", 1)]), FEATURES)

    def test_neighbor_mean(self):
        snap = NeighborIndex(window_start=0, k=2, neighbors={"a": [("c", -5, "read"), ("d", -9, "write")]})
        arrays = prepare_batch(batch_of([("a", "b", "read", 1)]), FEATURES, snap, needs_neighbors=True)
        assert np.allclose(arrays.neighbor_mean[0], (FEATURES["c"] + FEATURES["d"]) / 2)
        assert not arrays.neighbor_mean[1].any()


class TestForward:
    @pytest.mark.parametrize("encoder", ["linear", "sage", "none"])
    def test_embedding_shapes(self, encoder):
        cfg = ModelConfig(encoder=encoder, node_hid_dim=8)
        arrays = learnable_batches(1)[0]
        h = encode(arrays, init_params(cfg, IN_DIM, 12, 3), cfg)
        assert h.shape == (6, cfg.embedding_dim(IN_DIM))

    def test_tgn_needs_snapshots(self):
        cfg = ModelConfig(encoder="tgn", node_hid_dim=8)
        with pytest.raises(ModelError, match="snapshots"):
            encode(learnable_batches(1)[0], init_params(cfg, IN_DIM, 12, 3), cfg)

    def test_edge_losses_skip_synthetic(self):
        cfg = ModelConfig(node_hid_dim=8)
        b = batch_of([("a", "b", "read", 1), ("a", "c", "pseudo_root", 2), ("c", "d", "write", 3)])
        result = forward(prepare_batch(b, FEATURES), init_params(cfg, IN_DIM, 12, 3), cfg)
        assert result.edge_rows.tolist() == [0, 2]
        assert result.item_losses.shape == (2,)
        assert np.isclose(float(result.loss.value), result.item_losses.mean())

    def test_all_synthetic_is_empty(self):
        cfg = ModelConfig(node_hid_dim=8)
        b = batch_of([("a", "c", "pseudo_root", 2)])
        assert forward(prepare_batch(b, FEATURES), init_params(cfg, IN_DIM, 12, 3), cfg).empty

    @pytest.mark.parametrize("objective", ["node_type", "feat_recon"])
    def test_node_objectives_score_every_node(self, objective):
        cfg = ModelConfig(objective=objective, node_hid_dim=8)
        result = forward(learnable_batches(1)[0], init_params(cfg, IN_DIM, 12, 3), cfg)
        assert result.item_losses.shape == (6,)


class TestBackwardAndStep:
    def test_updates_parameters(self):
        cfg = ModelConfig(node_hid_dim=8)
        params = init_params(cfg, IN_DIM, 12, 3)
        before = params["decoder.1.weight"].value.copy()
        backward_and_step(forward(learnable_batches(1)[0], params, cfg).loss, params, 0.1)
        assert not np.array_equal(before, params["decoder.1.weight"].value)
        assert all(not p.grad.any() for p in params.values())

    def test_non_finite_gradient_leaves_parameters(self):
        cfg = ModelConfig(node_hid_dim=8)
        params = init_params(cfg, IN_DIM, 12, 3)
        params["decoder.1.weight"].value[0, 0] = np.nan
        snapshot = {k: p.value.copy() for k, p in params.items()}
        with pytest.raises(NonFiniteGradientError) as exc:
            backward_and_step(forward(learnable_batches(1)[0], params, cfg).loss, params, 0.1)
        assert "decoder.1.weight" in exc.value.parameter_names
        for k, p in params.items():
            assert np.array_equal(p.value, snapshot[k], equal_nan=True)
            assert not p.grad.any()


class TestTrain:
    @pytest.mark.parametrize("encoder", ["linear", "sage"])
    def test_loss_decreases(self, encoder):
        cfg = ModelConfig(encoder=encoder, node_hid_dim=16, lr=0.05, epochs=25, seed=1)
        ckpts = train(learnable_batches(), learnable_batches(2), cfg, IN_DIM)
        assert [c.epoch for c in ckpts] == list(range(1, 26))
        assert ckpts[-1].train_loss < ckpts[0].train_loss
        assert ckpts[-1].val_loss < ckpts[0].val_loss

    def test_deterministic(self):
        cfg = ModelConfig(node_hid_dim=8, epochs=2, seed=3)
        a = train(learnable_batches(2), [], cfg, IN_DIM)
        b = train(learnable_batches(2), [], cfg, IN_DIM)
        assert all(np.array_equal(a[-1].parameters[k], b[-1].parameters[k]) for k in a[-1].parameters)
        assert np.isnan(a[-1].val_loss)

    def test_non_finite_batch_skipped(self, caplog):
        batches = learnable_batches(3)
        batches.insert(1, dataclasses.replace(batches[0], x=np.full_like(batches[0].x, np.nan)))
        cfg = ModelConfig(node_hid_dim=8, epochs=2, seed=3)
        ckpts = train(batches, [], cfg, IN_DIM)
        assert [c.epoch for c in ckpts] == [1, 2]
        assert all(np.isfinite(v).all() for v in ckpts[-1].parameters.values())
        assert np.isfinite(ckpts[-1].train_loss)
        assert caplog.text.count("Skipping batch 1") == 2

    def test_all_batches_non_finite(self):
        batch = learnable_batches(1)[0]
        bad = dataclasses.replace(batch, x=np.full_like(batch.x, np.nan))
        with pytest.raises(ModelError, match="finite update"):
            train([bad], [], ModelConfig(node_hid_dim=8), IN_DIM)

    def test_empty_train(self):
        with pytest.raises(ModelError, match="empty train set"):
            train([], [], ModelConfig(node_hid_dim=8), IN_DIM)

    def test_checkpoint_file(self, tmp_path):
        cfg = ModelConfig(encoder="sage", sage_layers=2, node_hid_dim=8, epochs=1)
        ckpt = train(learnable_batches(1), [], cfg, IN_DIM)[0]
        path = tmp_path / "checkpoint_1.tensors"
        write_checkpoint(path, ckpt, cfg, IN_DIM)
        loaded, loaded_cfg, in_dim = read_checkpoint(path)
        assert (loaded.epoch, in_dim, loaded_cfg) == (1, IN_DIM, cfg)
        assert loaded.train_loss == ckpt.train_loss
        assert all(np.array_equal(loaded.parameters[k], ckpt.parameters[k]) for k in ckpt.parameters)
