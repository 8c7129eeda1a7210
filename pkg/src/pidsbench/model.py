"""Encoders, decoders, self-supervised objectives and the training loop."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from pidsbench import autograd as ag
from pidsbench.autograd import Parameter, Var
from pidsbench.batching import Batch, NeighborIndex
from pidsbench.config import method_list
from pidsbench.errors import ModelError, NonFiniteGradientError
from pidsbench.ingest import KINDS, OPS
from pidsbench.serialize import read_tensors, write_tensors

logger = logging.getLogger(__name__)

ENCODERS = ("linear", "sage", "tgn", "none")
OBJECTIVES = ("edge_type", "node_type", "feat_recon")
OP_INDEX = {op: i for i, op in enumerate(OPS)}


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "linear"
    sage_layers: int = 1
    activation: str = "relu"
    decoder: str = "mlp"
    objective: str = "edge_type"
    node_hid_dim: int = 128
    lr: float = 0.001
    epochs: int = 1
    seed: int = 0
    decoder_hidden_dim: int | None = None
    decoder_activation: str = "relu"

    def __post_init__(self) -> None:
        if self.encoder not in ENCODERS:
            raise ModelError(f"unknown encoder {self.encoder!r}")
        if self.objective not in OBJECTIVES:
            raise ModelError(f"unknown objective {self.objective!r}")
        if self.decoder != "mlp":
            raise ModelError(f"unknown decoder {self.decoder!r}")
        if self.node_hid_dim < 4:
            raise ModelError(f"node_hid_dim must be >= 4, got {self.node_hid_dim}")
        if not 1 <= self.sage_layers <= 2:
            raise ModelError(f"sage_layers must be 1 or 2, got {self.sage_layers}")
        if self.epochs < 1:
            raise ModelError(f"epochs must be >= 1, got {self.epochs}")
        for act in (self.activation, self.decoder_activation):
            if act not in ag.ACTIVATIONS:
                raise ModelError(f"unknown activation {act!r}")

    @classmethod
    def from_training(cls, training: dict[str, Any]) -> "ModelConfig":
        """Build from a ``training`` config section."""
        encoder_section = training.get("encoder") or {}
        encoders = method_list(encoder_section.get("used_methods"))
        encoder = encoders[0] if encoders else "none"
        sub = encoder_section.get(encoder) or {}
        decoder_section = training.get("decoder") or {}
        decoder = decoder_section.get("used_method", "mlp")
        mlp = decoder_section.get(decoder) or {}
        return cls(
            encoder=encoder,
            sage_layers=int(sub.get("num_layers", 1)) if encoder == "sage" else 1,
            activation=sub.get("activation", "relu"),
            decoder=decoder,
            objective=(training.get("objective") or {}).get("used_method", "edge_type"),
            node_hid_dim=int(training.get("node_hid_dim", 128)),
            lr=float(training.get("lr", 0.001)),
            epochs=int(training.get("num_epochs", 1)),
            seed=int(training.get("seed", 0)),
            decoder_hidden_dim=mlp.get("hidden_dim"),
            decoder_activation=mlp.get("activation", "relu"),
        )

    def embedding_dim(self, in_dim: int) -> int:
        return in_dim if self.encoder == "none" else self.node_hid_dim

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class Checkpoint:
    epoch: int
    parameters: dict[str, np.ndarray]
    train_loss: float
    val_loss: float


@dataclass
class BatchArrays:
    """Index arrays and features for one batch, rows in sorted key order."""

    keys: list[str]
    base_ids: list[str]
    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    ops: np.ndarray
    synthetic: np.ndarray
    kinds: np.ndarray
    agg_src: np.ndarray
    agg_dst: np.ndarray
    neighbor_mean: np.ndarray | None = None


@dataclass
class DecodeResult:
    loss: Var
    item_losses: np.ndarray
    edge_rows: np.ndarray | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return self.item_losses.size == 0


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def decoder_output_dim(cfg: ModelConfig, in_dim: int, n_ops: int, n_kinds: int) -> int:
    return {"edge_type": n_ops, "node_type": n_kinds, "feat_recon": in_dim}[cfg.objective]


def init_params(cfg: ModelConfig, in_dim: int, n_ops: int, n_kinds: int) -> dict[str, Parameter]:
    """Xavier-uniform weights and zero biases, drawn in name order from the seed."""
    if min(in_dim, n_ops, n_kinds) < 1:
        raise ModelError("model dimensions must be positive")
    rng = np.random.default_rng(cfg.seed)
    hid = cfg.node_hid_dim
    shapes: list[tuple[str, int, int]] = []
    if cfg.encoder == "linear":
        shapes.append(("encoder.0", in_dim, hid))
    elif cfg.encoder == "sage":
        for layer in range(cfg.sage_layers):
            shapes.append((f"encoder.{layer}", 2 * (in_dim if layer == 0 else hid), hid))
    elif cfg.encoder == "tgn":
        shapes.append(("encoder.0", 2 * in_dim, hid))

    emb = cfg.embedding_dim(in_dim)
    dec_in = 2 * emb if cfg.objective == "edge_type" else emb
    dec_hid = cfg.decoder_hidden_dim or hid
    shapes.append(("decoder.0", dec_in, dec_hid))
    shapes.append(("decoder.1", dec_hid, decoder_output_dim(cfg, in_dim, n_ops, n_kinds)))

    params: dict[str, Parameter] = {}
    for prefix, fan_in, fan_out in shapes:
        params[f"{prefix}.weight"] = Parameter(f"{prefix}.weight", _xavier(rng, fan_in, fan_out))
        params[f"{prefix}.bias"] = Parameter(f"{prefix}.bias", np.zeros(fan_out))
    return params


def params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Parameter]:
    return {name: Parameter(name, value.copy()) for name, value in sorted(arrays.items())}


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def prepare_batch(
    batch: Batch,
    features: dict[str, np.ndarray],
    neighbors: NeighborIndex | None = None,
    needs_neighbors: bool = False,
) -> BatchArrays:
    """Turn a batch into index arrays; node features are looked up by base entity id."""
    g = batch.graph
    keys = sorted(g.nodes)
    row = {k: i for i, k in enumerate(keys)}
    base_ids = [g.nodes[k].id for k in keys]
    missing = [b for b in base_ids if b not in features]
    if missing:
        raise ModelError(f"{len(missing)} batch nodes have no features, e.g. {missing[0]}")
    x = np.stack([features[b] for b in base_ids]) if keys else np.zeros((0, 0))

    src = np.array([row[e.src] for e in g.edges], dtype=np.int64)
    dst = np.array([row[e.dst] for e in g.edges], dtype=np.int64)
    ops = np.array([OP_INDEX.get(e.op, -1) for e in g.edges], dtype=np.int64)
    synthetic = np.array([e.synthetic or e.op not in OP_INDEX for e in g.edges], dtype=bool)
    kinds = np.array([KINDS.index(g.nodes[k].kind) for k in keys], dtype=np.int64)

    pairs = sorted({(int(s), int(d)) for s, d in zip(src, dst)})
    agg_src = np.array([p[0] for p in pairs], dtype=np.int64)
    agg_dst = np.array([p[1] for p in pairs], dtype=np.int64)

    neighbor_mean = None
    if needs_neighbors:
        neighbor_mean = np.zeros_like(x)
        if neighbors is not None:
            for i, base in enumerate(base_ids):
                vecs = [features[n] for n, _, _ in neighbors.neighbors.get(base, []) if n in features]
                if vecs:
                    neighbor_mean[i] = np.mean(vecs, axis=0)

    return BatchArrays(keys, base_ids, x, src, dst, ops, synthetic, kinds, agg_src, agg_dst, neighbor_mean)


def encode(arrays: BatchArrays, params: dict[str, Parameter], cfg: ModelConfig) -> Var:
    x = ag.constant(arrays.x)
    act = ag.ACTIVATIONS[cfg.activation]
    if cfg.encoder == "none":
        return x
    if cfg.encoder == "linear":
        return act(ag.add_bias(ag.matmul(x, params["encoder.0.weight"]), params["encoder.0.bias"]))
    if cfg.encoder == "tgn":
        if arrays.neighbor_mean is None:
            raise ModelError("tgn encoder needs last-neighbor snapshots")
        z = ag.concat(x, ag.constant(arrays.neighbor_mean))
        return act(ag.add_bias(ag.matmul(z, params["encoder.0.weight"]), params["encoder.0.bias"]))

    h = x
    n = arrays.x.shape[0]
    for layer in range(cfg.sage_layers):
        w, b = params[f"encoder.{layer}.weight"], params[f"encoder.{layer}.bias"]
        if h.shape[1] * 2 != w.shape[0]:
            raise ModelError(f"shape mismatch: features {h.shape[1]} vs weight {w.shape}")
        agg = ag.mean_aggregate(h, arrays.agg_src, arrays.agg_dst, n)
        h = act(ag.add_bias(ag.matmul(ag.concat(h, agg), w), b))
    return h


def _mlp(z: Var, params: dict[str, Parameter], cfg: ModelConfig) -> Var:
    act = ag.ACTIVATIONS[cfg.decoder_activation]
    hidden = act(ag.add_bias(ag.matmul(z, params["decoder.0.weight"]), params["decoder.0.bias"]))
    return ag.add_bias(ag.matmul(hidden, params["decoder.1.weight"]), params["decoder.1.bias"])


def decode_and_loss(
    h: Var, arrays: BatchArrays, objective: str, params: dict[str, Parameter], cfg: ModelConfig
) -> DecodeResult:
    """Batch loss (mean over items) plus per-edge or per-node losses."""
    if objective == "edge_type":
        rows = np.flatnonzero(~arrays.synthetic)
        if rows.size == 0:
            return DecodeResult(ag.constant(0.0), np.zeros(0), rows)
        z = ag.concat(ag.gather_rows(h, arrays.src[rows]), ag.gather_rows(h, arrays.dst[rows]))
        losses = ag.softmax_cross_entropy(_mlp(z, params, cfg), arrays.ops[rows])
        return DecodeResult(ag.mean(losses), losses.value, rows)
    if arrays.x.shape[0] == 0:
        return DecodeResult(ag.constant(0.0), np.zeros(0))
    if objective == "node_type":
        losses = ag.softmax_cross_entropy(_mlp(h, params, cfg), arrays.kinds)
    elif objective == "feat_recon":
        losses = ag.squared_error(_mlp(h, params, cfg), arrays.x)
    else:
        raise ModelError(f"unknown objective {objective!r}")
    return DecodeResult(ag.mean(losses), losses.value)


def forward(arrays: BatchArrays, params: dict[str, Parameter], cfg: ModelConfig) -> DecodeResult:
    return decode_and_loss(encode(arrays, params, cfg), arrays, cfg.objective, params, cfg)


def backward_and_step(loss: Var, params: dict[str, Parameter], lr: float) -> dict[str, Parameter]:
    """Gradient descent step; on a non-finite gradient nothing is updated."""
    ag.backward(loss)
    bad = [name for name, p in params.items() if not np.all(np.isfinite(p.grad))]
    if bad:
        for p in params.values():
            p.zero_grad()
        raise NonFiniteGradientError(bad)
    for p in params.values():
        p.value = p.value - lr * p.grad
        p.zero_grad()
    return params


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def train(
    train_arrays: list[BatchArrays],
    val_arrays: list[BatchArrays],
    cfg: ModelConfig,
    in_dim: int,
    n_ops: int = len(OPS),
    n_kinds: int = len(KINDS),
) -> list[Checkpoint]:
    """One checkpoint per epoch; batches are visited in the given temporal order."""
    usable = [a for a in train_arrays if a.x.shape[0]]
    if not usable:
        raise ModelError("empty train set")
    params = init_params(cfg, in_dim, n_ops, n_kinds)
    checkpoints: list[Checkpoint] = []

    for epoch in range(1, cfg.epochs + 1):
        for p in params.values():
            p.zero_grad()
        losses: list[float] = []
        for index, arrays in enumerate(usable):
            result = forward(arrays, params, cfg)
            if result.empty:
                continue
            try:
                backward_and_step(result.loss, params, cfg.lr)
            except NonFiniteGradientError as e:
                logger.warning(
                    "Skipping batch %d in epoch %d: non-finite gradients in %s (loss %r)",
                    index, epoch, ", ".join(e.parameter_names), float(result.loss.value),
                )
                continue
            losses.append(float(result.loss.value))
        if not losses:
            raise ModelError(f"no train batch produced a finite update in epoch {epoch}")

        val_losses = [float(r.loss.value) for r in (forward(a, params, cfg) for a in val_arrays) if not r.empty]
        ckpt = Checkpoint(
            epoch=epoch,
            parameters={name: p.value.copy() for name, p in params.items()},
            train_loss=_mean(losses),
            val_loss=_mean(val_losses),
        )
        checkpoints.append(ckpt)
        logger.info("Epoch %d: train loss %.6f, val loss %.6f", epoch, ckpt.train_loss, ckpt.val_loss)
    return checkpoints


def write_checkpoint(path: str | Path, ckpt: Checkpoint, cfg: ModelConfig, in_dim: int) -> None:
    meta = {
        "epoch": ckpt.epoch,
        "train_loss": ckpt.train_loss,
        "val_loss": ckpt.val_loss,
        "in_dim": in_dim,
        "model": cfg.to_dict(),
    }
    write_tensors(path, ckpt.parameters, meta)


def read_checkpoint(path: str | Path) -> tuple[Checkpoint, ModelConfig, int]:
    tensors, meta = read_tensors(path)
    ckpt = Checkpoint(
        epoch=int(meta["epoch"]),
        parameters=tensors,
        train_loss=float(meta["train_loss"]),
        val_loss=float(meta["val_loss"]),
    )
    return ckpt, ModelConfig(**meta["model"]), int(meta["in_dim"])
