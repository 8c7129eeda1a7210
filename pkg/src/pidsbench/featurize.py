"""Node featurization: attribute tokenization, hierarchical feature hashing
and skip-gram token embeddings with negative sampling."""

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from pidsbench.errors import FeaturizationError
from pidsbench.ingest import KINDS, Entity

logger = logging.getLogger(__name__)

DEFAULT_FEATURES: dict[str, list[str]] = {
    "subject": ["type", "path", "cmd_line"],
    "file": ["type", "path"],
    "netflow": ["type", "remote_ip", "remote_port"],
}

SKIPGRAM_DEFAULTS: dict[str, dict[str, Any]] = {
    "word2vec": {"alpha": 0.025, "window_size": 5, "min_count": 1, "negative": 5},
    "fasttext": {"alpha": 0.01, "window_size": 3, "min_count": 2, "negative": 3},
}

_SPLITTERS = {
    "path": lambda v: v.split("/"),
    "cmd_line": lambda v: v.split(),
    "remote_ip": lambda v: v.split("."),
}


def feature_spec_from(node_features: dict[str, Any] | None) -> dict[str, list[str]]:
    """Normalize ``construction.node_features`` (lists or comma strings) per kind."""
    spec = {k: list(v) for k, v in DEFAULT_FEATURES.items()}
    for kind, attrs in (node_features or {}).items():
        items = attrs if isinstance(attrs, list) else str(attrs).split(",")
        spec[kind] = [str(a).strip() for a in items if str(a).strip()]
    return spec


def tokenize(e: Entity, feature_spec: dict[str, list[str]]) -> list[str]:
    """Kind token first, then the configured attributes split into segments."""
    tokens = [e.kind]
    for attr in feature_spec.get(e.kind, []):
        value = e.attrs.get(attr)
        if not value:
            continue
        if attr == "type":
            # the kind token already carries the default type
            if value != e.kind:
                tokens.append(value)
            continue
        split = _SPLITTERS.get(attr)
        parts = split(value) if split else [value]
        tokens.extend(p for p in parts if p)
    return tokens


def _hash64(token: str, person: bytes) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, person=person).digest()
    return int.from_bytes(digest, "little")


def feature_hash(tokens: list[str], dim: int) -> np.ndarray:
    """Depth-decayed signed hashing, L2-normalized unless all-zero."""
    if dim < 8 or dim % 4:
        raise FeaturizationError(f"feature hashing needs dim >= 8 and divisible by 4, got {dim}")
    vec = np.zeros(dim, dtype=np.float64)
    for depth, token in enumerate(tokens):
        bucket = _hash64(token, b"pidsbench-bucket") % dim
        sign = 1.0 if _hash64(token, b"pidsbench-sign") & 1 else -1.0
        vec[bucket] += sign * 2.0 ** (-depth / 4)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


# ---------------------------------------------------------------------------
# Skip-gram
# ---------------------------------------------------------------------------


@dataclass
class TokenCorpus:
    sentences: list[list[str]]
    vocab: dict[str, tuple[int, int]]

    def index_of(self, token: str) -> int | None:
        entry = self.vocab.get(token)
        return entry[0] if entry else None

    @property
    def tokens(self) -> list[str]:
        return sorted(self.vocab, key=lambda t: self.vocab[t][0])


@dataclass
class EmbeddingTable:
    dim: int
    vocab: dict[str, int]
    vectors: np.ndarray
    seed: int
    epoch_losses: list[float] = field(default_factory=list)

    def vector(self, token: str) -> np.ndarray | None:
        index = self.vocab.get(token)
        return None if index is None else self.vectors[index]


def build_corpus(
    entities: Iterable[Entity],
    feature_spec: dict[str, list[str]],
    min_count: int = 1,
) -> TokenCorpus:
    """One sentence per entity; vocabulary ordered by count desc, then token."""
    sentences = [tokenize(e, feature_spec) for e in entities]
    counts = Counter(t for s in sentences for t in s)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    vocab = {t: (i, counts[t]) for i, t in enumerate(kept)}
    return TokenCorpus(sentences=sentences, vocab=vocab)


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(_log_sigmoid(x))


def negative_sampling_loss_and_grads(
    v: np.ndarray, u_pos: np.ndarray, u_neg: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Summed loss -log σ(u·v) - Σ log σ(-u'·v) over a batch and its gradients.

    Shapes: v and u_pos (B, d), u_neg (B, K, d).
    """
    pos = np.einsum("bd,bd->b", u_pos, v)
    neg = np.einsum("bkd,bd->bk", u_neg, v)
    loss = float(-_log_sigmoid(pos).sum() - _log_sigmoid(-neg).sum())
    g_pos = _sigmoid(pos) - 1.0
    g_neg = _sigmoid(neg)
    grad_v = g_pos[:, None] * u_pos + np.einsum("bk,bkd->bd", g_neg, u_neg)
    grad_pos = g_pos[:, None] * v
    grad_neg = g_neg[:, :, None] * v[:, None, :]
    return loss, grad_v, grad_pos, grad_neg


def _training_pairs(corpus: TokenCorpus, window: int) -> np.ndarray:
    pairs: list[tuple[int, int]] = []
    seen: set[tuple[str, ...]] = set()
    for sentence in corpus.sentences:
        # identical sentences contribute their pairs once per epoch
        key = tuple(sentence)
        if key in seen:
            continue
        seen.add(key)
        ids = [corpus.vocab[t][0] for t in sentence if t in corpus.vocab]
        for i, center in enumerate(ids):
            for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                if j != i:
                    pairs.append((center, ids[j]))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def train_skipgram(
    corpus: TokenCorpus,
    dim: int,
    epochs: int,
    alpha: float,
    window: int,
    negative: int,
    seed: int,
    batch_pairs: int = 64,
) -> EmbeddingTable:
    """Skip-gram with negative sampling and a linearly decaying learning rate."""
    if not corpus.vocab:
        raise FeaturizationError("empty vocabulary; nothing to train")
    if epochs < 1 or not 0 < alpha < 1 or window < 1 or negative < 1 or dim < 1:
        raise FeaturizationError(
            f"invalid skip-gram parameters: dim={dim} epochs={epochs} alpha={alpha} "
            f"window={window} negative={negative}"
        )

    rng = np.random.default_rng(seed)
    n_vocab = len(corpus.vocab)
    w_in = rng.uniform(-0.5 / dim, 0.5 / dim, size=(n_vocab, dim))
    w_out = np.zeros((n_vocab, dim))

    counts = np.array([corpus.vocab[t][1] for t in corpus.tokens], dtype=np.float64)
    noise = counts ** 0.75
    noise /= noise.sum()

    pairs = _training_pairs(corpus, window)
    table = EmbeddingTable(dim=dim, vocab={t: i for t, (i, _) in corpus.vocab.items()}, vectors=w_in, seed=seed)
    if len(pairs) == 0:
        logger.warning("Corpus has no co-occurring tokens; embeddings stay at initialization")
        return table

    chunks_per_epoch = -(-len(pairs) // batch_pairs)
    total_steps = epochs * chunks_per_epoch
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        for start in range(0, len(pairs), batch_pairs):
            batch = pairs[order[start:start + batch_pairs]]
            centers, contexts = batch[:, 0], batch[:, 1]
            negatives = rng.choice(n_vocab, size=(len(batch), negative), p=noise)
            lr = alpha - (alpha - alpha / 100) * (step / max(total_steps - 1, 1))

            loss, grad_v, grad_pos, grad_neg = negative_sampling_loss_and_grads(
                w_in[centers], w_out[contexts], w_out[negatives]
            )
            np.add.at(w_in, centers, -lr * grad_v)
            np.add.at(w_out, contexts, -lr * grad_pos)
            np.add.at(w_out, negatives.reshape(-1), -lr * grad_neg.reshape(-1, dim))
            epoch_loss += loss
            step += 1
        table.epoch_losses.append(epoch_loss / len(pairs))
        logger.debug("skip-gram epoch %d loss %.6f", epoch + 1, table.epoch_losses[-1])

    if not np.all(np.isfinite(w_in)):
        raise FeaturizationError("skip-gram training diverged (non-finite embeddings)")
    logger.info(
        "Trained %d-dim embeddings for %d tokens over %d epochs (final loss %.4f)",
        dim, n_vocab, epochs, table.epoch_losses[-1],
    )
    return table


# ---------------------------------------------------------------------------
# Node vectors
# ---------------------------------------------------------------------------


def kind_one_hot(kind: str) -> np.ndarray:
    vec = np.zeros(len(KINDS))
    vec[KINDS.index(kind)] = 1.0
    return vec


def embed_node(
    e: Entity,
    method: str,
    table: EmbeddingTable | None,
    dim: int,
    feature_spec: dict[str, list[str]],
) -> np.ndarray:
    """Attribute vector of length dim followed by a one-hot kind (length 3)."""
    tokens = tokenize(e, feature_spec)
    if method == "hash":
        body = feature_hash(tokens, dim)
    elif method == "skipgram":
        if table is None:
            raise FeaturizationError("skipgram embedding needs a trained table")
        vectors = [v for v in (table.vector(t) for t in tokens) if v is not None]
        body = np.mean(vectors, axis=0) if vectors else np.zeros(table.dim)
    else:
        raise FeaturizationError(f"unknown embedding method {method!r}")
    return np.concatenate([body, kind_one_hot(e.kind)])


def skipgram_params(featurization: dict[str, Any]) -> dict[str, Any]:
    """Merge a featurization section's method parameters over their defaults."""
    method = featurization.get("used_method", "word2vec")
    params = dict(SKIPGRAM_DEFAULTS.get(method, SKIPGRAM_DEFAULTS["word2vec"]))
    params.update({k: v for k, v in (featurization.get(method) or {}).items() if k in params})
    return params


def embedding_method(used_method: str) -> str:
    return "hash" if used_method == "hfh" else "skipgram"
