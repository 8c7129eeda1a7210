"""Reverse-mode differentiation over float64 numpy arrays.

Each op returns a ``Var`` that remembers its parents and how to push an
upstream gradient back to them. ``backward`` walks the recorded graph in
reverse topological order. Only the ops the encoders, decoders and
objectives need are provided.
"""

from typing import Callable, Sequence

import numpy as np


class Var:
    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(
        self,
        value: np.ndarray | float,
        parents: Sequence["Var"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g


class Parameter(Var):
    """A trainable leaf. ``grad`` always exists and has the value's shape."""

    __slots__ = ("name",)

    def __init__(self, name: str, value: np.ndarray) -> None:
        super().__init__(value)
        self.name = name
        self.zero_grad()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def constant(value: np.ndarray | float) -> Var:
    return Var(value)


def backward(root: Var) -> None:
    """Propagate d(root)/d(.) into every Var reachable from root."""
    order: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    root.accumulate(np.ones_like(root.value))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    def grad(g: np.ndarray) -> None:
        a.accumulate(g @ b.value.T)
        b.accumulate(a.value.T @ g)

    return Var(a.value @ b.value, (a, b), grad)


def add_bias(x: Var, bias: Var) -> Var:
    def grad(g: np.ndarray) -> None:
        x.accumulate(g)
        bias.accumulate(g.sum(axis=0))

    return Var(x.value + bias.value, (x, bias), grad)


def relu(x: Var) -> Var:
    mask = x.value > 0

    def grad(g: np.ndarray) -> None:
        x.accumulate(g * mask)

    return Var(np.where(mask, x.value, 0.0), (x,), grad)


def tanh(x: Var) -> Var:
    out = np.tanh(x.value)

    def grad(g: np.ndarray) -> None:
        x.accumulate(g * (1.0 - out ** 2))

    return Var(out, (x,), grad)


ACTIVATIONS: dict[str, Callable[[Var], Var]] = {"relu": relu, "tanh": tanh}


def concat(a: Var, b: Var) -> Var:
    split = a.value.shape[1]

    def grad(g: np.ndarray) -> None:
        a.accumulate(g[:, :split])
        b.accumulate(g[:, split:])

    return Var(np.concatenate([a.value, b.value], axis=1), (a, b), grad)


def gather_rows(x: Var, index: np.ndarray) -> Var:
    def grad(g: np.ndarray) -> None:
        full = np.zeros_like(x.value)
        np.add.at(full, index, g)
        x.accumulate(full)

    return Var(x.value[index], (x,), grad)


def mean_aggregate(x: Var, src: np.ndarray, dst: np.ndarray, n_out: int) -> Var:
    """out[i] = mean of x[src[e]] over entries e with dst[e] == i; zero rows when none."""
    counts = np.bincount(dst, minlength=n_out).astype(np.float64) if len(dst) else np.zeros(n_out)
    scale = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    out = np.zeros((n_out, x.value.shape[1]))
    if len(src):
        np.add.at(out, dst, x.value[src])
    out *= scale[:, None]

    def grad(g: np.ndarray) -> None:
        full = np.zeros_like(x.value)
        if len(src):
            np.add.at(full, src, g[dst] * scale[dst][:, None])
        x.accumulate(full)

    return Var(out, (x,), grad)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Var, targets: np.ndarray) -> Var:
    """Per-row cross-entropy against integer targets."""
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(targets))
    losses = log_z - shifted[rows, targets]

    def grad(g: np.ndarray) -> None:
        d = softmax(logits.value)
        d[rows, targets] -= 1.0
        logits.accumulate(d * g[:, None])

    return Var(losses, (logits,), grad)


def squared_error(pred: Var, target: np.ndarray) -> Var:
    """Per-row mean squared error against a constant target."""
    diff = pred.value - target
    width = diff.shape[1]

    def grad(g: np.ndarray) -> None:
        pred.accumulate(2.0 * diff / width * g[:, None])

    return Var((diff ** 2).mean(axis=1), (pred,), grad)


def mean(x: Var) -> Var:
    n = x.value.size

    def grad(g: np.ndarray) -> None:
        x.accumulate(np.full_like(x.value, float(g) / n))

    return Var(x.value.mean(), (x,), grad)
