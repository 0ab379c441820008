"""Functional wrappers over the tape op catalog.

Each function takes nodes and records one operation on their tape.
"""
from __future__ import annotations

import numpy as np

from .tape import Node

LEAKY_SLOPE = 0.2


def _tape(*xs: Node):
    return xs[0].tape


def matmul(a: Node, b: Node) -> Node:
    return _tape(a).apply("matmul", a, b)


def add(a: Node, b: Node) -> Node:
    return _tape(a).apply("add", a, b)


def mul(a: Node, b: Node) -> Node:
    return _tape(a).apply("mul", a, b)


def scale(x: Node, c: float) -> Node:
    return _tape(x).apply("scale", x, c=float(c))


def concat(xs, axis: int = -1) -> Node:
    xs = list(xs)
    return _tape(*xs).apply("concat", *xs, axis=axis)


def stack(xs) -> Node:
    xs = list(xs)
    return _tape(*xs).apply("stack", *xs)


def transpose(x: Node) -> Node:
    return _tape(x).apply("transpose", x)


def repeat_rows(x: Node, n: int) -> Node:
    return _tape(x).apply("repeat_rows", x, n=int(n))


def tanh(x: Node) -> Node:
    return _tape(x).apply("tanh", x)


def sigmoid(x: Node) -> Node:
    return _tape(x).apply("sigmoid", x)


def leaky_relu(x: Node, slope: float = LEAKY_SLOPE) -> Node:
    return _tape(x).apply("leaky_relu", x, slope=slope)


def elu(x: Node, alpha: float = 1.0) -> Node:
    return _tape(x).apply("elu", x, alpha=alpha)


def softmax(x: Node) -> Node:
    return _tape(x).apply("softmax", x)


def mean(x: Node) -> Node:
    return _tape(x).apply("mean", x)


def mean_rows(x: Node) -> Node:
    return _tape(x).apply("mean_rows", x)


def bce(pred: Node, labels, eps: float = 1e-12) -> Node:
    return _tape(pred).apply("bce", pred, labels=np.asarray(labels, dtype=np.float64), eps=eps)


def gather(table: Node, index) -> Node:
    return _tape(table).apply("gather", table, index=np.asarray(index, dtype=np.int64))


def pooled_gather(table: Node, index, weight) -> Node:
    return _tape(table).apply(
        "pooled_gather", table,
        index=np.asarray(index, dtype=np.int64), weight=np.asarray(weight, dtype=np.float64),
    )


def dense(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """x @ weight.T (+ bias), with weight stored as (out, in)."""
    if x.value.ndim == 1:
        y = matmul(weight, x)
    else:
        y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)
