"""Reverse-mode differentiation over a recorded computation.

Values are float64 numpy arrays. A :class:`Tape` records every operation in
the order it was executed, so node inputs always precede the node itself and
one reverse pass over the node list is a valid topological sweep.

Example::

    tape = Tape()
    x = tape.leaf(np.array([0.5, -1.0]), "x")
    loss = ops.mean(ops.tanh(x))
    grads = tape.backward(loss)      # {"x": array([...])}
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's shape rule."""


class NumericOverflowError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(ValueError):
    """A caller broke an op precondition that is not a shape problem."""


@dataclass(eq=False)
class Node:
    tape: "Tape"
    index: int
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None
    requires_grad: bool = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node({self.index}, {self.kind}, shape={self.shape})"


# kind -> (forward(values, attrs) -> value, backward(g, values, out, attrs) -> grads)
_OPS: dict[str, tuple[Callable, Callable]] = {}


def register(kind: str):
    def deco(pair_factory):
        _OPS[kind] = pair_factory()
        return pair_factory
    return deco


class Tape:
    """Append-only record of a forward computation."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, kind, inputs, value, attrs=None, name=None) -> Node:
        inputs = tuple(inputs)
        needs = kind == "leaf" or any(self.nodes[i].requires_grad for i in inputs)
        node = Node(self, len(self.nodes), kind, inputs, value, attrs or {}, name, needs)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str | None = None) -> Node:
        """Add a differentiation target."""
        arr = _as_f64(value)
        _check_finite(arr, "leaf")
        return self._push("leaf", (), arr, name=name if name is not None else f"leaf{len(self.nodes)}")

    def const(self, value) -> Node:
        """Add a value that is not differentiated. The array is shared, not copied."""
        arr = np.asarray(value, dtype=np.float64).view()
        arr.flags.writeable = False
        _check_finite(arr, "const")
        return self._push("const", (), arr)

    def apply(self, kind: str, *inputs: Node, **attrs) -> Node:
        if kind not in _OPS:
            raise KeyError(f"unknown op kind {kind!r}")
        for x in inputs:
            if not isinstance(x, Node) or x.tape is not self:
                raise ContractError(f"{kind}: every input must be a node on this tape")
        fwd, _ = _OPS[kind]
        with np.errstate(over="ignore", invalid="ignore"):  # non-finite results raise below
            value = fwd([x.value for x in inputs], attrs)
        _check_finite(value, kind)
        return self._push(kind, (x.index for x in inputs), value, attrs)

    def leaves(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == "leaf"]

    def backward(self, output: Node) -> dict[str, np.ndarray]:
        """Gradients of a scalar node with respect to every leaf, keyed by leaf name.

        The tape is not modified, so the sweep can be repeated.
        """
        if output.tape is not self:
            raise ContractError("output node belongs to another tape")
        if output.value.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        grads: list[np.ndarray | None] = [None] * (output.index + 1)
        grads[output.index] = np.ones_like(output.value)
        for k in range(output.index, -1, -1):
            g = grads[k]
            node = self.nodes[k]
            if g is None or not node.inputs or not node.requires_grad:
                continue
            _, bwd = _OPS[node.kind]
            in_vals = [self.nodes[i].value for i in node.inputs]
            in_grads = bwd(g, in_vals, node.value, node.attrs)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None or not self.nodes[i].requires_grad:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        out = {}
        for n in self.nodes:
            if n.kind != "leaf":
                continue
            g = grads[n.index] if n.index < len(grads) else None
            out[n.name] = np.zeros_like(n.value) if g is None else g
        return out


def _as_f64(value) -> np.ndarray:
    return np.array(value, dtype=np.float64, copy=True)


def _check_finite(arr: np.ndarray, kind: str) -> None:
    # a NaN or inf anywhere makes the sum non-finite; only then is the exact scan needed
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if math.isfinite(total):
        return
    if not np.all(np.isfinite(arr)):
        raise NumericOverflowError(f"{kind} produced a non-finite value")


def _shape_error(kind, a, b) -> ShapeError:
    return ShapeError(f"{kind}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# op catalog


@register("matmul")
def _matmul():
    def fwd(v, attrs):
        a, b = v
        if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
            raise _shape_error("matmul", a, b)
        return a @ b

    def bwd(g, v, out, attrs):
        a, b = v
        if a.ndim == 1 and b.ndim == 1:
            return g * b, g * a
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b), a.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b @ g, np.outer(a, g)
        return g @ b.T, a.T @ g
    return fwd, bwd


@register("add")
def _add():
    # equal shapes, a 1-D bias added to every row of a matrix, or a 1-element offset
    def fwd(v, attrs):
        a, b = v
        if a.shape != b.shape and not (a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]) \
                and not (b.shape == (1,) and a.ndim >= 1):
            raise _shape_error("add", a, b)
        return a + b

    def bwd(g, v, out, attrs):
        a, b = v
        if a.shape == b.shape:
            return g, g
        if b.shape == (1,) and not (a.ndim == 2 and a.shape[1] == 1):
            return g, np.atleast_1d(g.sum())
        return g, g.sum(axis=0)
    return fwd, bwd


@register("mul")
def _mul():
    def fwd(v, attrs):
        a, b = v
        if a.shape != b.shape:
            raise _shape_error("mul", a, b)
        return a * b

    def bwd(g, v, out, attrs):
        a, b = v
        return g * b, g * a
    return fwd, bwd


@register("scale")
def _scale():
    def fwd(v, attrs):
        return attrs["c"] * v[0]

    def bwd(g, v, out, attrs):
        return (attrs["c"] * g,)
    return fwd, bwd


@register("concat")
def _concat():
    def fwd(v, attrs):
        try:
            return np.concatenate(v, axis=attrs.get("axis", -1))
        except ValueError:
            bad = next((x for x in v[1:] if x.ndim != v[0].ndim or x.shape[:-1] != v[0].shape[:-1]), v[-1])
            raise _shape_error("concat", v[0], bad) from None

    def bwd(g, v, out, attrs):
        axis = attrs.get("axis", -1)
        cuts = np.cumsum([x.shape[axis] for x in v])[:-1]
        return tuple(np.split(g, cuts, axis=axis))
    return fwd, bwd


@register("stack")
def _stack():
    def fwd(v, attrs):
        for x in v[1:]:
            if x.shape != v[0].shape:
                raise _shape_error("stack", v[0], x)
        return np.stack(v, axis=0)

    def bwd(g, v, out, attrs):
        return tuple(g[i] for i in range(len(v)))
    return fwd, bwd


@register("transpose")
def _transpose():
    def fwd(v, attrs):
        if v[0].ndim != 2:
            raise ShapeError(f"transpose: expected a matrix, got shape {v[0].shape}")
        return v[0].T

    def bwd(g, v, out, attrs):
        return (g.T,)
    return fwd, bwd


@register("repeat_rows")
def _repeat_rows():
    def fwd(v, attrs):
        if v[0].ndim != 1:
            raise ShapeError(f"repeat_rows: expected a vector, got shape {v[0].shape}")
        return np.tile(v[0], (attrs["n"], 1))

    def bwd(g, v, out, attrs):
        return (g.sum(axis=0),)
    return fwd, bwd


@register("tanh")
def _tanh():
    def fwd(v, attrs):
        return np.tanh(v[0])

    def bwd(g, v, out, attrs):
        return (g * (1.0 - out * out),)
    return fwd, bwd


@register("sigmoid")
def _sigmoid():
    def fwd(v, attrs):
        x = v[0]
        # split by sign so exp never overflows
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bwd(g, v, out, attrs):
        return (g * out * (1.0 - out),)
    return fwd, bwd


@register("leaky_relu")
def _leaky_relu():
    def fwd(v, attrs):
        x = v[0]
        return np.where(x > 0, x, attrs.get("slope", 0.2) * x)

    def bwd(g, v, out, attrs):
        return (g * np.where(v[0] > 0, 1.0, attrs.get("slope", 0.2)),)
    return fwd, bwd


@register("elu")
def _elu():
    def fwd(v, attrs):
        x = v[0]
        alpha = attrs.get("alpha", 1.0)
        return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))

    def bwd(g, v, out, attrs):
        x = v[0]
        alpha = attrs.get("alpha", 1.0)
        return (g * np.where(x > 0, 1.0, out + alpha),)
    return fwd, bwd


@register("softmax")
def _softmax():
    # over the last axis
    def fwd(v, attrs):
        x = v[0]
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def bwd(g, v, out, attrs):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return fwd, bwd


@register("mean")
def _mean():
    def fwd(v, attrs):
        return np.asarray(v[0].mean())

    def bwd(g, v, out, attrs):
        return (np.full_like(v[0], g / v[0].size),)
    return fwd, bwd


@register("mean_rows")
def _mean_rows():
    def fwd(v, attrs):
        if v[0].ndim != 2:
            raise ShapeError(f"mean_rows: expected a matrix, got shape {v[0].shape}")
        return v[0].mean(axis=0)

    def bwd(g, v, out, attrs):
        n = v[0].shape[0]
        return (np.tile(g / n, (n, 1)),)
    return fwd, bwd


@register("bce")
def _bce():
    """Mean binary cross-entropy of predictions against constant labels."""
    def fwd(v, attrs):
        p = v[0]
        y = attrs["labels"]
        if p.shape != y.shape:
            raise _shape_error("bce", p, y)
        eps = attrs.get("eps", 1e-12)
        q = np.clip(p, eps, 1.0 - eps)
        return np.asarray(np.mean(-y * np.log(q) - (1.0 - y) * np.log(1.0 - q)))

    def bwd(g, v, out, attrs):
        p = v[0]
        y = attrs["labels"]
        eps = attrs.get("eps", 1e-12)
        inside = (p > eps) & (p < 1.0 - eps)
        q = np.clip(p, eps, 1.0 - eps)
        d = (-y / q + (1.0 - y) / (1.0 - q)) / p.size
        return (g * np.where(inside, d, 0.0),)
    return fwd, bwd


@register("gather")
def _gather():
    """Rows of a table by integer index."""
    def fwd(v, attrs):
        table = v[0]
        idx = attrs["index"]
        if table.ndim != 2:
            raise ShapeError(f"gather: expected a table, got shape {table.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise IndexError(f"gather: index out of range for table with {table.shape[0]} rows")
        return table[idx]

    def bwd(g, v, out, attrs):
        grad = np.zeros_like(v[0])
        np.add.at(grad, attrs["index"], g)
        return (grad,)
    return fwd, bwd


@register("pooled_gather")
def _pooled_gather():
    """Weighted sum of table rows per sample: index and weight are (n, L)."""
    def fwd(v, attrs):
        table = v[0]
        idx, w = attrs["index"], attrs["weight"]
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise IndexError(f"pooled_gather: index out of range for table with {table.shape[0]} rows")
        return np.einsum("nl,nld->nd", w, table[idx])

    def bwd(g, v, out, attrs):
        idx, w = attrs["index"], attrs["weight"]
        grad = np.zeros_like(v[0])
        np.add.at(grad, idx.ravel(), (w[..., None] * g[:, None, :]).reshape(-1, g.shape[1]))
        return (grad,)
    return fwd, bwd


def forward(tape: Tape, op_kind: str, *inputs: Node, **attrs) -> Node:
    return tape.apply(op_kind, *inputs, **attrs)


def op_kinds() -> list[str]:
    return sorted(_OPS)
