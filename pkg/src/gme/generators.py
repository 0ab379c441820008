"""Initial ID-embedding generators for cold-start ads.

Variants:

* ``RndEmb``  - uniform noise, no parameters
* ``MetaEmb`` - gamma * tanh(W z0) from the ad's own attributes
* ``NgbEmb``  - gamma * tanh(W mean(p_i)) from neighbors' pre-trained ID embeddings
* ``GME-P``   - attention over [g0, p_1..p_n], then ELU
* ``GME-G``   - attention over [g0, g_1..g_n] with g_i generated by the same W
* ``GME-A``   - attention over attribute vectors [z0, z_1..z_n], then gamma * tanh(W z~0)

The GME variants accept ``gat=False``, which swaps attention for plain
average pooling of the same representations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ctr import fan_in_uniform, load_params, save_params, CheckpointError
from .tape import Node, ShapeError, Tape

VARIANTS = ("RndEmb", "MetaEmb", "NgbEmb", "GME-P", "GME-G", "GME-A")
GME_VARIANTS = ("GME-P", "GME-G", "GME-A")
TRAINABLE = ("MetaEmb", "NgbEmb", "GME-P", "GME-G", "GME-A")
DEFAULT_GAMMA = {"MetaEmb": 1.0, "NgbEmb": 0.25, "GME-P": 0.25, "GME-G": 1.0, "GME-A": 1.0}
RND_BOUND = 0.01


@dataclass
class GeneratorInput:
    """Attribute vector of the ad plus its neighbors' data.

    ``P`` holds pre-trained neighbor ID embeddings (n, d); ``Z`` holds
    neighbor attribute vectors (n, K*d). Either may have zero rows.
    """
    z0: np.ndarray
    P: np.ndarray
    Z: np.ndarray

    @property
    def n(self) -> int:
        return len(self.P) if len(self.P) else len(self.Z)


def eg_generate(z: Node, W: Node, gamma: float) -> Node:
    """gamma * tanh(W z)."""
    if W.value.shape[1] != z.value.shape[-1]:
        raise ShapeError(f"eg_generate: W shape {W.shape} does not accept z shape {z.shape}")
    return ops.scale(ops.tanh(ops.matmul(W, z)), gamma)


def gat_attention(query: Node, keys: list[Node], V: Node, a: Node):
    """Softmax attention weights of ``query`` over ``[query] + keys``.

    Returns ``(alpha, VX)`` where ``VX`` holds the transformed rows
    ``V x_j`` for j = 0..n, so callers can reuse it for aggregation.
    """
    # one matrix-vector product per row: a batched product may round equal rows differently
    rows = [ops.matmul(V, x) for x in [query] + list(keys)]
    scores = ops.stack([ops.matmul(ops.concat([rows[0], r]), a) for r in rows])
    return ops.softmax(ops.leaky_relu(scores, 0.2)), ops.stack(rows)


def gat_aggregate(alpha: Node, VX: Node) -> Node:
    """ELU of the attention-weighted sum of transformed values."""
    if alpha.shape[0] != VX.shape[0]:
        raise ShapeError(f"gat_aggregate: weights {alpha.shape} vs values {VX.shape}")
    return ops.elu(ops.matmul(alpha, VX))


def gat_aggregate_values(alpha: Node, values: list[Node], V: Node) -> Node:
    X = ops.stack(values)
    return gat_aggregate(alpha, ops.matmul(X, ops.transpose(V)))


def _run(variant, gamma, params, inp, gat=True) -> np.ndarray:
    return Generator(variant, gamma, params, gat, np.shape(params["W"])[0]).build(Tape(), inp, trainable=False).value


def meta_emb(z0, W, gamma: float) -> np.ndarray:
    return _run("MetaEmb", gamma, {"W": W}, GeneratorInput(np.asarray(z0, float), np.zeros((0, 0)), np.zeros((0, 0))))


def ngb_emb(P, W, gamma: float) -> np.ndarray:
    P = np.asarray(P, float)
    return _run("NgbEmb", gamma, {"W": W}, GeneratorInput(np.zeros(P.shape[1]), P, np.zeros((0, 0))))


def gme_p_init(z0, P, params, gamma: float, gat: bool = True) -> np.ndarray:
    P = np.asarray(P, float).reshape(-1, np.shape(params["W"])[0])
    return _run("GME-P", gamma, params, GeneratorInput(np.asarray(z0, float), P, np.zeros((0, len(z0)))), gat)


def gme_g_init(z0, Z, params, gamma: float, gat: bool = True) -> np.ndarray:
    Z = np.asarray(Z, float).reshape(-1, len(z0))
    return _run("GME-G", gamma, params, GeneratorInput(np.asarray(z0, float), np.zeros((0, 0)), Z), gat)


def gme_a_init(z0, Z, params, gamma: float, gat: bool = True) -> np.ndarray:
    Z = np.asarray(Z, float).reshape(-1, len(z0))
    return _run("GME-A", gamma, params, GeneratorInput(np.asarray(z0, float), np.zeros((0, 0)), Z), gat)


def rnd_emb(rng: np.random.Generator, dim: int) -> np.ndarray:
    return rng.uniform(-RND_BOUND, RND_BOUND, size=dim)


@dataclass
class Generator:
    variant: str
    gamma: float
    params: dict[str, np.ndarray] = field(default_factory=dict)
    gat: bool = True
    dim: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")

    @property
    def name(self) -> str:
        return self.variant if self.gat or self.variant not in GME_VARIANTS else f"{self.variant}\\GAT"

    @property
    def trainable(self) -> bool:
        return bool(self.params)

    def build(self, tape: Tape, inp: GeneratorInput, trainable: bool = True) -> Node:
        """Record r0 on ``tape``; with ``trainable`` the parameters are leaves named W, V, a."""
        mk = tape.leaf if trainable else (lambda v, name=None: tape.const(v))
        p = {k: mk(v, k) for k, v in self.params.items()}
        z0 = tape.const(inp.z0)
        g = self.gamma
        v = self.variant
        if v == "MetaEmb":
            return eg_generate(z0, p["W"], g)
        if v == "NgbEmb":
            if len(inp.P) == 0:
                raise ValueError("NgbEmb needs at least one neighbor")
            return eg_generate(ops.mean_rows(tape.const(inp.P)), p["W"], g)
        if v == "GME-P":
            g0 = eg_generate(z0, p["W"], g)
            keys = [tape.const(row) for row in inp.P]
            return self._refine(g0, keys, p)
        if v == "GME-G":
            g0 = eg_generate(z0, p["W"], g)
            keys = [eg_generate(tape.const(row), p["W"], g) for row in inp.Z]
            return self._refine(g0, keys, p)
        if v == "GME-A":
            keys = [tape.const(row) for row in inp.Z]
            z_ref = self._refine(z0, keys, p)
            return eg_generate(z_ref, p["W"], g)
        raise ValueError(f"{v} has no parametric generator")

    def _refine(self, query: Node, keys: list[Node], p) -> Node:
        if not self.gat:
            return ops.mean_rows(ops.stack([query] + keys))
        alpha, VX = gat_attention(query, keys, p["V"], p["a"])
        return gat_aggregate(alpha, VX)

    def attention(self, inp: GeneratorInput) -> np.ndarray:
        """Attention weights over [self] + neighbors, for inspection."""
        if self.variant not in GME_VARIANTS or not self.gat:
            raise ValueError(f"{self.name} does not attend")
        tape = Tape()
        p = {k: tape.const(v) for k, v in self.params.items()}
        z0 = tape.const(inp.z0)
        if self.variant == "GME-A":
            q, keys = z0, [tape.const(r) for r in inp.Z]
        else:
            q = eg_generate(z0, p["W"], self.gamma)
            src = inp.P if self.variant == "GME-P" else inp.Z
            keys = [tape.const(r) if self.variant == "GME-P" else eg_generate(tape.const(r), p["W"], self.gamma)
                    for r in src]
        return gat_attention(q, keys, p["V"], p["a"])[0].value

    def __call__(self, inp: GeneratorInput, rng: np.random.Generator | None = None) -> np.ndarray:
        """r0 for one ad. RndEmb (and NgbEmb without neighbors) draw from ``rng``."""
        if self.variant == "RndEmb" or (self.variant == "NgbEmb" and len(inp.P) == 0):
            if rng is None:
                raise ValueError(f"{self.name} needs an rng here")
            return rnd_emb(rng, self.dim)
        return self.build(Tape(), inp, trainable=False).value


def init_generator(variant: str, dim: int, attr_width: int, gamma: float | None = None,
                   gat: bool = True, seed: int = 0) -> Generator:
    """Fresh parameters: fan-in scaled uniform W and V, zero attention vector."""
    if gamma is None:
        gamma = DEFAULT_GAMMA.get(variant, 1.0)
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    if variant == "MetaEmb":
        params["W"] = fan_in_uniform(rng, dim, attr_width)
    elif variant == "NgbEmb":
        params["W"] = fan_in_uniform(rng, dim, dim)
    elif variant in ("GME-P", "GME-G"):
        params["W"] = fan_in_uniform(rng, dim, attr_width)
        if gat:
            params["V"] = fan_in_uniform(rng, dim, dim)
            params["a"] = np.zeros(2 * dim)
    elif variant == "GME-A":
        if gat:
            params["V"] = fan_in_uniform(rng, attr_width, attr_width)
            params["a"] = np.zeros(2 * attr_width)
        params["W"] = fan_in_uniform(rng, dim, attr_width)
    elif variant != "RndEmb":
        raise ValueError(f"unknown variant {variant!r}")
    return Generator(variant, gamma, params, gat, dim)


def save_generator(gen: Generator, path, extra: dict | None = None) -> None:
    header = {"kind": "generator", "variant": gen.variant, "gamma": gen.gamma, "gat": gen.gat, "dim": gen.dim}
    header.update(extra or {})
    save_params(path, gen.params, header)


def load_generator(path) -> Generator:
    params, head = load_params(path)
    if head.get("kind") != "generator":
        raise CheckpointError(f"{path}: not a generator checkpoint")
    return Generator(head["variant"], float(head["gamma"]), params, bool(head["gat"]), int(head["dim"]))
