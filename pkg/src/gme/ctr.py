"""Embedding + MLP click model and its training loop."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .data import PAD, Dataset, Role, Schema, Vocabulary
from .optim import Adam
from .tape import NumericOverflowError, Tape

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GMECKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


def schema_hash(schema: Schema, vocab: Vocabulary | None = None) -> str:
    payload = {"schema": schema.to_json()}
    if vocab is not None:
        payload["vocab"] = vocab.to_json()
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class Batch:
    """Encoded rows ready for the model: per-field index arrays plus pooling weights."""
    labels: np.ndarray
    index: dict[str, np.ndarray]
    weight: dict[str, np.ndarray]  # only multi-valued fields
    ad: np.ndarray
    blocks: dict[str, np.ndarray] | None = None  # cached frozen-model lookups, see BaseModel.cache_blocks

    def __len__(self) -> int:
        return len(self.labels)


def make_batch(ds: Dataset, rows=None) -> Batch:
    rows = np.arange(len(ds)) if rows is None else np.asarray(rows, dtype=np.int64)
    index, weight = {}, {}
    for f in ds.schema.fields:
        col = ds.columns[f.name][rows]
        if f.multi:
            mask = col != PAD
            n = mask.sum(axis=1, keepdims=True)
            weight[f.name] = mask / np.maximum(n, 1)
            index[f.name] = np.where(mask, col, 0)
        else:
            index[f.name] = col
    return Batch(ds.labels[rows], index, weight, ds.ad_column[rows])


@dataclass
class BaseModel:
    """Frozen-able parameter set: one embedding table per field plus the MLP.

    Parameters live in ``params`` under the names ``emb/<field>``,
    ``fc<k>/w``, ``fc<k>/b``, ``out/w`` and ``out/b``. FC weights are stored
    as (out, in).
    """
    schema: Schema
    vocab: Vocabulary
    dim: int
    hidden: tuple[int, ...]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: bool = False

    @classmethod
    def init(cls, schema: Schema, vocab: Vocabulary, dim: int = 10, hidden=(128, 64), seed: int = 0,
             emb_init: float = 0.01) -> "BaseModel":
        rng = np.random.default_rng(seed)
        params = {}
        for f in schema.fields:
            params[f"emb/{f.name}"] = rng.uniform(-emb_init, emb_init, size=(vocab.size(f.name), dim))
        width = dim * len(schema.fields)
        for k, h in enumerate(hidden):
            params[f"fc{k}/w"] = fan_in_uniform(rng, h, width)
            params[f"fc{k}/b"] = np.zeros(h)
            width = h
        params["out/w"] = fan_in_uniform(rng, 1, width)[0]
        params["out/b"] = np.zeros(1)
        return cls(schema, vocab, dim, tuple(hidden), params)

    # -- structure ---------------------------------------------------------

    @property
    def id_name(self) -> str:
        return self.schema.id_field.name

    @property
    def attr_width(self) -> int:
        return self.dim * len(self.schema.attr_fields)

    def freeze(self) -> "BaseModel":
        for v in self.params.values():
            v.flags.writeable = False
        self.frozen = True
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "BaseModel":
        return BaseModel(self.schema, self.vocab, self.dim, self.hidden,
                         {k: v.copy() for k, v in self.params.items()})

    # -- lookups used by the generators --------------------------------------

    def id_embeddings(self, ads) -> np.ndarray:
        return self.params[f"emb/{self.id_name}"][np.asarray(ads, dtype=np.int64)]

    def field_vector(self, field_name: str, tokens) -> np.ndarray:
        """Mean of the token embeddings of one field."""
        table = self.params[f"emb/{field_name}"]
        toks = [t for t in tokens if t != PAD] or [self.vocab.oov(field_name)]
        return table[toks].mean(axis=0)

    def attribute_vector(self, attrs) -> np.ndarray:
        """Concatenated pooled attribute embeddings in schema order."""
        return np.concatenate([self.field_vector(f.name, attrs[f.name]) for f in self.schema.attr_fields])

    # -- forward -----------------------------------------------------------

    def field_embeddings(self, batch: Batch, skip_id: bool = False) -> dict[str, np.ndarray]:
        """Per-field (n, d) embedding blocks computed outside any tape."""
        out = {}
        for f in self.schema.fields:
            if skip_id and f.role is Role.ID:
                continue
            table = self.params[f"emb/{f.name}"]
            idx = batch.index[f.name]
            out[f.name] = np.einsum("nl,nld->nd", batch.weight[f.name], table[idx]) if f.multi else table[idx]
        return out

    def cache_blocks(self, batch: Batch) -> Batch:
        """Attach the non-ID embedding lookups of a frozen model to ``batch``.

        Only valid for calls that substitute the ID embedding.
        """
        if not self.frozen:
            raise ValueError("lookups can only be cached against a frozen model")
        batch.blocks = self.field_embeddings(batch, skip_id=True)
        return batch

    def graph(self, tape: Tape, batch: Batch, trainable: bool = False, id_embedding=None):
        """Record the prediction for ``batch`` on ``tape``.

        With ``trainable`` every parameter becomes a leaf named after it.
        ``id_embedding`` (a node or array of length d) replaces the ad-ID
        lookup for every row. Returns the (n,) prediction node.
        """
        n = len(batch)
        if trainable:
            p = {k: tape.leaf(v, k) for k, v in self.params.items()}
        else:
            p = {k: tape.const(v) for k, v in self.params.items() if not k.startswith("emb/")}
            blocks = batch.blocks if batch.blocks is not None else \
                self.field_embeddings(batch, skip_id=id_embedding is not None)
        pieces = []
        for f in self.schema.fields:
            if f.role is Role.ID and id_embedding is not None:
                r = id_embedding if hasattr(id_embedding, "tape") else tape.const(id_embedding)
                if r.shape != (self.dim,):
                    raise ValueError(f"id embedding must have shape ({self.dim},), got {r.shape}")
                pieces.append(ops.repeat_rows(r, n))
            elif not trainable:
                pieces.append(tape.const(blocks[f.name]))
            elif f.multi:
                pieces.append(ops.pooled_gather(p[f"emb/{f.name}"], batch.index[f.name], batch.weight[f.name]))
            else:
                pieces.append(ops.gather(p[f"emb/{f.name}"], batch.index[f.name]))
        h = ops.concat(pieces)
        for k in range(len(self.hidden)):
            h = ops.tanh(ops.dense(h, p[f"fc{k}/w"], p[f"fc{k}/b"]))
        logit = ops.add(ops.matmul(h, p["out/w"]), p["out/b"])
        return ops.sigmoid(logit)

    def id_objective(self, batch: Batch) -> "IdObjective":
        """Closed-form BCE and its gradient in a substituted ID embedding, for a frozen model."""
        if not self.frozen:
            raise ValueError("id_objective needs a frozen model")
        return IdObjective(self, batch)

    def predict(self, batch: Batch, id_embedding=None, chunk: int = 8192) -> np.ndarray:
        out = []
        for s in range(0, len(batch), chunk):
            sub = _slice_batch(batch, slice(s, s + chunk))
            out.append(self.graph(Tape(), sub, id_embedding=id_embedding).value)
        return np.concatenate(out) if out else np.zeros(0)


class IdObjective:
    """r -> (mean BCE, d/dr) over one batch with ``r`` substituted for every row's ID embedding.

    The ID embedding only shifts the first layer's pre-activation by a
    row-constant ``W_id r``, so the contribution of every other field is
    computed once here. Agrees with the tape path to rounding.
    """

    def __init__(self, model: BaseModel, batch: Batch, eps: float = 1e-12):
        d = model.dim
        blocks = batch.blocks if batch.blocks is not None else model.field_embeddings(batch, skip_id=True)
        pos = [f.role for f in model.schema.fields].index(Role.ID)
        layers = [(model.params[f"fc{k}/w"], model.params[f"fc{k}/b"]) for k in range(len(model.hidden))]
        layers.append((model.params["out/w"][None, :], model.params["out/b"]))
        W0, b0 = layers[0]
        rest = [blocks[f.name] for f in model.schema.fields if f.role is not Role.ID]
        W_rest = np.delete(W0, np.s_[pos * d:(pos + 1) * d], axis=1)
        self.W_id = W0[:, pos * d:(pos + 1) * d]
        self.pre0 = np.concatenate(rest, axis=1) @ W_rest.T + b0 if rest else np.broadcast_to(b0, (len(batch), len(b0)))
        self.layers = layers[1:]
        self.labels = batch.labels
        self.eps = eps
        self.n_hidden = len(model.hidden)

    def __call__(self, r) -> tuple[float, np.ndarray]:
        acts = []
        h = self.pre0 + self.W_id @ np.asarray(r, dtype=np.float64)
        if self.n_hidden:
            h = np.tanh(h)
            acts.append(h)
            for k, (W, b) in enumerate(self.layers):
                h = h @ W.T + b
                if k < len(self.layers) - 1:
                    h = np.tanh(h)
                    acts.append(h)
        logit = h[:, 0]
        e = np.exp(-np.abs(logit))
        p = np.where(logit >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        y = self.labels
        q = np.clip(p, self.eps, 1.0 - self.eps)
        loss = float(np.mean(-y * np.log(q) - (1.0 - y) * np.log(1.0 - q)))
        inside = (p > self.eps) & (p < 1.0 - self.eps)
        g = np.where(inside, (-y / q + (1.0 - y) / (1.0 - q)) / len(y), 0.0) * p * (1.0 - p)
        g = g[:, None]
        for W, _ in reversed(self.layers):
            h = acts.pop()
            g = (g @ W) * (1.0 - h * h)
        return loss, self.W_id.T @ g.sum(axis=0)


def fan_in_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_out, n_in))


def _slice_batch(b: Batch, s) -> Batch:
    blocks = None if b.blocks is None else {k: v[s] for k, v in b.blocks.items()}
    return Batch(b.labels[s], {k: v[s] for k, v in b.index.items()}, {k: v[s] for k, v in b.weight.items()},
                 b.ad[s], blocks)


def forward(batch: Batch, model: BaseModel, tape: Tape | None = None):
    """Prediction node for a batch (table lookups for every field)."""
    return model.graph(tape or Tape(), batch)


def forward_with_id_embedding(batch: Batch, r0, model: BaseModel, tape: Tape | None = None):
    return model.graph(tape or Tape(), batch, id_embedding=r0)


def bce_loss(pred, labels, eps: float = 1e-12) -> float:
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    q = np.clip(np.asarray(pred, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-y * np.log(q) - (1.0 - y) * np.log(1.0 - q)))


@dataclass
class BaseTrainConfig:
    dim: int = 10
    hidden: tuple[int, ...] = (128, 64)
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 5
    seed: int = 0


def train_base(old: Dataset, cfg: BaseTrainConfig = BaseTrainConfig(), model: BaseModel | None = None):
    """Minibatch Adam on mean BCE over old-ad samples. Returns (model, per-epoch log)."""
    if len(old) == 0:
        raise ValueError("cannot train the base model on an empty dataset")
    if model is None:
        model = BaseModel.init(old.schema, old.vocab, cfg.dim, cfg.hidden, seed=cfg.seed)
    if model.frozen:
        raise ValueError("base model is frozen")
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(old))
        total, seen = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            batch = make_batch(old, order[s:s + cfg.batch_size])
            tape = Tape()
            try:
                pred = model.graph(tape, batch, trainable=True)
                loss = ops.bce(pred, batch.labels)
            except NumericOverflowError as e:
                raise TrainingDivergedError(f"base training diverged in epoch {epoch}: {e}") from e
            grads = tape.backward(loss)
            opt.step(model.params, grads)
            total += float(loss.value) * len(batch)
            seen += len(batch)
        for name, v in model.params.items():
            if not np.all(np.isfinite(v)):
                raise TrainingDivergedError(f"parameter {name} is non-finite after epoch {epoch}")
        history.append({"epoch": epoch, "loss": total / seen})
        log.info("base epoch %d loss %.5f", epoch, total / seen)
    return model, history


# ---------------------------------------------------------------------------
# checkpoint container


def save_params(path, params: dict[str, np.ndarray], header: dict) -> None:
    """Write magic, version, JSON header (with shapes), then little-endian f8 payloads."""
    names = sorted(params)
    head = dict(header)
    head["format_version"] = CHECKPOINT_VERSION
    head["tensors"] = [{"name": n, "shape": list(np.shape(params[n]))} for n in names]
    blob = json.dumps(head, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    pre = len(CHECKPOINT_MAGIC) + 12
    if len(raw) < pre or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[len(CHECKPOINT_MAGIC):pre])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < pre + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        head = json.loads(raw[pre:pre + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    offset = pre + hlen
    params = {}
    for t in head["tensors"]:
        shape = tuple(t["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {t['name']}")
        params[t["name"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, head


def save_checkpoint(model: BaseModel, path) -> None:
    save_params(path, model.params, {
        "kind": "base-model",
        "schema_hash": schema_hash(model.schema, model.vocab),
        "schema": model.schema.to_json(),
        "dim": model.dim,
        "hidden": list(model.hidden),
    })


def load_checkpoint(path, schema: Schema, vocab: Vocabulary) -> BaseModel:
    params, head = load_params(path)
    if head.get("kind") != "base-model":
        raise CheckpointError(f"{path}: not a base-model checkpoint")
    if head.get("schema_hash") != schema_hash(schema, vocab):
        raise CheckpointError(f"{path}: schema hash mismatch")
    return BaseModel(schema, vocab, int(head["dim"]), tuple(head["hidden"]), params)
