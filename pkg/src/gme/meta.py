"""Two-minibatch meta-training of generator parameters with the base model frozen.

For one old ad with disjoint minibatches D_a and D_b::

    r0  = generator(ad attributes, neighbors)
    l_a = BCE over D_a using r0
    r0' = r0 - eta * dl_a/dr0
    l_b = BCE over D_b using r0'
    l   = beta * l_a + (1 - beta) * l_b

The gradient of l with respect to the generator parameters flows through
r0 only. Differentiating l_b through the inner step brings in the Hessian of
l_a with respect to r0; ``exact-hvp`` mode evaluates that product by central
differences of the reverse-mode gradient, ``first-order`` drops it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import partial
from typing import Callable

import numpy as np

from . import ops
from .ctr import BaseModel, Batch, make_batch
from .data import Dataset, InsufficientSamplesError, sample_disjoint_minibatches
from .generators import Generator, GeneratorInput, init_generator
from .gradcheck import hvp_fd
from .optim import Adam
from .tape import NumericOverflowError, Tape

log = logging.getLogger(__name__)

MODES = ("exact-hvp", "first-order")


@dataclass(frozen=True)
class MetaConfig:
    beta: float = 0.1
    eta: float = 0.1
    M: int = 20
    lr: float = 1e-3
    epochs: int = 10
    seed: int = 0
    mode: str = "exact-hvp"

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class MetaTask:
    ad: int
    batch_a: Batch
    batch_b: Batch
    inp: GeneratorInput
    loss_a: Callable | None = None  # r -> (loss, grad) over batch_a; filled by bind()
    loss_b: Callable | None = None

    def bind(self, model: BaseModel) -> "MetaTask":
        """Attach the per-minibatch objectives, closed-form when the model is frozen."""
        if model.frozen:
            self.loss_a, self.loss_b = model.id_objective(self.batch_a), model.id_objective(self.batch_b)
        else:
            self.loss_a = partial(cold_loss, batch=self.batch_a, model=model)
            self.loss_b = partial(cold_loss, batch=self.batch_b, model=model)
        return self


class MetaGradientError(FloatingPointError):
    pass


def cold_loss(r0, batch: Batch, model: BaseModel) -> tuple[float, np.ndarray]:
    """Mean BCE over ``batch`` with ``r0`` as the ad ID embedding, and its gradient in r0."""
    tape = Tape()
    r = tape.leaf(r0, "r0")
    loss = ops.bce(model.graph(tape, batch, id_embedding=r), batch.labels)
    return float(loss.value), tape.backward(loss)["r0"]


def inner_adapt(r0, grad_r, eta: float) -> np.ndarray:
    return np.asarray(r0, dtype=np.float64) - eta * np.asarray(grad_r, dtype=np.float64)


def meta_loss(task: MetaTask, gen: Generator, model: BaseModel, cfg: MetaConfig) -> tuple[float, float, float]:
    """(l, l_a, l_b) for one task."""
    if task.loss_a is None:
        task.bind(model)
    r0 = gen.build(Tape(), task.inp, trainable=False).value
    la, ga = task.loss_a(r0)
    lb, _ = task.loss_b(inner_adapt(r0, ga, cfg.eta))
    return cfg.beta * la + (1.0 - cfg.beta) * lb, la, lb


def meta_grad(task: MetaTask, gen: Generator, model: BaseModel, cfg: MetaConfig):
    """Gradient of the combined loss with respect to every generator parameter.

    Returns ``(grads, (l, l_a, l_b))``.
    """
    if task.loss_a is None:
        task.bind(model)
    tape = Tape()
    r0 = gen.build(tape, task.inp, trainable=True)
    la, ga = task.loss_a(r0.value)
    r1 = inner_adapt(r0.value, ga, cfg.eta)
    lb, gb = task.loss_b(r1)
    back = gb
    if cfg.mode == "exact-hvp":
        hv = hvp_fd(lambda r: task.loss_a(r)[1], r0.value, gb)
        back = gb - cfg.eta * hv
    if not (np.isfinite(la) and np.isfinite(lb)):
        raise MetaGradientError(f"non-finite meta loss on ad {task.ad}")
    u = cfg.beta * ga + (1.0 - cfg.beta) * back
    grads = tape.backward(ops.matmul(r0, tape.const(u)))
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise MetaGradientError(f"non-finite meta-gradient for {k} on ad {task.ad}")
    return grads, (cfg.beta * la + (1.0 - cfg.beta) * lb, la, lb)


def make_task(ds: Dataset, ad: int, inp: GeneratorInput, model: BaseModel, M: int, rng) -> MetaTask:
    ra, rb = sample_disjoint_minibatches(ds, ad, M, rng)
    ba = make_batch(ds, ra)
    bb = make_batch(ds, rb)
    return MetaTask(ad, ba, bb, inp).bind(model)


def eligible_ads(ds: Dataset, M: int) -> list[int]:
    return [a for a, n in sorted(ds.ad_counts.items()) if n >= 2 * M]


def train_meta(old: Dataset, model: BaseModel, gen: Generator, cfg: MetaConfig, inputs_for_epoch):
    """Adam on the generator parameters, one step per (ad, minibatch pair) task.

    ``inputs_for_epoch(epoch)`` returns a mapping ad -> GeneratorInput; it is
    called once per epoch so neighbor ties can be re-drawn. Returns the
    trained generator and the per-epoch loss curve.
    """
    if not model.frozen:
        raise ValueError("the base model must be frozen before meta-training")
    if not gen.trainable:
        return gen, []
    ads = eligible_ads(old, cfg.M)
    if not ads:
        raise ValueError(f"no old ad has the {2 * cfg.M} samples a task needs")
    before = model.digest()
    gen = replace(gen, params={k: v.copy() for k, v in gen.params.items()})
    opt = Adam(lr=cfg.lr)
    curve = []
    for epoch in range(cfg.epochs):
        inputs = inputs_for_epoch(epoch)
        order = np.random.default_rng([cfg.seed, epoch, 7]).permutation(ads)
        sums = np.zeros(3)
        count = skipped = 0
        for ad in order:
            if gen.variant == "NgbEmb" and not len(inputs[int(ad)].P):
                skipped += 1  # nothing to average
                continue
            rng = np.random.default_rng([cfg.seed, epoch, int(ad)])
            try:
                task = make_task(old, int(ad), inputs[int(ad)], model, cfg.M, rng)
            except InsufficientSamplesError:
                skipped += 1
                continue
            try:
                grads, losses = meta_grad(task, gen, model, cfg)
            except NumericOverflowError as e:
                raise MetaGradientError(f"meta-training diverged at epoch {epoch}, ad {ad}: {e}") from e
            opt.step(gen.params, grads)
            sums += losses
            count += 1
        if skipped:
            log.warning("epoch %d: skipped %d ads without enough samples or neighbors", epoch, skipped)
        mean = sums / max(count, 1)
        curve.append({"epoch": epoch, "task_count": count,
                      "mean_l": float(mean[0]), "mean_l_a": float(mean[1]), "mean_l_b": float(mean[2])})
        log.info("%s epoch %d: l=%.5f l_a=%.5f l_b=%.5f", gen.name, epoch, *mean)
    if model.digest() != before:
        raise AssertionError("base model parameters changed during meta-training")
    return gen, curve


def new_generator(variant: str, model: BaseModel, gamma=None, gat=True, seed=0) -> Generator:
    return init_generator(variant, model.dim, model.attr_width, gamma=gamma, gat=gat, seed=seed)
