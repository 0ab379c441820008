"""AUC / log-loss metrics and the cold-start and warm-up evaluation protocol."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from functools import partial
from typing import Mapping

import numpy as np
from scipy.stats import rankdata

from .ctr import BaseModel, bce_loss, make_batch
from .data import Dataset
from .generators import Generator, GeneratorInput
from .meta import cold_loss
from .optim import AdamState, adam_update

PHASES = ("cold", "warm-1", "warm-2")


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Rank-sum AUC; tied scores share their mid-rank and so count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class PhaseResult:
    phase: str
    variant: str
    auc: float
    loss: float
    n: int
    seed: int

    def row(self) -> dict:
        return asdict(self)


def initial_embeddings(gen: Generator, inputs: Mapping[int, GeneratorInput], seed: int) -> dict[int, np.ndarray]:
    """r0 for every ad, built from attributes and neighbors only."""
    out = {}
    for ad in sorted(inputs):
        out[ad] = gen(inputs[ad], rng=np.random.default_rng([seed, ad]))
    return out


def score(test: Dataset, model: BaseModel, embeddings: Mapping[int, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Predictions for every test row using its ad's supplied ID embedding (rows in test order)."""
    preds = np.empty(len(test))
    for ad, rows in test.rows_by_ad.items():
        preds[rows] = model.predict(make_batch(test, rows), id_embedding=embeddings[ad])
    return preds, test.labels


def eval_cold(test: Dataset, model: BaseModel, embeddings: Mapping[int, np.ndarray], variant: str = "",
              seed: int = 0, phase: str = "cold") -> PhaseResult:
    """Pooled AUC and loss over all test samples."""
    preds, labels = score(test, model, embeddings)
    return PhaseResult(phase, variant, auc(preds, labels), bce_loss(preds, labels), len(test), seed)


@dataclass(frozen=True)
class WarmupConfig:
    lr: float = 1e-3
    batch_size: int = 1
    passes: int = 1


def warm_update(r0, ds: Dataset, rows, model: BaseModel, cfg: WarmupConfig) -> np.ndarray:
    """Adam on one ad's ID embedding over its warm-up rows, everything else frozen."""
    r = np.array(r0, dtype=np.float64)
    state = AdamState.like(r, lr=cfg.lr)
    objectives = [model.id_objective(make_batch(ds, rows[s:s + cfg.batch_size])) if model.frozen
                  else partial(cold_loss, batch=make_batch(ds, rows[s:s + cfg.batch_size]), model=model)
                  for s in range(0, len(rows), cfg.batch_size)]
    for _ in range(cfg.passes):
        for objective in objectives:
            _, g = objective(r)
            r, state = adam_update(r, g, state)
    return r


def run_warmup(rounds: list[Dataset], test: Dataset, model: BaseModel, embeddings: Mapping[int, np.ndarray],
               cfg: WarmupConfig = WarmupConfig(), variant: str = "", seed: int = 0) -> list[PhaseResult]:
    """Cold result followed by one result per warm-up round.

    Embeddings are carried from round to round; only ads present in a
    round's data are updated in it.
    """
    if not rounds:
        raise ValueError("run_warmup needs at least one round")
    before = model.digest()
    emb = {ad: np.array(v) for ad, v in embeddings.items()}
    results = [eval_cold(test, model, emb, variant, seed)]
    for k, data in enumerate(rounds, start=1):
        for ad, rows in data.rows_by_ad.items():
            emb[ad] = warm_update(emb[ad], data, rows, model, cfg)
        results.append(eval_cold(test, model, emb, variant, seed, phase=f"warm-{k}"))
    if model.digest() != before:
        raise AssertionError("base model parameters changed during warm-up")
    return results


def write_results_csv(results: list[PhaseResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "phase", "seed", "auc", "loss"])
        for r in results:
            w.writerow([r.variant, r.phase, r.seed, repr(r.auc), repr(r.loss)])


def summarize(results: list[PhaseResult]) -> dict[tuple[str, str], tuple[float, float, int]]:
    """Seed-averaged (auc, loss, n_seeds) per (variant, phase)."""
    acc: dict[tuple[str, str], list[PhaseResult]] = {}
    for r in results:
        acc.setdefault((r.variant, r.phase), []).append(r)
    return {k: (float(np.mean([r.auc for r in v])), float(np.mean([r.loss for r in v])), len(v))
            for k, v in acc.items()}


def format_table(results: list[PhaseResult]) -> str:
    summary = summarize(results)
    variants = list(dict.fromkeys(r.variant for r in results))
    phases = [p for p in list(dict.fromkeys(r.phase for r in results))]
    head = f"{'variant':<14}" + "".join(f"{p + ' AUC':>12}{p + ' loss':>12}" for p in phases)
    lines = [head, "-" * len(head)]
    for v in variants:
        cells = ""
        for p in phases:
            a, l, _ = summary.get((v, p), (float("nan"), float("nan"), 0))
            cells += f"{a:>12.4f}{l:>12.4f}"
        lines.append(f"{v:<14}{cells}")
    return "\n".join(lines) + "\n"
