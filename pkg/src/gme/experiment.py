"""Experiment configuration and the in-memory run of one configuration.

The CLI pipeline (:mod:`gme.pipeline`) persists what this module computes;
everything here is deterministic in (config, master seed).
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .ctr import BaseModel, BaseTrainConfig, train_base
from .data import ConfigError, Dataset, gen_synthetic, load_movielens, partition_new_ads, split_old_new
from .evaluate import PhaseResult, WarmupConfig, eval_cold, initial_embeddings, run_warmup
from .generators import DEFAULT_GAMMA, GME_VARIANTS, VARIANTS, Generator
from .graph import ReverseIndex, build_graph, build_reverse_index, generator_inputs
from .meta import MetaConfig, new_generator, train_meta

log = logging.getLogger(__name__)

CONFIG_VERSION = 1


def stream_seed(master: int, name: str) -> int:
    """Independent 63-bit seed for a named random stream of one run."""
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    threshold: int = 100
    min_new_count: int = 1
    dim: int = 10
    hidden: list = field(default_factory=lambda: [128, 64])
    base_lr: float = 1e-3
    base_batch_size: int = 256
    base_epochs: int = 5
    n_neighbors: int = 10
    max_posting_fraction: float | None = 0.2
    graph_fields: list | None = None
    gamma: dict = field(default_factory=lambda: dict(DEFAULT_GAMMA))
    beta: float = 0.1
    eta: float = 0.1
    M: int = 20
    meta_lr: float = 1e-3
    meta_epochs: int = 10
    meta_mode: str = "exact-hvp"
    variants: list = field(default_factory=lambda: list(VARIANTS))
    gat_ablation: bool = False
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    warm_rounds: int = 2
    warm_per_round: int = 30
    warm_lr: float = 1e-3
    warm_batch_size: int = 1
    version: int = CONFIG_VERSION

    def validate(self) -> "ExperimentConfig":
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version} is not supported (expected {CONFIG_VERSION})")
        kind = self.dataset.get("kind")
        if kind == "movielens":
            root = Path(self.dataset.get("path", ""))
            for name in ("ratings.dat", "movies.dat", "users.dat"):
                if not (root / name).is_file():
                    raise ConfigError(f"missing MovieLens file {root / name}")
        elif kind != "synthetic":
            raise ConfigError(f"unknown dataset kind {kind!r}")
        checks = [
            (self.threshold >= 0, "threshold must be >= 0"),
            (self.dim >= 1, "dim must be >= 1"),
            (self.n_neighbors >= 0, "n_neighbors must be >= 0"),
            (0.0 <= self.beta <= 1.0, "beta must lie in [0, 1]"),
            (self.eta >= 0, "eta must be >= 0"),
            (self.M >= 1, "M must be >= 1"),
            (self.meta_mode in ("exact-hvp", "first-order"), "meta_mode must be exact-hvp or first-order"),
            (self.max_posting_fraction is None or 0 < self.max_posting_fraction <= 1,
             "max_posting_fraction must lie in (0, 1]"),
            (self.warm_rounds >= 0 and self.warm_per_round >= 0, "warm-up sizes must be >= 0"),
            (len(self.seeds) >= 1, "at least one seed is required"),
            (self.base_epochs >= 0 and self.meta_epochs >= 0, "epoch counts must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        for v, g in self.gamma.items():
            if not 0.0 < float(g) <= 1.0:
                raise ConfigError(f"gamma for {v} must lie in (0, 1], got {g}")
        return self

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.gamma = {**DEFAULT_GAMMA, **cfg.gamma}
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_json(doc)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def base_config(self, seed: int) -> BaseTrainConfig:
        return BaseTrainConfig(self.dim, tuple(self.hidden), self.base_lr, self.base_batch_size, self.base_epochs,
                               stream_seed(seed, "init"))

    def meta_config(self, seed: int, variant: str) -> MetaConfig:
        return MetaConfig(self.beta, self.eta, self.M, self.meta_lr, self.meta_epochs,
                          stream_seed(seed, f"task-shuffle/{variant}"), self.meta_mode)

    def warm_config(self) -> WarmupConfig:
        return WarmupConfig(self.warm_lr, self.warm_batch_size)

    def variant_specs(self) -> list[tuple[str, bool]]:
        """(variant, gat) pairs to run, ablations last."""
        specs = [(v, True) for v in self.variants]
        if self.gat_ablation:
            specs += [(v, False) for v in self.variants if v in GME_VARIANTS]
        return specs


SYNTHETIC_DEFAULTS = dict(n_old_ads=1000, n_new_ads=200, old_samples=120, new_samples=80,
                          n_attr_fields=3, attr_cardinality=60, seed=0)


def load_dataset(spec: dict) -> Dataset:
    kind = spec.get("kind")
    if kind == "movielens":
        root = Path(spec["path"])
        return load_movielens(root / "ratings.dat", root / "movies.dat", root / "users.dat")
    if kind == "synthetic":
        p = {**SYNTHETIC_DEFAULTS, **{k: v for k, v in spec.items() if k != "kind"}}
        counts = np.r_[np.full(p.pop("n_old_ads"), p.pop("old_samples")), np.full(p.pop("n_new_ads"), p.pop("new_samples"))]
        n_fields = p.pop("n_attr_fields")
        card = p.pop("attr_cardinality")
        seed = p.pop("seed")
        return gen_synthetic(len(counts), counts, n_fields, card, seed, **p)
    raise ConfigError(f"unknown dataset kind {kind!r}")


@dataclass
class Splits:
    full: Dataset
    old: Dataset
    new: Dataset
    warm_rounds: list
    test: Dataset

    def summary(self) -> dict:
        return {
            "samples": len(self.full), "old_ads": len(self.old.ads()), "old_samples": len(self.old),
            "new_ads": len(self.new.ads()), "warmup_samples": [len(r) for r in self.warm_rounds],
            "test_samples": len(self.test), "skipped_rows": self.full.skipped_rows,
        }


def make_splits(cfg: ExperimentConfig, ds: Dataset | None = None) -> Splits:
    ds = load_dataset(cfg.dataset) if ds is None else ds
    old, new = split_old_new(ds, cfg.threshold, cfg.min_new_count)
    rounds, test = partition_new_ads(new, cfg.warm_rounds, cfg.warm_per_round)
    return Splits(ds, old, new, rounds, test)


class Run:
    """All per-seed state of one experiment, computed lazily and cached."""

    def __init__(self, cfg: ExperimentConfig, splits: Splits, seed: int):
        self.cfg = cfg
        self.splits = splits
        self.seed = seed
        self.model: BaseModel | None = None
        self.base_history: list = []
        self._index: ReverseIndex | None = None
        self._old_attrs = splits.old.ad_attributes()
        self._new_attrs = splits.new.ad_attributes()
        self._new_graph = None

    # -- stages ----------------------------------------------------------

    def train_base(self) -> BaseModel:
        if self.model is None:
            model, self.base_history = train_base(self.splits.old, self.cfg.base_config(self.seed))
            self.model = model.freeze()
        return self.model

    def set_model(self, model: BaseModel) -> None:
        self.model = model.freeze()

    def _graph_attrs(self, attrs):
        keep = self.cfg.graph_fields
        if keep is None:
            return attrs
        return {ad: {f: t for f, t in a.items() if f in keep} for ad, a in attrs.items()}

    @property
    def index(self) -> ReverseIndex:
        if self._index is None:
            self._index = build_reverse_index(self._graph_attrs(self._old_attrs), self.cfg.max_posting_fraction)
        return self._index

    def new_graph(self, n_neighbors: int | None = None):
        N = self.cfg.n_neighbors if n_neighbors is None else n_neighbors
        if n_neighbors is None and self._new_graph is not None:
            return self._new_graph
        g = build_graph(self._graph_attrs(self._new_attrs), self.index, N,
                        np.random.default_rng(stream_seed(self.seed, "graph-ties/new")))
        if n_neighbors is None:
            self._new_graph = g
        return g

    def set_new_graph(self, graph) -> None:
        self._new_graph = graph

    def old_inputs(self, epoch: int, n_neighbors: int):
        g = build_graph(self._graph_attrs(self._old_attrs), self.index, n_neighbors,
                        np.random.default_rng(stream_seed(self.seed, f"graph-ties/old/{epoch}")), exclude_self=True)
        return generator_inputs(self.model, self._old_attrs, g, self._old_attrs)

    def new_inputs(self, n_neighbors: int | None = None):
        return generator_inputs(self.model, self._new_attrs, self.new_graph(n_neighbors), self._old_attrs)

    def train_generator(self, variant: str, gat: bool = True, gamma: float | None = None,
                        n_neighbors: int | None = None) -> tuple[Generator, list]:
        model = self.train_base()
        N = self.cfg.n_neighbors if n_neighbors is None else n_neighbors
        g = self.cfg.gamma.get(variant, 1.0) if gamma is None else gamma
        tag = variant if gat else f"{variant}-nogat"
        gen = new_generator(variant, model, gamma=g, gat=gat, seed=stream_seed(self.seed, f"init/{tag}"))
        cache: dict[int, dict] = {}

        def inputs(epoch):
            if epoch not in cache:
                cache.clear()
                cache[epoch] = self.old_inputs(epoch, N)
            return cache[epoch]

        return train_meta(self.splits.old, model, gen, self.cfg.meta_config(self.seed, tag), inputs)

    def embeddings(self, gen: Generator, n_neighbors: int | None = None) -> dict:
        return initial_embeddings(gen, self.new_inputs(n_neighbors), stream_seed(self.seed, f"rnd/{gen.name}"))

    def evaluate(self, gen: Generator, warmup: bool = True, n_neighbors: int | None = None) -> list[PhaseResult]:
        emb = self.embeddings(gen, n_neighbors)
        if warmup and self.splits.warm_rounds:
            return run_warmup(self.splits.warm_rounds, self.splits.test, self.model, emb,
                              self.cfg.warm_config(), gen.name, self.seed)
        return [eval_cold(self.splits.test, self.model, emb, gen.name, self.seed)]


def compare_variants(cfg: ExperimentConfig, splits: Splits | None = None, warmup: bool = True):
    """Train and evaluate every configured variant over every seed. Returns PhaseResults."""
    splits = make_splits(cfg) if splits is None else splits
    results = []
    for seed in cfg.seeds:
        run = Run(cfg, splits, seed)
        for variant, gat in cfg.variant_specs():
            gen, _ = run.train_generator(variant, gat)
            results += run.evaluate(gen, warmup=warmup)
    return results


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw).validate()
