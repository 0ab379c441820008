"""Attribute-sharing ad graph built from a reverse index over old ads."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping

import numpy as np

# ad -> {field name: tuple of attribute token indices}
AdAttributes = Mapping[str, tuple[int, ...]]


@dataclass(frozen=True)
class ReverseIndex:
    postings: dict[tuple[str, int], tuple[int, ...]]
    n_ads: int
    dropped: tuple[tuple[str, int], ...] = ()

    def __len__(self) -> int:
        return len(self.postings)

    def get(self, field: str, token: int) -> tuple[int, ...]:
        return self.postings.get((field, token), ())

    def dump(self, vocab=None) -> str:
        """Sorted ``field:token<TAB>id,id,...`` lines, tokens decoded when a vocabulary is given."""
        lines = []
        for (f, t), ids in self.postings.items():
            tok = vocab.token(f, t) if vocab is not None else None
            lines.append(f"{f}:{tok if tok is not None else t}\t{','.join(str(i) for i in ids)}")
        return "\n".join(sorted(lines)) + ("\n" if lines else "")


@dataclass(frozen=True)
class NeighborSet:
    query: int | None
    ids: tuple[int, ...]
    scores: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)


def build_reverse_index(old_ads: Mapping[int, AdAttributes], max_fraction: float | None = None) -> ReverseIndex:
    """Map every (field, token) to the sorted old ads carrying it.

    Tokens carried by more than ``max_fraction`` of the old ads are dropped
    when ``max_fraction`` is set.
    """
    post: dict[tuple[str, int], set[int]] = defaultdict(set)
    for ad, attrs in old_ads.items():
        for f, toks in attrs.items():
            for t in toks:
                post[(f, int(t))].add(int(ad))
    n = len(old_ads)
    dropped = []
    if max_fraction is not None and n:
        limit = max_fraction * n
        dropped = sorted(k for k, v in post.items() if len(v) > limit)
        for k in dropped:
            del post[k]
    return ReverseIndex({k: tuple(sorted(v)) for k, v in sorted(post.items())}, n, tuple(dropped))


def score_candidates(query: AdAttributes, index: ReverseIndex, exclude: int | None = None) -> dict[int, int]:
    """Shared-attribute score per candidate; each field contributes at most 1."""
    scores: dict[int, int] = defaultdict(int)
    for f, toks in query.items():
        hit: set[int] = set()
        for t in toks:
            hit.update(index.get(f, int(t)))
        for ad in hit:
            scores[ad] += 1
    if exclude is not None:
        scores.pop(exclude, None)
    return dict(scores)


def retrieve_neighbors(query: AdAttributes, index: ReverseIndex, N: int, rng: np.random.Generator,
                       exclude: int | None = None) -> NeighborSet:
    """Top-N old ads by shared-attribute score, ties broken uniformly at random."""
    if N < 0:
        raise ValueError(f"N must be >= 0, got {N}")
    scores = score_candidates(query, index, exclude)
    if N == 0 or not scores:
        return NeighborSet(exclude, (), ())
    ids = np.array(sorted(scores), dtype=np.int64)
    sc = np.array([scores[i] for i in ids], dtype=np.int64)
    perm = rng.permutation(len(ids))
    order = perm[np.argsort(-sc[perm], kind="stable")][:N]
    return NeighborSet(exclude, tuple(int(i) for i in ids[order]), tuple(int(s) for s in sc[order]))


def build_graph(queries: Mapping[int, AdAttributes], index: ReverseIndex, N: int, rng: np.random.Generator,
                exclude_self: bool = False) -> dict[int, NeighborSet]:
    """Neighbor sets for many ads, visited in sorted ad order so the rng stream is reproducible."""
    out = {}
    for ad in sorted(queries):
        nb = retrieve_neighbors(queries[ad], index, N, rng, exclude=ad if exclude_self else None)
        out[ad] = NeighborSet(ad, nb.ids, nb.scores)
    return out


def neighbor_tensors(nbrs: NeighborSet, model, ad_attrs: Mapping[int, AdAttributes]):
    """Pre-trained ID embeddings (n, d) and attribute vectors (n, K*d) of the neighbors."""
    d = model.dim
    if not nbrs.ids:
        return np.zeros((0, d)), np.zeros((0, model.attr_width))
    P = model.id_embeddings(nbrs.ids)
    Z = np.stack([model.attribute_vector(ad_attrs[i]) for i in nbrs.ids])
    return P, Z


def generator_inputs(model, query_attrs: Mapping[int, AdAttributes], graph: Mapping[int, NeighborSet],
                     old_attrs: Mapping[int, AdAttributes]) -> dict:
    """GeneratorInput per query ad from its attributes and neighbor set."""
    from .generators import GeneratorInput

    out = {}
    for ad, attrs in query_attrs.items():
        P, Z = neighbor_tensors(graph[ad], model, old_attrs)
        out[ad] = GeneratorInput(model.attribute_vector(attrs), P, Z)
    return out
