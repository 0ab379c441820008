from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gme.ctr import load_checkpoint, save_checkpoint
from gme.graph import build_graph, build_reverse_index, neighbor_tensors, retrieve_neighbors, score_candidates

TOY = {1: {"category": (1,)}, 2: {"category": (1,), "brand": (2,)}, 3: {"brand": (2,)}}


def brute_force_scores(query, old_ads):
    out = {}
    for ad, attrs in old_ads.items():
        s = sum(1 for f, toks in query.items() if set(toks) & set(attrs.get(f, ())))
        if s:
            out[ad] = s
    return out


def test_toy_index_postings():
    idx = build_reverse_index(TOY)
    assert idx.get("category", 1) == (1, 2) and idx.get("brand", 2) == (2, 3) and len(idx) == 2
    assert idx.dump() == "brand:2\t2,3\ncategory:1\t1,2\n"


def test_toy_query_scores():
    nb = retrieve_neighbors({"category": (1,), "brand": (2,)}, build_reverse_index(TOY), 3,
                            np.random.default_rng(0))
    assert nb.ids[0] == 2 and nb.scores == (2, 1, 1) and set(nb.ids[1:]) == {1, 3}


def test_empty_index_and_zero_n():
    idx = build_reverse_index({})
    assert len(idx) == 0 and idx.dump() == ""
    assert len(retrieve_neighbors({"brand": (2,)}, idx, 5, np.random.default_rng(0))) == 0
    assert len(retrieve_neighbors({"brand": (2,)}, build_reverse_index(TOY), 0, np.random.default_rng(0))) == 0
    with pytest.raises(ValueError):
        retrieve_neighbors({}, idx, -1, np.random.default_rng(0))


def test_index_is_deterministic():
    assert build_reverse_index(TOY) == build_reverse_index(dict(reversed(TOY.items())))


def test_common_tokens_are_dropped():
    ads = {i: {"f": (0, i)} for i in range(10)}
    idx = build_reverse_index(ads, max_fraction=0.2)
    assert idx.get("f", 0) == () and idx.dropped == (("f", 0),) and idx.get("f", 3) == (3,)


def test_multi_valued_field_counts_once():
    old = {7: {"title": (1, 2, 3), "year": (9,)}}
    assert score_candidates({"title": (1, 2), "year": (9,)}, build_reverse_index(old)) == {7: 2}


def random_corpus(rng, n_old, n_fields, card):
    old = {int(a): {f"f{k}": tuple(sorted(set(rng.integers(0, card, size=rng.integers(1, 3)).tolist())))
                    for k in range(n_fields)}
           for a in rng.choice(10_000, size=n_old, replace=False)}
    query = {f"f{k}": tuple(rng.integers(0, card, size=rng.integers(1, 3)).tolist()) for k in range(n_fields)}
    return old, query


@settings(max_examples=100)
@given(seed=st.integers(0, 2**32 - 1), n_old=st.integers(0, 500), n_fields=st.integers(1, 4),
       card=st.integers(2, 40), N=st.integers(1, 30))
def test_retrieval_matches_brute_force(seed, n_old, n_fields, card, N):
    rng = np.random.default_rng(seed)
    old, query = random_corpus(rng, n_old, n_fields, card)
    truth = brute_force_scores(query, old)
    idx = build_reverse_index(old)
    full = retrieve_neighbors(query, idx, len(old) + 1, rng)
    assert dict(zip(full.ids, full.scores)) == truth
    top = retrieve_neighbors(query, idx, N, rng)
    assert len(top) == min(N, len(truth))
    assert list(top.scores) == sorted(top.scores, reverse=True)
    assert all(truth[i] == s for i, s in zip(top.ids, top.scores))
    assert Counter(top.scores) == Counter(sorted(truth.values(), reverse=True)[:N])


def test_ties_depend_only_on_rng():
    old = {i: {"f": (0,)} for i in range(20)}
    idx = build_reverse_index(old)
    a = retrieve_neighbors({"f": (0,)}, idx, 5, np.random.default_rng(1))
    b = retrieve_neighbors({"f": (0,)}, idx, 5, np.random.default_rng(1))
    c = retrieve_neighbors({"f": (0,)}, idx, 5, np.random.default_rng(2))
    assert a == b and a.ids != c.ids and a.scores == c.scores


def test_graph_excludes_self():
    g = build_graph(TOY, build_reverse_index(TOY), 5, np.random.default_rng(0), exclude_self=True)
    assert all(ad not in nb.ids for ad, nb in g.items())
    assert g[2].scores == (1, 1)


def test_neighbor_tensors_shapes_and_checkpoint_values(tmp_path, split, frozen_model):
    old = split[0]
    attrs = old.ad_attributes()
    ads = old.ads()
    nb = retrieve_neighbors(attrs[ads[0]], build_reverse_index(attrs), 4, np.random.default_rng(0),
                            exclude=ads[0])
    P, Z = neighbor_tensors(nb, frozen_model, attrs)
    assert P.shape == (len(nb), frozen_model.dim)
    assert Z.shape == (len(nb), frozen_model.attr_width)
    save_checkpoint(frozen_model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", frozen_model.schema, frozen_model.vocab)
    assert np.array_equal(P, back.id_embeddings(nb.ids))


def test_oov_neighbor_attributes_are_well_defined(frozen_model):
    f = frozen_model.schema.attr_fields
    oov = {x.name: (frozen_model.vocab.oov(x.name),) for x in f}
    nb = retrieve_neighbors(oov, build_reverse_index({0: oov}), 1, np.random.default_rng(0))
    _, Z = neighbor_tensors(nb, frozen_model, {0: oov})
    assert np.all(np.isfinite(Z))
