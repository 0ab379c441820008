import numpy as np
import pytest
from hypothesis import given, strategies as st

from gme.data import (
    ConfigError, Dataset, Field, InsufficientSamplesError, Role, Sample, Schema, Vocabulary, decode, encode,
    gen_synthetic, load_movielens, parse_title, partition_new_ads, read_csv, sample_disjoint_minibatches,
    split_old_new, write_csv,
)

from conftest import write_fake_ml1m

SCHEMA = Schema((Field("ad", Role.ID), Field("brand", Role.ATTR), Field("tags", Role.ATTR, multi=True),
                 Field("user", Role.OTHER)))


def make_samples():
    return [
        Sample(1, "a1", {"brand": "b1", "tags": ("x", "y")}, {"user": "u1"}),
        Sample(0, "a2", {"brand": "b2", "tags": ()}, {"user": "u2"}),
        Sample(1, "a1", {"brand": "b1", "tags": ("y",)}, {"user": "u3"}),
    ]


def test_schema_roles_are_validated():
    with pytest.raises(ConfigError):
        Schema((Field("a", Role.ID), Field("b", Role.ID), Field("c", Role.ATTR)))
    with pytest.raises(ConfigError):
        Schema((Field("a", Role.ID), Field("u", Role.OTHER)))
    assert Schema.from_json(SCHEMA.to_json()) == SCHEMA


def test_vocabulary_indices_contiguous_with_oov_last():
    ds = Dataset.from_samples(SCHEMA, make_samples())
    v = ds.vocab
    for f in SCHEMA.names:
        toks = v.tokens(f)
        assert [v.index(f, t) for t in toks] == list(range(len(toks)))
        assert v.oov(f) == len(toks) == v.size(f) - 1


def test_encode_known_unknown_and_round_trip():
    ds = Dataset.from_samples(SCHEMA, make_samples())
    enc = encode(Sample(0, "a1", {"brand": "never-seen", "tags": ("x",)}, {"user": "u1"}), SCHEMA, ds.vocab)
    assert enc["ad"] == ds.vocab.index("ad", "a1")
    assert enc["brand"] == ds.vocab.oov("brand")
    for i, s in enumerate(make_samples()):
        dec = decode(ds.encoded(i), SCHEMA, ds.vocab)
        assert dec["ad"] == s.ad_id and dec["brand"] == s.attributes["brand"]
        assert dec["tags"] == (s.attributes["tags"] or (None,))


@given(tokens=st.lists(st.text("abcdef", min_size=1, max_size=4), min_size=1, max_size=30))
def test_round_trip_any_in_vocabulary_token(tokens):
    v = Vocabulary.build(SCHEMA, {"ad": tokens, "brand": tokens, "tags": [tuple(tokens)], "user": tokens})
    assert all(v.token("brand", v.index("brand", t)) == t for t in tokens)


def test_dataset_is_read_only_and_counts_match(corpus):
    with pytest.raises(ValueError):
        corpus.labels[0] = 1
    counts = corpus.ad_counts
    ids = corpus.columns[corpus.schema.id_field.name]
    assert all(int((ids == ad).sum()) == n for ad, n in counts.items())
    assert sum(counts.values()) == len(corpus)


def test_parse_title():
    assert parse_title("Toy Story (1995)") == ("1995", ("toy", "story"))
    assert parse_title("City of Lost Children, The (1995)") == ("1995", ("city", "of", "lost", "children", "the"))
    assert parse_title("No Year") == ("", ("no", "year"))


def test_load_movielens_labels_fields_and_bad_rows(tmp_path):
    root = write_fake_ml1m(tmp_path / "ml", extra_lines=["garbage line", "1::999::5::1", "2::3::x::1"])
    ds = load_movielens(root / "ratings.dat", root / "movies.dat", root / "users.dat")
    assert len(ds.schema.fields) == 8 and ds.skipped_rows == 3
    assert [f.role for f in ds.schema.fields].count(Role.ATTR) == 3
    raw = [l.split("::") for l in (root / "ratings.dat").read_text().splitlines()[:-3]]
    assert len(ds) == len(raw)
    assert np.array_equal(ds.labels, [1.0 if int(r[2]) >= 4 else 0.0 for r in raw])
    first = ds.sample(0)
    assert first.attributes["year"] == "1981" and "movie" in first.attributes["title"]


def test_load_movielens_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_movielens(tmp_path / "r", tmp_path / "m", tmp_path / "u")


def test_split_exact_partition_on_controlled_counts():
    counts = [5, 10, 15, 20]
    ds = gen_synthetic(4, counts, 2, 6, 0, n_clusters=3)
    old, new = split_old_new(ds, 10)
    assert sorted(old.ad_counts.values()) == [15, 20] and sorted(new.ad_counts.values()) == [5, 10]
    everything, none = split_old_new(ds, 0)
    assert len(everything) == len(ds) and len(none) == 0
    with pytest.raises(ConfigError):
        split_old_new(ds, 20)


def test_partition_new_ads():
    ds = gen_synthetic(5, [10, 61, 70, 80, 60], 2, 6, 0, n_clusters=3)
    rounds, test = partition_new_ads(ds, 2, 30)
    assert len(rounds) == 2
    for r in rounds:
        assert sorted(r.ad_counts.values()) == [30, 30, 30]
    assert len(test) + sum(len(r) for r in rounds) == len(ds)
    assert sorted(test.ad_counts.values()) == [1, 10, 10, 20, 60]
    rounds0, test0 = partition_new_ads(ds, 0, 30)
    assert rounds0 == [] and len(test0) == len(ds)


def test_partition_is_disjoint_and_seeded():
    ds = gen_synthetic(3, 50, 2, 6, 0, n_clusters=3)
    a = partition_new_ads(ds, 1, 20, seed=3)
    b = partition_new_ads(ds, 1, 20, seed=3)
    assert np.array_equal(a[0][0].labels, b[0][0].labels)


def test_disjoint_minibatches(corpus):
    ad = corpus.ads()[0]
    n = corpus.ad_counts[ad]
    a, b = sample_disjoint_minibatches(corpus, ad, n // 2, np.random.default_rng(0))
    assert len(a) == len(b) == n // 2 and not set(a) & set(b)
    assert set(a) | set(b) == set(corpus.rows_by_ad[ad])
    a2, b2 = sample_disjoint_minibatches(corpus, ad, 5, np.random.default_rng(9))
    a3, b3 = sample_disjoint_minibatches(corpus, ad, 5, np.random.default_rng(9))
    assert np.array_equal(a2, a3) and np.array_equal(b2, b3)
    with pytest.raises(InsufficientSamplesError):
        sample_disjoint_minibatches(corpus, ad, n, np.random.default_rng(0))


def test_synthetic_is_seed_deterministic():
    a, b = gen_synthetic(20, 30, 3, 10, 4), gen_synthetic(20, 30, 3, 10, 4)
    assert np.array_equal(a.labels, b.labels)
    assert all(np.array_equal(a.columns[k], b.columns[k]) for k in a.columns)
    assert not np.array_equal(a.labels, gen_synthetic(20, 30, 3, 10, 5).labels)


def test_synthetic_without_signal_is_balanced():
    ds = gen_synthetic(100, 100, 3, 10, 1, attr_scale=0, cluster_scale=0, ad_scale=0, user_scale=0,
                       affinity_scale=0)
    assert abs(ds.positive_rate() - 0.5) < 0.02


def test_synthetic_rejects_clusters_without_tokens():
    with pytest.raises(ConfigError):
        gen_synthetic(5, 10, 2, 6, 0, n_clusters=8)


def test_synthetic_generic_tokens_are_cluster_free():
    ds = gen_synthetic(200, 5, 3, 16, 2, purity=0.0, generic_tokens=3)
    assert ds.planted["ad_tokens"].min() >= 16


def test_csv_round_trip(tmp_path, corpus):
    small = corpus.subset(np.arange(50))
    write_csv(small, tmp_path / "d.csv")
    back = read_csv(tmp_path / "d.csv", small.schema)
    assert np.array_equal(back.labels, small.labels)
    assert [back.sample(i) for i in range(len(back))] == [small.sample(i) for i in range(len(small))]
