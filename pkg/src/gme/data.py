"""Datasets of labeled ad impressions.

A :class:`Dataset` stores its samples column-wise as vocabulary indices:
single-valued fields as ``(n,)`` int arrays and multi-valued fields as
``(n, L)`` arrays padded with ``-1``. Ads are identified by the vocabulary
index of the ad-identity field.
"""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD = -1


class ConfigError(ValueError):
    """Invalid configuration or a split that leaves nothing to work with."""


class InsufficientSamplesError(ValueError):
    pass


class Role(str, Enum):
    ID = "ad-identity"
    ATTR = "ad-attribute"
    OTHER = "other"


@dataclass(frozen=True)
class Field:
    name: str
    role: Role
    multi: bool = False


@dataclass(frozen=True)
class Schema:
    fields: tuple[Field, ...]

    def __post_init__(self):
        roles = [f.role for f in self.fields]
        if roles.count(Role.ID) != 1:
            raise ConfigError("schema needs exactly one ad-identity field")
        if Role.ATTR not in roles:
            raise ConfigError("schema needs at least one ad-attribute field")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate field names in {names}")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    @property
    def id_field(self) -> Field:
        return next(f for f in self.fields if f.role is Role.ID)

    @property
    def attr_fields(self) -> list[Field]:
        return [f for f in self.fields if f.role is Role.ATTR]

    @property
    def other_fields(self) -> list[Field]:
        return [f for f in self.fields if f.role is Role.OTHER]

    def __getitem__(self, name: str) -> Field:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    def to_json(self) -> list[dict]:
        return [{"name": f.name, "role": f.role.value, "multi": f.multi} for f in self.fields]

    @classmethod
    def from_json(cls, items) -> "Schema":
        return cls(tuple(Field(d["name"], Role(d["role"]), bool(d["multi"])) for d in items))


class Vocabulary:
    """Per-field token -> index maps. Index ``size(field) - 1`` is the field's OOV slot."""

    def __init__(self, tokens: dict[str, Sequence[str]]):
        self._itos = {f: list(toks) for f, toks in tokens.items()}
        self._stoi = {f: {t: i for i, t in enumerate(toks)} for f, toks in self._itos.items()}

    @classmethod
    def build(cls, schema: Schema, columns: dict[str, Sequence]) -> "Vocabulary":
        tokens = {}
        for f in schema.fields:
            col = columns[f.name]
            seen = {t for row in col for t in row} if f.multi else set(col)
            tokens[f.name] = sorted(seen)
        return cls(tokens)

    def size(self, field_name: str) -> int:
        """Number of embedding rows needed, including OOV."""
        return len(self._itos[field_name]) + 1

    def oov(self, field_name: str) -> int:
        return len(self._itos[field_name])

    def index(self, field_name: str, token: str) -> int:
        return self._stoi[field_name].get(token, len(self._itos[field_name]))

    def token(self, field_name: str, index: int) -> str | None:
        toks = self._itos[field_name]
        return toks[index] if 0 <= index < len(toks) else None

    def tokens(self, field_name: str) -> list[str]:
        return list(self._itos[field_name])

    def to_json(self) -> dict:
        return {f: list(t) for f, t in self._itos.items()}

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos


@dataclass
class Sample:
    label: int
    ad_id: str
    attributes: dict[str, str | tuple[str, ...]]
    other: dict[str, str | tuple[str, ...]] = field(default_factory=dict)


EncodedSample = dict  # field name -> int, or tuple[int, ...] for multi-valued fields


def encode(sample: Sample, schema: Schema, vocab: Vocabulary) -> EncodedSample:
    out = {}
    for f in schema.fields:
        if f.role is Role.ID:
            raw = sample.ad_id
        elif f.role is Role.ATTR:
            raw = sample.attributes.get(f.name)
        else:
            raw = sample.other.get(f.name)
        if f.multi:
            toks = tuple(raw) if raw else ()
            out[f.name] = tuple(vocab.index(f.name, t) for t in toks) or (vocab.oov(f.name),)
        else:
            out[f.name] = vocab.oov(f.name) if raw is None else vocab.index(f.name, raw)
    return out


def decode(enc: EncodedSample, schema: Schema, vocab: Vocabulary) -> dict:
    out = {}
    for f in schema.fields:
        v = enc[f.name]
        out[f.name] = tuple(vocab.token(f.name, i) for i in v) if f.multi else vocab.token(f.name, v)
    return out


def _pad(rows: list[Sequence[int]], oov: int) -> np.ndarray:
    width = max((len(r) for r in rows), default=1) or 1
    arr = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        if len(r) == 0:
            arr[i, 0] = oov
        else:
            arr[i, : len(r)] = r
    return arr


class Dataset:
    """Immutable column store of encoded samples sharing one schema and vocabulary."""

    def __init__(self, schema: Schema, vocab: Vocabulary, labels, columns: dict[str, np.ndarray]):
        self.schema = schema
        self.vocab = vocab
        self.labels = np.asarray(labels, dtype=np.float64)
        self.columns = columns
        for arr in columns.values():
            arr.setflags(write=False)
        self.labels.setflags(write=False)
        self._rows_by_ad: dict[int, np.ndarray] | None = None
        self.skipped_rows = 0
        self.planted: dict | None = None

    @classmethod
    def from_tokens(cls, schema: Schema, labels, token_columns: dict[str, Sequence], vocab: Vocabulary | None = None):
        """Encode raw token columns; multi-valued columns hold token sequences."""
        if vocab is None:
            vocab = Vocabulary.build(schema, token_columns)
        cols = {}
        for f in schema.fields:
            raw = token_columns[f.name]
            if f.multi:
                rows = [[vocab.index(f.name, t) for t in row] for row in raw]
                cols[f.name] = _pad(rows, vocab.oov(f.name))
            else:
                cols[f.name] = np.fromiter((vocab.index(f.name, t) for t in raw), dtype=np.int64, count=len(raw))
        return cls(schema, vocab, labels, cols)

    @classmethod
    def from_samples(cls, schema: Schema, samples: Iterable[Sample], vocab: Vocabulary | None = None):
        samples = list(samples)
        cols: dict[str, list] = {f.name: [] for f in schema.fields}
        for s in samples:
            for f in schema.fields:
                if f.role is Role.ID:
                    raw = s.ad_id
                elif f.role is Role.ATTR:
                    raw = s.attributes.get(f.name, () if f.multi else "")
                else:
                    raw = s.other.get(f.name, () if f.multi else "")
                cols[f.name].append(tuple(raw) if f.multi else raw)
        return cls.from_tokens(schema, [s.label for s in samples], cols, vocab)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def ad_column(self) -> np.ndarray:
        return self.columns[self.schema.id_field.name]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.schema, self.vocab, self.labels[rows], {k: v[rows] for k, v in self.columns.items()})

    @property
    def rows_by_ad(self) -> dict[int, np.ndarray]:
        """Row indices of each ad, in corpus order."""
        if self._rows_by_ad is None:
            ads = self.ad_column
            order = np.argsort(ads, kind="stable")
            keys, starts = np.unique(ads[order], return_index=True)
            bounds = list(starts[1:]) + [len(order)]
            self._rows_by_ad = {int(k): order[s:e] for k, s, e in zip(keys, starts, bounds)}
        return self._rows_by_ad

    @property
    def ad_counts(self) -> dict[int, int]:
        return {a: len(r) for a, r in self.rows_by_ad.items()}

    def ads(self) -> list[int]:
        return sorted(self.rows_by_ad)

    def encoded(self, i: int) -> EncodedSample:
        out = {}
        for f in self.schema.fields:
            v = self.columns[f.name][i]
            out[f.name] = tuple(int(t) for t in v if t != PAD) if f.multi else int(v)
        return out

    def sample(self, i: int) -> Sample:
        dec = decode(self.encoded(i), self.schema, self.vocab)
        attrs = {f.name: dec[f.name] for f in self.schema.attr_fields}
        other = {f.name: dec[f.name] for f in self.schema.other_fields}
        return Sample(int(self.labels[i]), dec[self.schema.id_field.name], attrs, other)

    def samples(self) -> Iterator[Sample]:
        return (self.sample(i) for i in range(len(self)))

    def ad_attributes(self) -> dict[int, dict[str, tuple[int, ...]]]:
        """Attribute indices per ad, taken from the ad's first sample."""
        out = {}
        for ad, rows in self.rows_by_ad.items():
            enc = self.encoded(int(rows[0]))
            out[ad] = {
                f.name: (enc[f.name] if f.multi else (enc[f.name],)) for f in self.schema.attr_fields
            }
        return out

    def positive_rate(self) -> float:
        return float(self.labels.mean()) if len(self) else float("nan")


# ---------------------------------------------------------------------------
# MovieLens-1M

ML1M_SCHEMA = Schema((
    Field("movie_id", Role.ID),
    Field("year", Role.ATTR),
    Field("title", Role.ATTR, multi=True),
    Field("genres", Role.ATTR, multi=True),
    Field("user_id", Role.OTHER),
    Field("gender", Role.OTHER),
    Field("age", Role.OTHER),
    Field("occupation", Role.OTHER),
))

_YEAR = re.compile(r"\((\d{4})\)\s*$")
_PUNCT = re.compile(r"[^\w\s]")


def parse_title(title: str) -> tuple[str, tuple[str, ...]]:
    """Split 'Toy Story (1995)' into ('1995', ('toy', 'story'))."""
    m = _YEAR.search(title)
    year = m.group(1) if m else ""
    name = title[: m.start()] if m else title
    return year, tuple(_PUNCT.sub(" ", name.lower()).split())


def _read_rows(path, n_cols: int, what: str):
    path = Path(path)
    try:
        text = path.read_bytes().decode("latin-1")
    except OSError as e:
        raise OSError(f"cannot read {what} file {path}: {e}") from e
    rows, bad = [], 0
    for line in text.splitlines():
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != n_cols:
            bad += 1
            continue
        rows.append(parts)
    return rows, bad


def load_movielens(ratings_path, movies_path, users_path) -> Dataset:
    """Load the ML-1M ``::``-separated files; label is 1 iff rating >= 4."""
    movies, bad_m = _read_rows(movies_path, 3, "movies")
    users, bad_u = _read_rows(users_path, 5, "users")
    ratings, bad_r = _read_rows(ratings_path, 4, "ratings")
    movie_info = {}
    for mid, title, genres in movies:
        year, toks = parse_title(title)
        movie_info[mid] = (year, toks, tuple(g for g in genres.split("|") if g))
    user_info = {u[0]: (u[1], u[2], u[3]) for u in users}

    cols: dict[str, list] = {f.name: [] for f in ML1M_SCHEMA.fields}
    labels = []
    skipped = bad_m + bad_u + bad_r
    for uid, mid, rating, _ts in ratings:
        if mid not in movie_info or uid not in user_info:
            skipped += 1
            continue
        try:
            r = int(rating)
        except ValueError:
            skipped += 1
            continue
        year, toks, genres = movie_info[mid]
        gender, age, occ = user_info[uid]
        labels.append(1 if r >= 4 else 0)
        cols["movie_id"].append(mid)
        cols["year"].append(year)
        cols["title"].append(toks)
        cols["genres"].append(genres)
        cols["user_id"].append(uid)
        cols["gender"].append(gender)
        cols["age"].append(age)
        cols["occupation"].append(occ)
    if skipped:
        log.warning("skipped %d malformed MovieLens rows", skipped)
    ds = Dataset.from_tokens(ML1M_SCHEMA, labels, cols)
    ds.skipped_rows = skipped
    return ds


# ---------------------------------------------------------------------------
# splits and sampling


def split_old_new(ds: Dataset, threshold: int, min_new_count: int = 1) -> tuple[Dataset, Dataset]:
    """Ads with more than ``threshold`` samples are old; the rest are new.

    New ads with fewer than ``min_new_count`` samples are dropped.
    """
    if threshold < 0:
        raise ConfigError(f"threshold must be >= 0, got {threshold}")
    old_rows, new_rows = [], []
    for ad, rows in ds.rows_by_ad.items():
        if len(rows) > threshold:
            old_rows.append(rows)
        elif len(rows) >= min_new_count:
            new_rows.append(rows)
    if not old_rows:
        raise ConfigError(f"no ad has more than {threshold} samples; the old partition is empty")
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    return ds.subset(cat(old_rows)), ds.subset(cat(new_rows))


def partition_new_ads(new: Dataset, warm_rounds: int, per_round: int, seed: int | None = None):
    """Split each new ad's samples into warm-up rounds and a test remainder.

    An ad needs at least ``warm_rounds * per_round + 1`` samples to take part
    in warm-up; otherwise all its samples are test. Samples are taken in
    corpus order, or in a seeded per-ad shuffle when ``seed`` is given.

    Returns ``(rounds, test)`` where ``rounds`` is a list of Datasets.
    """
    need = warm_rounds * per_round
    rng = np.random.default_rng(seed) if seed is not None else None
    round_rows: list[list[np.ndarray]] = [[] for _ in range(warm_rounds)]
    test_rows = []
    for ad in new.ads():
        rows = new.rows_by_ad[ad]
        if rng is not None:
            rows = rng.permutation(rows)
        if need == 0 or len(rows) < need + 1:
            test_rows.append(rows)
            continue
        for k in range(warm_rounds):
            round_rows[k].append(rows[k * per_round:(k + 1) * per_round])
        test_rows.append(rows[need:])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    return [new.subset(cat(r)) for r in round_rows], new.subset(cat(test_rows))


def sample_disjoint_minibatches(ds: Dataset, ad: int, M: int, rng: np.random.Generator):
    """Two disjoint row-index arrays of size M for one ad, drawn without replacement."""
    rows = ds.rows_by_ad.get(ad)
    if rows is None or len(rows) < 2 * M:
        have = 0 if rows is None else len(rows)
        raise InsufficientSamplesError(f"ad {ad} has {have} samples, needs {2 * M}")
    pick = rng.choice(rows, size=2 * M, replace=False)
    return pick[:M], pick[M:]


# ---------------------------------------------------------------------------
# synthetic corpus


def synthetic_schema(n_attr_fields: int) -> Schema:
    return Schema(
        (Field("ad_id", Role.ID),)
        + tuple(Field(f"attr{k}", Role.ATTR) for k in range(n_attr_fields))
        + (Field("user_id", Role.OTHER), Field("user_group", Role.OTHER))
    )


def gen_synthetic(
    n_ads: int,
    n_samples_per_ad,
    n_attr_fields: int = 3,
    attr_cardinality: int = 40,
    click_model_seed: int = 0,
    *,
    n_users: int = 200,
    n_clusters: int = 8,
    purity: float = 0.7,
    attr_scale: float = 0.3,
    cluster_scale: float = 1.0,
    ad_scale: float = 0.3,
    user_scale: float = 0.5,
    affinity_scale: float = 0.7,
    base_logit: float = 0.0,
    generic_tokens: int = 0,
) -> Dataset:
    """Seeded corpus with a planted logistic click model.

    Every ad belongs to a latent cluster. Each attribute token is tied to one
    cluster; an ad takes a token of its own cluster with probability
    ``purity`` and a uniformly random token otherwise. The click logit is::

        base_logit + sum of per-token attribute weights + cluster effect
        + per-ad noise + user bias + user-cluster affinity

    so attributes and attribute-sharing neighbors both carry signal about an
    ad's click rate. With ``generic_tokens > 0`` each field also has that many
    cluster-free tokens, and the off-cluster draws come from them instead of
    from the whole vocabulary. ``n_samples_per_ad`` is an int or a per-ad sequence.
    Setting all ``*_scale`` arguments to 0 gives a constant click rate of
    sigmoid(base_logit).
    """
    if min(n_ads, n_attr_fields, attr_cardinality, n_users, n_clusters) <= 0:
        raise ConfigError("gen_synthetic counts must be positive")
    counts = np.broadcast_to(np.asarray(n_samples_per_ad, dtype=np.int64), (n_ads,))
    if np.any(counts <= 0):
        raise ConfigError("every ad needs at least one sample")
    rng = np.random.default_rng(click_model_seed)

    if generic_tokens < 0:
        raise ConfigError("generic_tokens must be >= 0")
    if attr_cardinality < n_clusters:
        raise ConfigError(f"attr_cardinality {attr_cardinality} leaves some of the {n_clusters} clusters without tokens")
    token_cluster = np.arange(attr_cardinality) % n_clusters
    attr_w = rng.normal(0.0, attr_scale, size=(n_attr_fields, attr_cardinality + generic_tokens))
    cluster_eff = rng.normal(0.0, cluster_scale, size=n_clusters)
    user_bias = rng.normal(0.0, user_scale, size=n_users)
    affinity = rng.normal(0.0, affinity_scale, size=(n_users, n_clusters))

    ad_cluster = rng.integers(0, n_clusters, size=n_ads)
    ad_noise = rng.normal(0.0, ad_scale, size=n_ads)
    ad_tokens = np.empty((n_ads, n_attr_fields), dtype=np.int64)
    for a in range(n_ads):
        own = np.flatnonzero(token_cluster == ad_cluster[a])
        for f in range(n_attr_fields):
            if rng.random() < purity:
                ad_tokens[a, f] = rng.choice(own)
            elif generic_tokens:
                ad_tokens[a, f] = attr_cardinality + rng.integers(generic_tokens)
            else:
                ad_tokens[a, f] = rng.integers(attr_cardinality)
    ad_logit = cluster_eff[ad_cluster] + ad_noise + attr_w[np.arange(n_attr_fields), ad_tokens].sum(axis=1)

    ad_of_row = np.repeat(np.arange(n_ads), counts)
    user_of_row = rng.integers(0, n_users, size=len(ad_of_row))
    logit = base_logit + ad_logit[ad_of_row] + user_bias[user_of_row] + affinity[user_of_row, ad_cluster[ad_of_row]]
    labels = (rng.random(len(logit)) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int64)

    schema = synthetic_schema(n_attr_fields)
    cols = {"ad_id": [f"ad{a}" for a in ad_of_row]}
    for f in range(n_attr_fields):
        cols[f"attr{f}"] = [f"t{t}" for t in ad_tokens[ad_of_row, f]]
    cols["user_id"] = [f"u{u}" for u in user_of_row]
    cols["user_group"] = [f"g{u % 5}" for u in user_of_row]
    ds = Dataset.from_tokens(schema, labels, cols)
    ds.planted = {
        "ad_cluster": ad_cluster, "ad_tokens": ad_tokens, "attr_weights": attr_w,
        "cluster_effect": cluster_eff, "ad_logit": ad_logit,
    }
    return ds


# ---------------------------------------------------------------------------
# CSV


def write_csv(ds: Dataset, path) -> None:
    """label, ad id, then one column per remaining field; multi-valued joined by '|'."""
    id_name = ds.schema.id_field.name
    rest = [f for f in ds.schema.fields if f.role is not Role.ID]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", id_name] + [f.name for f in rest])
        for i in range(len(ds)):
            dec = decode(ds.encoded(i), ds.schema, ds.vocab)
            row = [int(ds.labels[i]), dec[id_name]]
            for f in rest:
                v = dec[f.name]
                row.append("|".join(t or "" for t in v) if f.multi else v)
            w.writerow(row)


def read_csv(path, schema: Schema) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        id_name = schema.id_field.name
        expected = ["label", id_name] + [f.name for f in schema.fields if f.role is not Role.ID]
        if header != expected:
            raise ConfigError(f"CSV header {header} does not match schema {expected}")
        labels = []
        cols: dict[str, list] = {f.name: [] for f in schema.fields}
        for row in r:
            labels.append(int(row[0]))
            for name, raw in zip(header[1:], row[1:]):
                f = schema[name]
                cols[name].append(tuple(t for t in raw.split("|") if t) if f.multi else raw)
    return Dataset.from_tokens(schema, labels, cols)
