import numpy as np
import pytest
from hypothesis import settings

from gme import ops
from gme.ctr import BaseTrainConfig, train_base
from gme.data import gen_synthetic, split_old_new
from gme.gradcheck import finite_diff_grad, rel_error
from gme.tape import Tape

settings.register_profile("default", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("default")


def scalarize(out, rng):
    """Random linear functional of a node, so every output entry gets a distinct weight."""
    w = rng.normal(size=out.shape)
    return ops.mean(ops.mul(out, out.tape.const(w))) if out.value.ndim else out


def tape_and_fd(build, values: dict, seed=0, h=1e-5):
    """Reverse-mode and central-difference gradients of a scalarized ``build``.

    ``build(tape, nodes)`` maps leaf nodes (by name) to an output node.
    Returns {name: (reverse, finite-difference)}.
    """
    w_seed = np.random.SeedSequence(seed).generate_state(1)[0]

    def loss_node(tape, vals):
        nodes = {k: tape.leaf(v, k) for k, v in vals.items()}
        return scalarize(build(tape, nodes), np.random.default_rng(w_seed))

    tape = Tape()
    out = loss_node(tape, values)
    rev = tape.backward(out)
    res = {}
    for name in values:
        def f(x, name=name):
            vals = dict(values, **{name: x})
            return float(loss_node(Tape(), vals).value)
        res[name] = (rev[name], finite_diff_grad(f, values[name], h=h))
    return res


def max_rel(pairs) -> float:
    return max(rel_error(a, b) for a, b in pairs.values())


@pytest.fixture(scope="session")
def corpus():
    """Small seeded corpus: 60 old ads with 80 samples, 20 new ads with 30."""
    counts = np.r_[np.full(60, 80), np.full(20, 30)]
    return gen_synthetic(len(counts), counts, 3, 24, 5, n_users=50)


@pytest.fixture(scope="session")
def split(corpus):
    return split_old_new(corpus, 50)


@pytest.fixture(scope="session")
def frozen_model(split):
    old, _ = split
    model, _ = train_base(old, BaseTrainConfig(dim=6, hidden=(16, 8), epochs=1, seed=1))
    return model.freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_fake_ml1m(root, n_movies=12, n_users=30, seed=0, extra_lines=()):
    """Tiny directory in the MovieLens-1M '::' format; movie k gets about 4k ratings."""
    rng = np.random.default_rng(seed)
    genres = ["Action", "Comedy", "Drama", "Children's", "Animation"]
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "movies.dat", "w", encoding="latin-1") as fh:
        for m in range(1, n_movies + 1):
            g = "|".join(rng.choice(genres, size=1 + m % 3, replace=False))
            fh.write(f"{m}::Movie Number {m}, The ({1980 + m % 7})::{g}\n")
    with open(root / "users.dat", "w", encoding="latin-1") as fh:
        for u in range(1, n_users + 1):
            fh.write(f"{u}::{'MF'[u % 2]}::{[1, 18, 25, 35][u % 4]}::{u % 21}::{10000 + u}\n")
    with open(root / "ratings.dat", "w", encoding="latin-1") as fh:
        for m in range(1, n_movies + 1):
            for u in rng.choice(np.arange(1, n_users + 1), size=min(4 * m, n_users), replace=False):
                fh.write(f"{u}::{m}::{rng.integers(1, 6)}::97830{m:04d}\n")
        for line in extra_lines:
            fh.write(line + "\n")
    return root
