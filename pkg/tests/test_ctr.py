import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gme import ops
from gme.ctr import (
    BaseModel, BaseTrainConfig, CheckpointError, bce_loss, forward, forward_with_id_embedding, load_checkpoint,
    make_batch, save_checkpoint, train_base,
)
from gme.data import gen_synthetic
from gme.evaluate import auc
from gme.gradcheck import finite_diff_grad
from gme.tape import Tape

from conftest import max_rel


@pytest.fixture(scope="module")
def small():
    return gen_synthetic(12, 15, 2, 8, 3, n_users=10, n_clusters=4)


def tiny_model(ds, seed=0, hidden=(5, 3)):
    m = BaseModel.init(ds.schema, ds.vocab, dim=3, hidden=hidden, seed=seed)
    rng = np.random.default_rng(seed)
    for k in m.params:
        if k.startswith("emb/"):
            m.params[k] = rng.normal(0, 0.5, size=m.params[k].shape)
    return m


def test_all_zero_params_predict_half(small):
    m = BaseModel.init(small.schema, small.vocab, dim=4, hidden=(6,))
    for v in m.params.values():
        v[...] = 0.0
    assert np.array_equal(m.predict(make_batch(small)), np.full(len(small), 0.5))


def test_zeroed_field_makes_its_tokens_irrelevant(small):
    m = tiny_model(small)
    f = small.schema.attr_fields[0].name
    m.params[f"emb/{f}"][...] = 0.0
    batch = make_batch(small)
    shuffled = make_batch(small)
    shuffled.index[f] = np.random.default_rng(0).permutation(shuffled.index[f])
    assert np.array_equal(m.predict(batch), m.predict(shuffled))


def test_output_in_unit_interval_and_shape(small, frozen_model, corpus):
    p = frozen_model.predict(make_batch(corpus, np.arange(40)))
    assert p.shape == (40,) and np.all((p > 0) & (p < 1))


@settings(max_examples=20)
@given(seed=st.integers(0, 2**32 - 1))
def test_base_model_gradient_against_fd(seed):
    ds = gen_synthetic(6, 5, 2, 6, seed % 1000, n_users=5, n_clusters=3)
    m = tiny_model(ds, seed % 97)
    batch = make_batch(ds, np.arange(12))
    tape = Tape()
    loss = ops.bce(m.graph(tape, batch, trainable=True), batch.labels)
    grads = tape.backward(loss)
    pairs = {}
    for name in ("fc0/w", "fc1/b", "out/w", f"emb/{ds.schema.attr_fields[0].name}"):
        base = m.params[name]

        def f(x, name=name):
            m.params[name] = x
            out = bce_loss(m.predict(batch), batch.labels)
            m.params[name] = base
            return out

        fd = finite_diff_grad(f, base.copy(), h=1e-6)
        pairs[name] = (grads[name], fd)
    assert max_rel(pairs) < 1e-4


def test_substituting_the_table_row_is_identity(corpus, frozen_model):
    ad = corpus.ads()[0]
    rows = corpus.rows_by_ad[ad]
    batch = make_batch(corpus, rows)
    plain = forward(batch, frozen_model).value
    sub = forward_with_id_embedding(batch, frozen_model.id_embeddings([ad])[0], frozen_model).value
    assert np.array_equal(plain, sub)


def test_substituted_embedding_shape_is_checked(corpus, frozen_model):
    with pytest.raises(ValueError):
        forward_with_id_embedding(make_batch(corpus, [0]), np.zeros(frozen_model.dim + 1), frozen_model)


@settings(max_examples=20)
@given(seed=st.integers(0, 2**32 - 1))
def test_gradient_in_id_embedding_against_fd(seed, corpus, frozen_model):
    rng = np.random.default_rng(seed)
    batch = make_batch(corpus, rng.choice(len(corpus), 20, replace=False))
    r0 = rng.normal(0, 0.3, frozen_model.dim)
    tape = Tape()
    r = tape.leaf(r0, "r")
    g = tape.backward(ops.bce(forward_with_id_embedding(batch, r, frozen_model, tape), batch.labels))["r"]
    fd = finite_diff_grad(lambda x: bce_loss(forward_with_id_embedding(batch, x, frozen_model).value,
                                             batch.labels), r0)
    assert max_rel({"r": (g, fd)}) < 1e-4


@settings(max_examples=20)
@given(seed=st.integers(0, 2**32 - 1))
def test_id_objective_agrees_with_tape(seed, corpus, frozen_model):
    rng = np.random.default_rng(seed)
    batch = make_batch(corpus, rng.choice(len(corpus), 15, replace=False))
    r0 = rng.normal(0, 1.0, frozen_model.dim)
    tape = Tape()
    r = tape.leaf(r0, "r")
    loss = ops.bce(forward_with_id_embedding(batch, r, frozen_model, tape), batch.labels)
    g = tape.backward(loss)["r"]
    val, grad = frozen_model.id_objective(batch)(r0)
    assert val == pytest.approx(float(loss.value), rel=1e-12)
    assert np.allclose(grad, g, rtol=1e-10, atol=1e-15)


def test_id_objective_without_hidden_layers(small):
    m = tiny_model(small, hidden=()).freeze()
    batch = make_batch(small)
    r0 = np.array([0.1, -0.2, 0.3])
    val, grad = m.id_objective(batch)(r0)
    fd = finite_diff_grad(lambda x: m.id_objective(batch)(x)[0], r0)
    assert val == pytest.approx(bce_loss(m.predict(batch, r0), batch.labels), rel=1e-12)
    assert max_rel({"r": (grad, fd)}) < 1e-6


def test_id_objective_needs_frozen_model(small):
    with pytest.raises(ValueError):
        tiny_model(small).id_objective(make_batch(small))


def test_bce_examples():
    assert bce_loss([0.5, 0.5], [0, 1]) == pytest.approx(math.log(2))
    assert bce_loss([1.0], [1.0]) < 1e-11
    assert bce_loss([0.0], [1.0]) == pytest.approx(-math.log(1e-12))


def test_training_learns_planted_signal():
    ds = gen_synthetic(50, 60, 3, 24, 11, n_users=40)
    m, _ = train_base(ds, BaseTrainConfig(dim=6, hidden=(16,), lr=0.01, epochs=3, seed=0))
    assert auc(m.predict(make_batch(ds)), ds.labels) > 0.65


def test_training_lowers_loss_and_zero_epochs_is_identity(small):
    init = BaseModel.init(small.schema, small.vocab, dim=4, hidden=(8,), seed=2)
    m0, hist0 = train_base(small, BaseTrainConfig(dim=4, hidden=(8,), epochs=0, seed=2), init.copy())
    assert hist0 == [] and m0.digest() == init.digest()
    _, hist = train_base(small, BaseTrainConfig(dim=4, hidden=(8,), epochs=4, lr=0.02, seed=2))
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_frozen_model_rejects_training_and_writes(small):
    m = BaseModel.init(small.schema, small.vocab, dim=2, hidden=(3,)).freeze()
    with pytest.raises(ValueError):
        train_base(small, BaseTrainConfig(dim=2, hidden=(3,), epochs=1), m)
    with pytest.raises(ValueError):
        m.params["out/b"][0] = 1.0


def test_checkpoint_round_trip_and_corruption(tmp_path, frozen_model, small):
    path = tmp_path / "base.ckpt"
    save_checkpoint(frozen_model, path)
    back = load_checkpoint(path, frozen_model.schema, frozen_model.vocab)
    assert back.digest() == frozen_model.digest()
    assert all(np.array_equal(back.params[k], v) for k, v in frozen_model.params.items())
    raw = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "cut.ckpt", frozen_model.schema, frozen_model.vocab)
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt", frozen_model.schema, frozen_model.vocab)
    with pytest.raises(CheckpointError, match="schema"):
        load_checkpoint(path, small.schema, small.vocab)
