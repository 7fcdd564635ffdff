import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vicdesk import backbone as bbm
from vicdesk import synthworld as sw
from vicdesk.errors import ShapeError, TrainingError, UsageError
from vicdesk.nnet import checksum, load_checkpoint, stream

from conftest import SEEDS


@pytest.fixture(scope="module")
def fresh():
    return bbm.Backbone(0)


def test_encoder_pool_invariances(fresh):
    f = np.random.default_rng(0).uniform(-0.9, 0.9, size=(17, 32))
    x = fresh.encode(f)
    assert np.allclose(fresh.encode(np.repeat(f, 2, axis=0)), x, atol=1e-14)
    assert np.allclose(fresh.encode(f[::-1]), x, atol=1e-14)
    assert x.shape == (16,)


def test_encode_empty_rejected(fresh):
    with pytest.raises(UsageError):
        fresh.encode(np.zeros((0, 32)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(-20, 20)))
def test_stl_output_in_value_hull(x):
    bank = bbm.StyleTokens(stream(1, "t"))
    g = bank(x)
    assert np.all(g >= bank.values.min(axis=0) - 1e-12)
    assert np.all(g <= bank.values.max(axis=0) + 1e-12)


def test_stl_single_token_and_zero_keys():
    one = bbm.StyleTokens(stream(2, "t"), n_tokens=1)
    assert np.allclose(one(np.random.default_rng(0).normal(size=16)), one.values[0], atol=1e-15)
    bank = bbm.StyleTokens(stream(2, "u"))
    bank.keys[...] = 0.0
    assert np.allclose(bank(np.ones(16) * 5), bank.values.mean(axis=0), atol=1e-14)
    _, (_, a) = bank.forward(np.ones(16))
    assert a.sum() == pytest.approx(1.0) and np.all(a >= 0)


def test_stl_shape_error(fresh):
    with pytest.raises(ShapeError):
        fresh.stl(np.ones(5))


def test_decode_zero_params_is_zero():
    dec = bbm.Decoder(None)
    dec.rate_head.b[:] = 0.0
    out = bbm.decode(dec, np.ones(16), np.ones((6, 4)))
    assert out.shape == (6, 32) and np.all(out == 0.0)


def test_decode_deterministic_and_rate_clamp(fresh):
    g = fresh.embed(np.full((10, 32), 0.1))
    content = np.random.default_rng(0).normal(size=(12, 4))
    assert fresh.decode(g, content).tobytes() == fresh.decode(g, content).tobytes()
    dec = bbm.Decoder(stream(0, "x"))
    dec.rate_head.b[:] = 50.0
    assert dec.frame_count(g) == 4 * dec.T0
    dec.rate_head.b[:] = -50.0
    assert dec.frame_count(g) == 1
    assert bbm.decode(dec, g, lambda T: np.zeros((T, 4))).shape == (1, 32)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pretrain_divergence_reports_step():
    world = sw.new_world(0)
    c = sw.build_corpus(world, 4, 2, holdout_frac=0.25)
    with pytest.raises(TrainingError) as e:
        bbm.pretrain(c, bbm.BackboneConfig(steps=50, lr=1e300), seed=0)
    assert e.value.step is not None


def _curve(path):
    rows = [r for r in csv.reader(l for l in path.read_text().splitlines() if not l.startswith("#"))]
    return [(int(a), float(b), float(c)) for a, b, c in rows[1:]]


@pytest.mark.parametrize("seed", SEEDS)
def test_pretrain_quality(trained, seed):
    t = trained[seed]
    curve = _curve(t.out / "pretrain_curve.csv")
    assert curve[-1][0] == 2000
    assert curve[-1][1] + curve[-1][2] < curve[0][1] + curve[0][2]
    held = t.corpus.heldout_indices
    assert bbm.reconstruction_mse(t.bb, t.corpus, held) < 0.05
    assert bbm.rate_mae(t.bb, t.corpus, held) < 0.1


def test_pretrained_checkpoint_reloads_bit_exact(trained0, tmp_path):
    state, manifest = load_checkpoint(trained0.out / "backbone.vick")
    bb = bbm.Backbone(0)
    bb.load_state_dict(state)
    assert checksum(bb.params()) == checksum(trained0.bb.params())
    assert manifest["frozen"] is True
    assert all(m.frozen for m in (trained0.bb, trained0.bb.encoder, trained0.bb.stl, trained0.bb.decoder))


def test_same_speaker_embeddings_closer(trained0):
    t = trained0
    rng = np.random.default_rng(0)
    items = t.corpus.items
    spk = list(t.corpus.by_speaker)
    same, diff = [], []

    def cos(a, b):
        return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    for _ in range(100):
        s, s2 = rng.choice(spk, 2, replace=False)
        i, j = rng.choice(t.corpus.by_speaker[s], 2, replace=False)
        k = rng.choice(t.corpus.by_speaker[s2])
        xi = t.bb.encode(items[i].feats)
        same.append(cos(xi, t.bb.encode(items[j].feats)))
        diff.append(cos(xi, t.bb.encode(items[k].feats)))
    assert np.mean(same) > np.mean(diff)
