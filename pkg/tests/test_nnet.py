import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vicdesk import nnet
from vicdesk.errors import NumericError, ShapeError, UsageError


def make_linear(W, b):
    lin = nnet.Linear(len(W[0]), len(W))
    lin.W[...] = W
    lin.b[...] = b
    return lin


# --- linear ------------------------------------------------------------------

def test_linear_examples():
    assert np.array_equal(make_linear(np.eye(2), [0, 0])(np.array([1.0, 2.0])), [1.0, 2.0])
    assert np.array_equal(make_linear(np.zeros((2, 3)), [3, 4])(np.array([9.0, -1.0, 5.0])), [3.0, 4.0])
    assert np.array_equal(make_linear([[1, 2], [3, 4]], [0, 0])(np.array([1.0, 1.0])), [3.0, 7.0])


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        nnet.linear_forward(nnet.Linear(3, 2), np.ones(2))


def test_linear_batch_equals_rows():
    rng = np.random.default_rng(0)
    lin = nnet.Linear(4, 3, rng)
    X = rng.normal(size=(5, 4))
    Y = lin(X)
    for i in range(5):
        np.testing.assert_allclose(Y[i], lin.W @ X[i] + lin.b, atol=1e-14)


# --- GRL ---------------------------------------------------------------------

@pytest.mark.parametrize("lam,g,want", [(1.0, [2.0, -3.0], [-2.0, 3.0]), (0.0, [5.0], [0.0]), (0.5, [4.0], [-2.0])])
def test_grl_backward_examples(lam, g, want):
    assert np.array_equal(nnet.grl_backward(nnet.Grl(lam), np.array(g)), want)


def test_grl_forward_is_bitwise_identity():
    x = np.random.default_rng(1).normal(size=(3, 7))
    y = nnet.Grl(2.5).forward(x)
    assert y.tobytes() == x.tobytes()


def test_grl_negative_lambda_rejected():
    with pytest.raises(UsageError):
        nnet.Grl(-0.1)


# --- dropout -----------------------------------------------------------------

def test_dropout_identities():
    x = np.arange(6.0)
    y, _ = nnet.dropout_forward(x, 0.0, True, nnet.stream(0, "d"))
    assert np.array_equal(y, x)
    y, mask = nnet.dropout_forward(x, 0.9, False, None)
    assert np.array_equal(y, x) and mask is None


def test_dropout_monte_carlo_mean():
    rng = nnet.stream(0, "dropout-mc")
    y, _ = nnet.dropout_forward(np.ones(100_000), 0.5, True, rng)
    assert 0.98 <= y.mean() <= 1.02
    assert set(np.unique(y)) <= {0.0, 2.0}


@pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
def test_dropout_bad_rate(rate):
    with pytest.raises(UsageError):
        nnet.dropout_forward(np.ones(3), rate, True, nnet.stream(0))


def test_dropout_backward_uses_mask():
    y, mask = nnet.dropout_forward(np.ones(50), 0.3, True, nnet.stream(3, "d"))
    g = nnet.dropout_backward(mask, np.ones(50))
    assert np.array_equal(g, y)


# --- mse ---------------------------------------------------------------------

def test_mse_examples():
    assert nnet.mse_loss([1.0, 2.0], [1.0, 2.0])[0] == 0.0
    assert nnet.mse_loss([1.0, 1.0], [0.0, 0.0])[0] == 1.0
    loss, g = nnet.mse_loss([3.0], [1.0])
    assert loss == 4.0 and np.array_equal(g, [4.0])
    with pytest.raises(ShapeError):
        nnet.mse_loss([1.0], [1.0, 2.0])


# --- AdamW -------------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    opt = nnet.AdamW(lr=0.1)
    opt.step(p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"], [1.0, -2.0])
    assert opt.t == 1 and "w" in opt.m


def test_adamw_decay_only():
    p = {"w": np.array([1.0])}
    nnet.AdamW(lr=0.1, weight_decay=0.1).step(p, {"w": np.zeros(1)})
    assert p["w"][0] == pytest.approx(0.99, abs=1e-15)


def test_adamw_descends_quadratic():
    p = {"w": np.array([1.0])}
    nnet.AdamW(lr=0.01).step(p, {"w": 2.0 * p["w"]})
    assert p["w"][0] < 1.0


def test_adamw_shape_mismatch():
    with pytest.raises(ShapeError):
        nnet.AdamW().step({"w": np.zeros(2)}, {"w": np.zeros(3)})
    with pytest.raises(ShapeError):
        nnet.AdamW().step({"w": np.zeros(2)}, {"v": np.zeros(2)})


def test_adamw_step_count_monotone():
    opt = nnet.AdamW()
    p = {"w": np.ones(1)}
    for k in range(1, 4):
        opt.step(p, {"w": np.ones(1)})
        assert opt.t == k


# --- grad_check --------------------------------------------------------------

def linear_mse_closure(lin, x, y):
    def closure():
        lin.zero_grad()
        out = lin(x)
        loss, g = nnet.mse_loss(out, y)
        lin.backward(x, g)
        return loss, lin.grads()
    return closure


def test_grad_check_linear_mse():
    rng = np.random.default_rng(2)
    lin = nnet.Linear(5, 3, rng)
    c = linear_mse_closure(lin, rng.normal(size=(4, 5)), rng.normal(size=(4, 3)))
    assert nnet.grad_check(c, lin.params(), epsilon=1e-4) < 1e-3


def test_grad_check_tanh_softmax_chain():
    rng = np.random.default_rng(3)
    l1, l2 = nnet.Linear(4, 6, rng), nnet.Linear(6, 5, rng)
    x, y = rng.normal(size=(3, 4)), rng.dirichlet(np.ones(5), size=3)

    def closure():
        l1.zero_grad(), l2.zero_grad()
        h = np.tanh(l1(x))
        p = nnet.softmax(l2(h))
        loss, gp = nnet.mse_loss(p, y)
        gh = l2.backward(h, nnet.softmax_backward(p, gp))
        l1.backward(x, nnet.tanh_backward(h, gh))
        return loss, {**{"1" + k: v for k, v in l1.grads().items()},
                      **{"2" + k: v for k, v in l2.grads().items()}}

    params = {**{"1" + k: v for k, v in l1.params().items()}, **{"2" + k: v for k, v in l2.params().items()}}
    assert nnet.grad_check(closure, params) < 1e-3


def test_grl_negates_upstream_grads():
    rng = np.random.default_rng(4)
    up, down = nnet.Linear(3, 4, rng), nnet.Linear(4, 2, rng)
    x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))

    def upstream_grad(grl):
        up.zero_grad(), down.zero_grad()
        h = up(x)
        h2 = grl.forward(h) if grl else h
        _, g = nnet.mse_loss(down(h2), y)
        gh = down.backward(h2, g)
        up.backward(x, grl.backward(gh) if grl else gh)
        return up.gW.copy(), down.gW.copy()

    plain_up, plain_down = upstream_grad(None)
    rev_up, rev_down = upstream_grad(nnet.Grl(1.0))
    assert np.array_equal(rev_up, -plain_up)
    assert np.array_equal(rev_down, plain_down)


def test_grad_check_constant_loss():
    p = {"w": np.ones(4)}
    closure = lambda: (3.0, {"w": np.zeros(4)})
    assert nnet.grad_check(closure, p) == 0.0


def test_grad_check_detects_wrong_gradient():
    p = {"w": np.array([1.0, 2.0])}
    closure = lambda: (float(np.sum(p["w"] ** 2)), {"w": 3.0 * p["w"]})
    assert nnet.grad_check(closure, p) > 0.1


def test_grad_check_non_finite():
    p = {"w": np.ones(1)}
    with pytest.raises(NumericError):
        nnet.grad_check(lambda: (float("nan"), {"w": np.zeros(1)}), p)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_linear_grad_property(n_in, n_out, seed):
    rng = np.random.default_rng(seed)
    lin = nnet.Linear(n_in, n_out, rng)
    c = linear_mse_closure(lin, rng.normal(size=(3, n_in)), rng.normal(size=(3, n_out)))
    assert nnet.grad_check(c, lin.params()) < 1e-3


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)))
def test_dropout_inference_identity_property(x):
    y, _ = nnet.dropout_forward(x, 0.7, False, None)
    assert np.array_equal(y, x)


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one(z):
    p = nnet.softmax(z)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(p >= 0)


# --- rng and checkpoints -----------------------------------------------------

def test_stream_determinism_and_independence():
    a = nnet.stream(5, "init", 3).normal(size=4)
    b = nnet.stream(5, "init", 3).normal(size=4)
    c = nnet.stream(5, "init", 4).normal(size=4)
    d = nnet.stream(6, "init", 3).normal(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arrays_ = {"enc.W": rng.normal(size=(3, 4)), "enc.b": rng.normal(size=3), "s": np.array([1.5])}
    p = nnet.save_checkpoint(tmp_path / "m.vick", arrays_, {"config_hash": "abc"})
    back, manifest = nnet.load_checkpoint(p)
    assert set(back) == set(arrays_)
    for k in arrays_:
        assert back[k].shape == arrays_[k].shape
        assert back[k].tobytes() == arrays_[k].tobytes()
    assert manifest["config_hash"] == "abc"
    assert json.loads((tmp_path / "m.vick.json").read_text())["shapes"]["enc.W"] == [3, 4]
    assert p.read_bytes()[:4] == b"VICK"


def test_checkpoint_bytes_stable(tmp_path):
    a = {"x": np.arange(6.0).reshape(2, 3)}
    nnet.save_checkpoint(tmp_path / "a.vick", a)
    nnet.save_checkpoint(tmp_path / "b.vick", dict(a))
    assert (tmp_path / "a.vick").read_bytes() == (tmp_path / "b.vick").read_bytes()


def test_checkpoint_rejects_non_finite(tmp_path):
    with pytest.raises(NumericError):
        nnet.save_checkpoint(tmp_path / "x.vick", {"x": np.array([np.inf])})


def test_load_state_dict_shape_checks():
    lin = nnet.Linear(2, 2)
    with pytest.raises(ShapeError):
        lin.load_state_dict({"W": np.zeros((3, 2)), "b": np.zeros(2)})
    with pytest.raises(ShapeError):
        lin.load_state_dict({"W": np.zeros((2, 2))})


def test_checksum_changes_with_params():
    p = {"w": np.zeros(3)}
    c0 = nnet.checksum(p)
    p["w"][1] = 1e-300
    assert nnet.checksum(p) != c0
