import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ctclip import tensor as T
from ctclip.errors import ShapeError, StateError
from ctclip.functional import batch_norm, conv2d, layer_norm, lstm_scan, norm, softmax
from ctclip.gradcheck import finite_diff_check
from ctclip.tensor import Tensor

from conftest import leaf


# -- softmax ------------------------------------------------------------------

def test_softmax_symmetric():
    np.testing.assert_array_equal(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_large_logits_no_overflow():
    np.testing.assert_allclose(softmax(Tensor([1000.0] * 3)).data, [1 / 3] * 3, atol=1e-15)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=st.floats(-50, 50)), st.data())
def test_softmax_rows_sum_to_one(x, data):
    axis = data.draw(st.integers(0, x.ndim - 1))
    out = softmax(Tensor(x), axis=axis).data
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)
    assert (out >= 0).all()


def test_softmax_jvp_oracle(rng):
    x = leaf(rng, 3, 5)
    v = Tensor(rng.normal(size=(3, 5)))
    assert finite_diff_check(lambda x: (softmax(x, axis=1) * v).sum(), [x]) < 1e-6


def test_masked_softmax_zero_weight_on_masked():
    mask = np.array([True, False, True])
    out = softmax(Tensor([[1.0, 50.0, 2.0]]), axis=-1, mask=mask).data
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out.sum(), 1.0)


# -- norms --------------------------------------------------------------------

def test_layer_norm_definition():
    out = layer_norm(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert abs(out.mean()) < 1e-6
    assert abs(out.var() - 1.0) < 1e-4  # eps=1e-5 in the denominator


def _bn_state(c):
    return {"running_mean": np.zeros(c), "running_var": np.ones(c),
            "tracked": np.zeros(1, np.int64), "momentum": 1.0}


def test_batch_norm_train_then_eval_momentum_one(rng):
    x = Tensor(rng.normal(2.0, 3.0, size=(6, 3, 4, 4)))
    g, b = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
    state = _bn_state(3)
    train_out = norm(x, "batch", g, b, mode="train", state=state).data
    eval_out = norm(x, "batch", g, b, mode="eval", state=state).data
    np.testing.assert_allclose(train_out, eval_out, atol=1e-5)


def test_batch_norm_first_update_copies_batch_stats(rng):
    x = rng.normal(1.0, 2.0, size=(4, 2, 3, 3))
    state = _bn_state(2)
    state["momentum"] = 0.1
    norm(Tensor(x), "batch", Tensor(np.ones(2)), Tensor(np.zeros(2)), state=state)
    np.testing.assert_allclose(state["running_mean"], x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(state["running_var"], x.var(axis=(0, 2, 3)))
    assert state["tracked"][0] == 1


def test_batch_norm_eval_uninitialized():
    with pytest.raises(StateError):
        norm(Tensor(np.ones((2, 2, 2, 2))), "batch", Tensor(np.ones(2)), Tensor(np.zeros(2)),
             mode="eval", state=_bn_state(2))


def test_batch_norm_frozen_stats_not_updated(rng):
    state = _bn_state(2)
    batch_norm(Tensor(rng.normal(size=(3, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
               state["running_mean"], state["running_var"], state["tracked"], train=True,
               update_stats=False)
    assert state["tracked"][0] == 0
    np.testing.assert_array_equal(state["running_mean"], 0.0)


@pytest.mark.parametrize("kind", ["layer", "batch"])
def test_norm_gradients(kind, rng):
    x = leaf(rng, 3, 4) if kind == "layer" else leaf(rng, 3, 2, 3, 3)
    c = x.shape[-1] if kind == "layer" else 2
    g, b = leaf(rng, c), leaf(rng, c)
    w = Tensor(rng.normal(size=x.shape))
    state = _bn_state(c) if kind == "batch" else None
    f = lambda x, g, b: (norm(x, kind, g, b, state=state) * w).sum()  # noqa: E731
    assert finite_diff_check(f, [x, g, b], extended=True) < 1e-5


def test_norm_unknown_kind():
    with pytest.raises(ValueError):
        norm(Tensor(np.ones((2, 2))), "group", Tensor(np.ones(2)), Tensor(np.zeros(2)))


# -- conv2d -------------------------------------------------------------------

def naive_conv(x, w, b, stride, pad):
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum() + (0 if b is None else b[o])
    return out


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 1, 5, 5))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), None, stride=1, pad=0).data
    np.testing.assert_array_equal(out, x)


def test_conv_same_padding_shape():
    out = conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 3, 3, 3))), None, 1, 1)
    assert out.shape == (1, 4, 8, 8)


@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(3, 7),
       st.sampled_from([1, 2]), st.sampled_from([0, 1]), st.sampled_from([1, 3]))
def test_conv_matches_naive_loops(b, cin, cout, size, stride, pad, k):
    rng = np.random.default_rng(b + 10 * cin + 100 * cout + 1000 * size)
    x, w, bias = rng.normal(size=(b, cin, size, size)), rng.normal(size=(cout, cin, k, k)), \
        rng.normal(size=cout)
    out = conv2d(Tensor(x), Tensor(w), Tensor(bias), stride=stride, pad=pad).data
    np.testing.assert_allclose(out, naive_conv(x, w, bias, stride, pad), atol=1e-12)


def test_conv_gradient_oracle(rng):
    x, w, b = leaf(rng, 1, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
    c = Tensor(rng.normal(size=(1, 3, 5, 5)))
    assert finite_diff_check(lambda x, w, b: (conv2d(x, w, b, 1, 1) * c).sum(), [x, w, b]) < 1e-5


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


# -- lstm ---------------------------------------------------------------------

def _sig(z):
    return 1 / (1 + np.exp(-z))


def naive_lstm(xs, wx, wh, b, reverse):
    bsz, steps, _ = xs.shape
    hid = wh.shape[0]
    h, c = np.zeros((bsz, hid)), np.zeros((bsz, hid))
    out = np.zeros((bsz, steps, hid))
    for t in (reversed(range(steps)) if reverse else range(steps)):
        z = xs[:, t] @ wx + h @ wh + b
        i, f, g, o = _sig(z[:, :hid]), _sig(z[:, hid:2 * hid]), np.tanh(z[:, 2 * hid:3 * hid]), \
            _sig(z[:, 3 * hid:])
        c = f * c + i * g
        h = o * np.tanh(c)
        out[:, t] = h
    return out


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_matches_step_loop(reverse, rng):
    xs, wx, wh, b = (rng.normal(size=s) for s in ((2, 6, 3), (3, 16), (4, 16), (16,)))
    out = lstm_scan(Tensor(xs), Tensor(wx), Tensor(wh), Tensor(b), reverse=reverse).data
    np.testing.assert_allclose(out, naive_lstm(xs, wx, wh, b, reverse), atol=1e-12)


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_gradient_oracle(reverse, rng):
    args = [leaf(rng, 2, 5, 3), leaf(rng, 3, 8), leaf(rng, 2, 8), leaf(rng, 8)]
    c = Tensor(rng.normal(size=(2, 5, 2)))
    f = lambda *a: (lstm_scan(*a, reverse=reverse) * c).sum()  # noqa: E731
    assert finite_diff_check(f, args, extended=True) < 1e-5


def test_lstm_zero_weights_zero_states():
    out = lstm_scan(Tensor(np.ones((1, 3, 2))), Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 8))),
                    Tensor(np.zeros(8))).data
    np.testing.assert_array_equal(out, 0.0)


def test_lstm_bad_shapes():
    with pytest.raises(ShapeError):
        lstm_scan(Tensor(np.ones((1, 3, 2))), Tensor(np.zeros((2, 8))), Tensor(np.zeros((3, 8))),
                  Tensor(np.zeros(8)))


def test_finite_guard_allows_masked_softmax():
    out = softmax(Tensor(np.zeros((2, 3))), mask=np.array([True, False, False]))
    assert T.reduce(out, "sum").item() == 2.0
