import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctclip import feb as F
from ctclip import tensor as T
from ctclip.errors import ConfigError
from ctclip.functional import softmax
from ctclip.params import ModelParams
from ctclip.tensor import Tensor


def _bima(d_v=8, d_l=8, d=8, seed=0):
    p = ModelParams(np.float64, seed)
    F.init_bima(p, d_v, d_l, d)
    return p


def _head(d_v=8, d_l=8, hidden=6, k=7, seed=0):
    p = ModelParams(np.float64, seed)
    F.init_head(p, d_v, d_l, hidden, k)
    return p


def test_bima_desk_shapes(rng):
    p = ModelParams(np.float32, 0)
    F.init_bima(p, 64, 64, 64)
    v = Tensor(rng.normal(size=(8, 64, 64)).astype(np.float32))
    l = Tensor(rng.normal(size=(8, 7, 64)).astype(np.float32))
    v_hat, l_hat, a_v, a_l = F.bima(v, l, p, heads=4)
    assert a_v.shape == (8, 4, 64, 7)
    assert a_l.shape == (8, 4, 7, 64)
    assert v_hat.shape == (8, 64, 64)
    assert l_hat.shape == (8, 7, 64)


@given(st.integers(1, 3), st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 2, 4]),
       st.integers(0, 10_000))
def test_bima_rows_stochastic(b, n_v, n_l, heads, seed):
    rng = np.random.default_rng(seed)
    p = _bima(seed=seed)
    v = Tensor(rng.normal(0, 3, size=(b, n_v, 8)))
    l = Tensor(rng.normal(0, 3, size=(b, n_l, 8)))
    _, _, a_v, a_l = F.bima(v, l, p, heads)
    np.testing.assert_allclose(a_v.data.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(a_l.data.sum(-1), 1.0, atol=1e-6)


def test_bima_single_text_token(rng):
    p = _bima()
    v = Tensor(rng.normal(size=(2, 5, 8)))
    l = Tensor(rng.normal(size=(2, 1, 8)))
    v_hat, _, a_v, _ = F.bima(v, l, p, heads=2)
    np.testing.assert_array_equal(a_v.data, 1.0)
    v_l = l.data @ p["feb.v_l"].data  # every visual token receives V_l
    expect = np.broadcast_to(v_l @ p["feb.o_v"].data, (2, 5, 8))
    np.testing.assert_allclose(v_hat.data, expect, atol=1e-12)


def test_bima_head_divisibility():
    p = _bima(d=6)
    with pytest.raises(ConfigError):
        F.bima(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((1, 2, 8))), p, heads=4)


def test_bima_text_permutation_equivariance(rng):
    p = _bima()
    v = Tensor(rng.normal(size=(2, 6, 8)))
    l = rng.normal(size=(2, 5, 8))
    perm = rng.permutation(5)
    v1, l1, av1, al1 = F.bima(v, Tensor(l), p, heads=2)
    v2, l2, av2, _ = F.bima(v, Tensor(l[:, perm]), p, heads=2)
    np.testing.assert_allclose(l2.data, l1.data[:, perm], atol=1e-6)
    np.testing.assert_allclose(av2.data, av1.data[..., perm], atol=1e-6)
    np.testing.assert_allclose(v2.data, v1.data, atol=1e-6)


def test_attention_scaling_identity(rng):
    q, k, v = (Tensor(rng.normal(size=(2, 2, 5, 4))) for _ in range(3))
    _, weights = F._attend(q, k, v)
    manual = softmax(T.matmul(q * (1 / np.sqrt(4)), T.swapaxes(k, -1, -2)), axis=-1)
    np.testing.assert_allclose(weights.data, manual.data, atol=1e-6)


def test_cross_attention_shapes_and_rows(rng):
    p = ModelParams(np.float64, 0)
    F.init_cross(p, 8, 8, 8)
    v_hat, a_v = F.cross_attention(Tensor(rng.normal(size=(2, 4, 8))),
                                   Tensor(rng.normal(size=(2, 3, 8))), p, heads=2)
    assert v_hat.shape == (2, 4, 8) and a_v.shape == (2, 2, 4, 3)
    np.testing.assert_allclose(a_v.data.sum(-1), 1.0, atol=1e-6)


def test_conv_enhance_ignores_text_and_flattens(rng):
    p = ModelParams(np.float64, 0)
    F.init_feb_conv(p, 4)
    out = F.conv_enhance(Tensor(rng.normal(size=(2, 4, 3, 3))), p)
    assert out.shape == (2, 9, 4)
    assert (out.data >= 0).all()


def test_pool_fuse_text_gate(rng):
    p = _head()
    p["head.w_l"].data[:] = 0.0
    fused = F.pool_fuse(Tensor(rng.normal(size=(2, 4, 8))), Tensor(rng.normal(size=(2, 7, 8))), p)
    assert fused.shape == (2, 16)
    np.testing.assert_array_equal(fused.data[:, 8:], 0.0)


def test_pool_fuse_constant_rows():
    p = _head()
    const = np.arange(8.0)
    v = Tensor(np.broadcast_to(const, (3, 5, 8)).copy())
    fused = F.pool_fuse(v, Tensor(np.zeros((3, 2, 8))), p).data
    np.testing.assert_allclose(fused[:, :8], np.broadcast_to(const, (3, 8)))


def test_pool_fuse_desk_width(rng):
    p = ModelParams(np.float32, 0)
    F.init_head(p, 64, 64, 64, 7)
    fused = F.pool_fuse(Tensor(np.zeros((2, 64, 64), np.float32)),
                        Tensor(np.zeros((2, 7, 64), np.float32)), p)
    assert fused.shape == (2, 128)


def test_pool_fuse_without_text_keeps_width(rng):
    p = ModelParams(np.float64, 0)
    F.init_head(p, 8, 8, 6, 3, with_text=False)
    assert "head.w_l" not in p
    fused = F.pool_fuse(Tensor(rng.normal(size=(2, 4, 8))), None, p, d_l=8).data
    assert fused.shape == (2, 16)
    np.testing.assert_array_equal(fused[:, 8:], 0.0)


def test_both_fusion_scalars_receive_gradient(rng):
    p = _head()
    fused = F.pool_fuse(Tensor(rng.normal(size=(2, 4, 8))), Tensor(rng.normal(size=(2, 7, 8))), p)
    w = Tensor(rng.normal(size=(2, 7)))
    (F.classify_head(fused, p) * w).sum().backward()
    assert {"head.w_v", "head.w_l"} <= p.grad_census()


@given(st.integers(1, 5), st.integers(0, 10_000))
def test_classify_head_rows_sum_to_one(b, seed):
    rng = np.random.default_rng(seed)
    p = _head(seed=seed)
    probs = F.classify_head(Tensor(rng.normal(0, 5, size=(b, 16))), p).data
    assert probs.shape == (b, 7)
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-6)


def test_classify_head_zero_fc2_is_uniform(rng):
    p = _head()
    p["head.fc2.w"].data[:] = 0.0
    probs = F.classify_head(Tensor(rng.normal(size=(3, 16))), p).data
    np.testing.assert_allclose(probs, 1 / 7, atol=1e-15)


def test_classify_head_bias_shift_invariance(rng):
    p = _head()
    x = Tensor(rng.normal(size=(3, 16)))
    before = F.classify_head(x, p).data
    p["head.fc2.b"].data = p["head.fc2.b"].data + 4.2
    np.testing.assert_allclose(F.classify_head(x, p).data, before, atol=1e-6)
