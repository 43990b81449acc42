import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_grad, rel_err
from ptnet.attention import (
    FavorFeatures,
    MhaWeights,
    TransformerBlock,
    attention_exact,
    attention_exact_backward,
    attention_favor,
    attention_favor_backward,
    default_feature_count,
    favor_feature_map,
    mha,
    orthogonal_gaussian,
    positional_encoding,
)
from ptnet.errors import ConfigError, DimensionError, NumericError
from ptnet.tensor import ParameterStore, Rng, layer_norm


def naive_attention(Q, K, V):
    L, d = Q.shape
    out = np.zeros((L, V.shape[1]))
    for i in range(L):
        s = [sum(Q[i, a] * K[j, a] for a in range(d)) / math.sqrt(d) for j in range(K.shape[0])]
        mx = max(s)
        e = [math.exp(v - mx) for v in s]
        z = sum(e)
        for j in range(K.shape[0]):
            out[i] += e[j] / z * V[j]
    return out


# --- exact attention --------------------------------------------------------


def test_exact_uniform_when_q_zero(rng):
    K, V = rng.normal((5, 3)), rng.normal((5, 4))
    out = attention_exact(np.zeros((5, 3)), K, V)
    np.testing.assert_allclose(out, np.tile(V.mean(axis=0), (5, 1)), atol=1e-12)


def test_exact_single_token(rng):
    Q, K, V = rng.normal((1, 3)), rng.normal((1, 3)), rng.normal((1, 2))
    np.testing.assert_allclose(attention_exact(Q, K, V), V, atol=1e-15)


def test_exact_matches_loop_oracle(rng):
    Q, K, V = rng.normal((6, 4)), rng.normal((6, 4)), rng.normal((6, 4))
    np.testing.assert_allclose(attention_exact(Q, K, V), naive_attention(Q, K, V), atol=1e-6)


def test_exact_shape_error():
    with pytest.raises(DimensionError):
        attention_exact(np.zeros((3, 4)), np.zeros((3, 5)), np.zeros((3, 2)))


@pytest.mark.parametrize("kernel", ["exact", "favor"])
def test_permutation_properties(rng, kernel):
    L, d = 7, 4
    Q, K, V = rng.normal((L, d)) * 0.5, rng.normal((L, d)) * 0.5, rng.normal((L, 3))
    omega = orthogonal_gaussian(rng.child(9), 8, d)
    attn = (lambda q, k, v: attention_exact(q, k, v)) if kernel == "exact" else (lambda q, k, v: attention_favor(q, k, v, omega))
    base = attn(Q, K, V)
    p = rng.child(3).permutation(L)
    np.testing.assert_allclose(attn(Q[p], K, V), base[p], atol=1e-6)
    np.testing.assert_allclose(attn(Q, K[p], V[p]), base, atol=1e-6)


def test_exact_backward_fd(rng):
    Q, K, V, g = (rng.child(i).normal((2, 5, 3)) for i in range(4))
    _, cache = attention_exact(Q, K, V, return_cache=True)
    dQ, dK, dV = attention_exact_backward(cache, g)
    f = lambda: float((attention_exact(Q, K, V) * g).sum())  # noqa: E731
    for analytic, x in ((dQ, Q), (dK, K), (dV, V)):
        assert rel_err(analytic, fd_grad(f, x)) < 1e-5


# --- multi-head -------------------------------------------------------------


def test_mha_single_head_collapse(rng):
    x = rng.normal((5, 4))
    w = MhaWeights(np.eye(4), np.eye(4), np.eye(4), np.eye(4), heads=1)
    np.testing.assert_allclose(mha(x, w), attention_exact(x, x, x), atol=1e-12)


def test_mha_zero_value_projection(rng):
    x = rng.normal((5, 4))
    w = MhaWeights(rng.normal((4, 4)), rng.normal((4, 4)), np.zeros((4, 4)), rng.normal((4, 4)), heads=2)
    np.testing.assert_array_equal(mha(x, w), np.zeros((5, 4)))
    w.bo = np.arange(4.0)
    np.testing.assert_array_equal(mha(x, w), np.tile(np.arange(4.0), (5, 1)))


def test_mha_two_heads_compositional(rng):
    x = rng.normal((6, 8))
    wq, wk, wv, wo = (rng.child(i).normal((8, 8)) * 0.3 for i in range(4))
    heads = [
        attention_exact(x @ wq[:, s], x @ wk[:, s], x @ wv[:, s]) for s in (slice(0, 4), slice(4, 8))
    ]
    ref = np.concatenate(heads, axis=1) @ wo
    np.testing.assert_allclose(mha(x, MhaWeights(wq, wk, wv, wo, heads=2)), ref, atol=1e-12)


def test_mha_errors(rng):
    with pytest.raises(ConfigError):
        mha(rng.normal((3, 6)), MhaWeights(np.eye(6), np.eye(6), np.eye(6), np.eye(6), heads=4))
    with pytest.raises(DimensionError):
        mha(rng.normal((3, 4)), MhaWeights(np.eye(4), np.eye(4), np.eye(4), np.eye(6), heads=2))


# --- FAVOR+ -----------------------------------------------------------------


def test_orthogonal_blocks_and_norms():
    d = 8
    om = orthogonal_gaussian(Rng(0), 20, d)
    assert om.shape == (20, d)
    for start in range(0, 20, d):
        blk = om[start : start + d]
        u = blk / np.linalg.norm(blk, axis=1, keepdims=True)
        np.testing.assert_allclose(u @ u.T, np.eye(len(blk)), atol=1e-5)
    # chi_d norms: E|w|^2 = d
    norms2 = np.concatenate([np.sum(orthogonal_gaussian(Rng(s), 16, d) ** 2, axis=1) for s in range(300)])
    assert abs(norms2.mean() - d) < 0.1 * d


def test_default_feature_count():
    assert default_feature_count(16) == 32
    assert FavorFeatures.draw(Rng(0), 16).m == 32
    assert FavorFeatures.draw(Rng(0), 4, 12).omega.shape == (12, 4)


def test_feature_map_basic(rng):
    om = orthogonal_gaussian(rng, 8, 4)
    np.testing.assert_allclose(favor_feature_map(np.zeros((3, 4)), om), np.full((3, 8), 8**-0.5))
    assert (favor_feature_map(rng.normal((20, 4)), om) > 0).all()
    with pytest.raises(ConfigError):
        favor_feature_map(np.zeros((1, 4)), om, "bogus")


def test_feature_map_monte_carlo_kernel():
    d, m = 16, 64
    r = Rng(5)
    q, k = r.child(0).normal(d), r.child(1).normal(d)
    q, k = q / np.linalg.norm(q), k / np.linalg.norm(k)
    est = np.mean([
        float((favor_feature_map(q[None], om) @ favor_feature_map(k[None], om).T)[0, 0])
        for om in (orthogonal_gaussian(r.child(2, i), m, d) for i in range(64))
    ])
    # positive random features are unbiased for the softmax kernel exp(q.k / sqrt(d))
    assert abs(est / math.exp(q @ k / math.sqrt(d)) - 1) < 0.05


def test_favor_single_token_and_constant_values(rng):
    om = orthogonal_gaussian(rng, 8, 4)
    Q, K, V = rng.normal((1, 4)), rng.normal((1, 4)), rng.normal((1, 3))
    np.testing.assert_allclose(attention_favor(Q, K, V, om), V, rtol=1e-12)
    v = rng.normal(3)
    out = attention_favor(rng.normal((6, 4)), rng.normal((6, 4)), np.tile(v, (6, 1)), om)
    np.testing.assert_allclose(out, np.tile(v, (6, 1)), rtol=1e-12)


def test_favor_nonpositive_normalizer_raises():
    om = np.array([[1.0], [-1.0]])
    with pytest.raises(NumericError):
        attention_favor(np.array([[1000.0]]), np.array([[-1000.0]]), np.ones((1, 1)), om)


def test_favor_deterministic(rng):
    om = FavorFeatures.draw(Rng(7), 4, 8)
    Q, K, V = rng.normal((5, 4)), rng.normal((5, 4)), rng.normal((5, 4))
    np.testing.assert_array_equal(attention_favor(Q, K, V, om), attention_favor(Q, K, V, om))
    np.testing.assert_array_equal(FavorFeatures.draw(Rng(7), 4, 8).omega, om.omega)


def test_favor_median_error_and_monotone():
    from ptnet.bench import favor_error_sweep

    sweep = favor_error_sweep(64, 16, [16, 32, 64, 128, 256], range(10))
    means = [np.mean(v) for v in sweep.values()]
    assert all(b <= a for a, b in zip(means, means[1:])), means
    assert np.median(sweep[256]) <= 0.10


def test_favor_backward_fd(rng):
    om = orthogonal_gaussian(rng.child(9), 6, 3)
    Q, K, V, g = (rng.child(i).normal((2, 5, 3)) * 0.7 for i in range(4))
    _, cache = attention_favor(Q, K, V, om, return_cache=True)
    dQ, dK, dV = attention_favor_backward(cache, g)
    f = lambda: float((attention_favor(Q, K, V, om) * g).sum())  # noqa: E731
    for analytic, x in ((dQ, Q), (dK, K), (dV, V)):
        assert rel_err(analytic, fd_grad(f, x)) < 1e-5


# --- positional encoding ----------------------------------------------------


def test_positional_encoding_values():
    pe = positional_encoding(50, 8)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    assert np.abs(pe).max() <= 1.0
    assert abs(pe[1, 0] - 0.841471) < 1e-5 and abs(pe[1, 1] - 0.540302) < 1e-5
    assert pe[3, 4] == pytest.approx(math.sin(3 / 10000 ** (4 / 8)))
    with pytest.raises(ConfigError):
        positional_encoding(4, 7)


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 2000), st.sampled_from([8, 16, 64]))
def test_positional_rows_distinct(L, dim):
    pe = positional_encoding(L, dim)
    assert len(np.unique(pe, axis=0)) == L


# --- transformer block ------------------------------------------------------


@pytest.mark.parametrize("kernel", ["exact", "favor"])
def test_block_shape(kernel):
    blk = TransformerBlock(ParameterStore(), "b", 8, 2, Rng(0), kernel)
    x = Rng(1).normal((3, 10, 8), dtype=np.float32)
    assert blk.forward(x).shape == x.shape


def test_block_zero_weights_is_double_layer_norm(rng):
    store = ParameterStore()
    blk = TransformerBlock(store, "b", 8, 2, rng, "exact", dtype=np.float64)
    for name, p in store.items():
        if not (name.endswith("gamma") or name.endswith("beta")):
            p[...] = 0
    x = rng.child(1).normal((2, 5, 8))
    one, zero = np.ones(8), np.zeros(8)
    np.testing.assert_allclose(blk.forward(x), layer_norm(layer_norm(x, one, zero), one, zero), atol=1e-12)


def test_block_exact_vs_favor():
    e = TransformerBlock(ParameterStore(), "b", 16, 4, Rng(3), "exact", dtype=np.float64)
    f = TransformerBlock(ParameterStore(), "b", 16, 4, Rng(3), "favor", m=512, dtype=np.float64)
    x = Rng(4).normal((1, 32, 16))
    ye, yf = e.forward(x), f.forward(x)
    assert np.linalg.norm(yf - ye) / np.linalg.norm(ye) <= 0.15


def test_block_config_errors():
    with pytest.raises(ConfigError):
        TransformerBlock(ParameterStore(), "b", 6, 4, Rng(0))
    with pytest.raises(ConfigError):
        TransformerBlock(ParameterStore(), "b", 8, 2, Rng(0), activation="swish")
    with pytest.raises(ConfigError):
        TransformerBlock(ParameterStore(), "b", 8, 2, Rng(0), kernel="linear")
