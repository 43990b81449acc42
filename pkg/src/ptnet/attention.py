"""Softmax attention, FAVOR+ linear attention, sinusoidal positions and transformer blocks.

Attention tensors are batched as (..., L, d): any leading axes (batch, heads)
broadcast. Both attention kernels come with explicit backward passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .layers import LayerNorm, Linear, Module
from .tensor import ParameterStore, Rng, gelu, gelu_backward, softmax_rows, softmax_rows_backward


def _check_qkv(Q, K, V):
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2] or Q.shape[:-2] != K.shape[:-2]:
        raise DimensionError(f"attention: incompatible Q {Q.shape}, K {K.shape}, V {V.shape}")
    if Q.shape[-1] == 0:
        raise DimensionError("attention: d_k must be positive")


# ---------------------------------------------------------------------------
# Exact attention
# ---------------------------------------------------------------------------


def attention_exact(Q, K, V, return_cache=False):
    """softmax(Q K^T / sqrt(d_k)) V."""
    _check_qkv(Q, K, V)
    scale = 1.0 / math.sqrt(Q.shape[-1])
    A = softmax_rows(np.matmul(Q, np.swapaxes(K, -1, -2)) * scale)
    out = np.matmul(A, V)
    if return_cache:
        return out, (Q, K, V, A, scale)
    return out


def attention_exact_backward(cache, grad):
    Q, K, V, A, scale = cache
    dV = np.matmul(np.swapaxes(A, -1, -2), grad)
    dS = softmax_rows_backward(A, np.matmul(grad, np.swapaxes(V, -1, -2))) * scale
    dQ = np.matmul(dS, K)
    dK = np.matmul(np.swapaxes(dS, -1, -2), Q)
    return dQ, dK, dV


# ---------------------------------------------------------------------------
# FAVOR+
# ---------------------------------------------------------------------------


def orthogonal_gaussian(rng: Rng, m: int, d: int) -> np.ndarray:
    """m x d matrix whose rows are orthogonal within blocks of d.

    Each block is the Q factor of a Gaussian matrix; rows are then rescaled by
    the norms of fresh Gaussian vectors so marginal row norms stay chi_d.
    """
    blocks = []
    for _ in range(-(-m // d)):
        q, r = np.linalg.qr(rng.normal((d, d)))
        q = q * np.sign(np.diag(r))
        blocks.append(q.T)
    omega = np.concatenate(blocks, axis=0)[:m]
    norms = np.linalg.norm(rng.normal((m, d)), axis=1)
    return omega * norms[:, None]


def default_feature_count(d_k: int) -> int:
    """Two features per key dimension (already a whole number of orthogonal blocks)."""
    return 2 * d_k


@dataclass
class FavorFeatures:
    omega: np.ndarray
    redraw: str = "fixed"

    @property
    def m(self) -> int:
        return self.omega.shape[0]

    @classmethod
    def draw(cls, rng: Rng, d_k: int, m: int | None = None, redraw="fixed"):
        return cls(orthogonal_gaussian(rng, m or default_feature_count(d_k), d_k), redraw)


def favor_feature_map(x, omega, stabilizer=None):
    """Positive random features phi(x) = m^-1/2 exp(w^T x' - |x'|^2 / 2), x' = x / d^(1/4).

    ``stabilizer`` subtracts a constant inside the exponent: ``"row"`` the
    per-row max, ``"global"`` the max over the last two axes. Both cancel in
    the attention normalizer when applied to queries and keys respectively.
    """
    omega = omega.astype(x.dtype, copy=False)
    xh = x * x.shape[-1] ** -0.25
    expo = np.matmul(xh, omega.T) - 0.5 * (xh * xh).sum(axis=-1, keepdims=True)
    if stabilizer == "row":
        expo -= expo.max(axis=-1, keepdims=True)
    elif stabilizer == "global":
        expo -= expo.max(axis=(-2, -1), keepdims=True)
    elif stabilizer is not None:
        raise ConfigError(f"unknown stabilizer {stabilizer!r}")
    return np.exp(expo) * (1.0 / math.sqrt(omega.shape[0]))


def favor_feature_map_backward(x, omega, phi, grad):
    omega = omega.astype(x.dtype, copy=False)
    s = x.shape[-1] ** -0.25
    t = grad * phi
    return (np.matmul(t, omega) - (x * s) * t.sum(axis=-1, keepdims=True)) * s


def attention_favor(Q, K, V, omega, return_cache=False):
    """Linear-cost approximation of softmax attention: D^-1 Q'(K'^T V) with D = diag(Q'(K'^T 1))."""
    _check_qkv(Q, K, V)
    if isinstance(omega, FavorFeatures):
        omega = omega.omega
    qf = favor_feature_map(Q, omega, "row")
    kf = favor_feature_map(K, omega, "global")
    kv = np.matmul(np.swapaxes(kf, -1, -2), V)
    z = kf.sum(axis=-2)
    den = np.matmul(qf, z[..., None])
    if not (den > 0).all():
        raise NumericError("attention_favor: non-positive normalizer")
    out = np.matmul(qf, kv) / den
    if return_cache:
        return out, (Q, K, V, omega, qf, kf, kv, z, den, out)
    return out


def attention_favor_backward(cache, grad):
    Q, K, V, omega, qf, kf, kv, z, den, out = cache
    dnum = grad / den
    dden = -(grad * out).sum(axis=-1, keepdims=True) / den
    dqf = np.matmul(dnum, np.swapaxes(kv, -1, -2)) + dden * z[..., None, :]
    dkv = np.matmul(np.swapaxes(qf, -1, -2), dnum)
    dz = np.matmul(np.swapaxes(qf, -1, -2), dden)[..., 0]
    dkf = np.matmul(V, np.swapaxes(dkv, -1, -2)) + dz[..., None, :]
    dV = np.matmul(kf, dkv)
    dQ = favor_feature_map_backward(Q, omega, qf, dqf)
    dK = favor_feature_map_backward(K, omega, kf, dkf)
    return dQ, dK, dV


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------


def positional_encoding(L: int, dim: int, dtype=np.float64) -> np.ndarray:
    if dim % 2:
        raise ConfigError(f"positional encoding needs an even embedding dim, got {dim}")
    pos = np.arange(L, dtype=np.float64)[:, None]
    div = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.empty((L, dim))
    pe[:, 0::2] = np.sin(pos / div)
    pe[:, 1::2] = np.cos(pos / div)
    return pe.astype(dtype)


# ---------------------------------------------------------------------------
# Multi-head attention and transformer block
# ---------------------------------------------------------------------------


@dataclass
class MhaWeights:
    """Unfused projections for the functional ``mha``; columns grouped by head."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int
    bo: np.ndarray | None = None


def split_heads(x, heads):
    N, L, D = x.shape
    return x.reshape(N, L, heads, D // heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    N, H, L, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(N, L, H * d)


def mha(x, w: MhaWeights, omega=None):
    """Multi-head self-attention on (N, L, D) or (L, D) tokens."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if w.wq.shape[1] % w.heads or w.wv.shape[1] % w.heads:
        raise ConfigError(f"projection widths {w.wq.shape[1]}, {w.wv.shape[1]} not divisible by {w.heads} heads")
    if w.wo.shape[0] != w.wv.shape[1]:
        raise DimensionError(f"W^O input extent {w.wo.shape[0]} != heads * d_v = {w.wv.shape[1]}")
    q, k, v = (split_heads(x @ p, w.heads) for p in (w.wq, w.wk, w.wv))
    heads = attention_exact(q, k, v) if omega is None else attention_favor(q, k, v, omega)
    out = merge_heads(heads) @ w.wo
    if w.bo is not None:
        out = out + w.bo
    return out[0] if squeeze else out


class MultiHeadAttention(Module):
    """Self-attention with a fused bias-free QKV projection and a biased output projection."""

    def __init__(self, store: ParameterStore, name, dim, heads, rng: Rng, kernel="exact", m=None, dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"{name}: dim {dim} not divisible by {heads} heads")
        if kernel not in ("exact", "favor"):
            raise ConfigError(f"{name}: unknown attention kernel {kernel!r}")
        self.store, self.name, self.heads, self.kernel = store, name, heads, kernel
        self.qkv = Linear(store, f"{name}.qkv", dim, 3 * dim, rng.child(0), bias=False, dtype=dtype)
        self.out = Linear(store, f"{name}.out", dim, dim, rng.child(1), dtype=dtype)
        self.omega = None
        if kernel == "favor":
            feats = FavorFeatures.draw(rng.child(2), dim // heads, m)
            self.omega = store.add_buffer(f"{name}.omega", feats.omega.astype(dtype))
        self._c_attn = None

    def forward(self, x):
        N, L, D = x.shape
        qkv = self.qkv.forward(x).reshape(N, L, 3, self.heads, D // self.heads).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if self.kernel == "exact":
            o, cache = attention_exact(q, k, v, return_cache=True)
        else:
            o, cache = attention_favor(q, k, v, self.store[self.omega], return_cache=True)
        self._c_attn = cache
        return self.out.forward(merge_heads(o))

    def backward(self, grad):
        cache = self._cached("_c_attn")
        do = split_heads(self.out.backward(grad), self.heads)
        back = attention_exact_backward if self.kernel == "exact" else attention_favor_backward
        dq, dk, dv = back(cache, do)
        N, H, L, d = dq.shape
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(N, L, 3 * H * d)
        return self.qkv.backward(dqkv)


class TransformerBlock(Module):
    """Attention + feed-forward with residuals; post-norm (Add then LN) by default."""

    def __init__(
        self,
        store: ParameterStore,
        name,
        dim,
        heads,
        rng: Rng,
        kernel="exact",
        ffn_ratio=4.0,
        m=None,
        prenorm=False,
        activation="gelu",
        dtype=np.float32,
    ):
        if activation not in ("gelu", "relu"):
            raise ConfigError(f"{name}: unknown activation {activation!r}")
        hidden = max(1, int(round(dim * ffn_ratio)))
        self.name, self.prenorm, self.activation = name, prenorm, activation
        self.attn = MultiHeadAttention(store, f"{name}.attn", dim, heads, rng.child(0), kernel, m, dtype)
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim, dtype=dtype)
        self.fc1 = Linear(store, f"{name}.fc1", dim, hidden, rng.child(1), dtype=dtype)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, dim, rng.child(2), dtype=dtype)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim, dtype=dtype)
        self._c_h = None

    def _ffn(self, y):
        h = self.fc1.forward(y)
        if self.activation == "gelu":
            a, t = gelu(h, return_tanh=True)
        else:
            a, t = np.maximum(h, 0), None
        self._c_h = (h, t)
        return self.fc2.forward(a)

    def _ffn_backward(self, g):
        h, t = self._cached("_c_h")
        g = self.fc2.backward(g)
        g = gelu_backward(h, g, t) if self.activation == "gelu" else g * (h > 0)
        return self.fc1.backward(g)

    def forward(self, x):
        if self.prenorm:
            y = x + self.attn.forward(self.ln1.forward(x))
            return y + self._ffn(self.ln2.forward(y))
        y = self.ln1.forward(x + self.attn.forward(x))
        return self.ln2.forward(y + self._ffn(y))

    def backward(self, grad):
        if self.prenorm:
            gy = grad + self.ln2.backward(self._ffn_backward(grad))
            return gy + self.ln1.backward(self.attn.backward(gy))
        gs = self.ln2.backward(grad)
        gy = gs + self._ffn_backward(gs)
        gs = self.ln1.backward(gy)
        return gs + self.attn.backward(gs)
