"""Dense array primitives, seeded randomness, parameter storage and gradient checking.

Tensors are plain numpy arrays (row-major, float32 or float64). Every
differentiable primitive here comes as a ``*_forward``/``*_backward`` pair or
as a function plus an explicit backward helper; the model composes them by
hand rather than through a general autodiff graph.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import DataError, DimensionError, NumericError

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
PTT1_MAGIC = b"PTT1"


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


class Rng:
    """Seeded, splittable generator backed by the Philox counter-based bit generator.

    Philox output is fully determined by (key, counter), so draws are identical
    across runs and platforms for a given seed.
    """

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.path])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "Rng":
        """Independent stream derived from this one's seed and ``keys``."""
        return Rng(self.seed, *self.path, *keys)

    def normal(self, size=None, loc=0.0, scale=1.0, dtype=np.float64):
        if size is None:
            return float(loc + scale * self._gen.standard_normal())
        return (loc + scale * self._gen.standard_normal(size)).astype(dtype, copy=False)

    def uniform(self, low=0.0, high=1.0, size=None, dtype=np.float64):
        if size is None:
            return float(self._gen.uniform(low, high))
        return self._gen.uniform(low, high, size).astype(dtype, copy=False)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)


# ---------------------------------------------------------------------------
# Parameter storage
# ---------------------------------------------------------------------------


@dataclass
class ParameterStore:
    """Ordered name -> weight map with a gradient slot of identical shape per weight.

    ``buffers`` hold fixed, non-trainable tensors (e.g. random feature
    projections); they are checkpointed but never counted or optimized.
    """

    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> str:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return name

    def add_buffer(self, name: str, value: np.ndarray) -> str:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.buffers[name] = value
        return name

    def __getitem__(self, name: str) -> np.ndarray:
        if name in self.params:
            return self.params[name]
        return self.buffers[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def param_count(self) -> int:
        return sum(int(np.prod(p.shape)) for p in self.params.values())

    def astype(self, dtype) -> None:
        """Convert every weight, gradient and buffer in place to ``dtype``."""
        for d in (self.params, self.grads, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)


def param_count(store: ParameterStore) -> int:
    return store.param_count()


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product; leading axes broadcast as batch axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return np.matmul(a, b)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    if np.isnan(x).any():
        raise NumericError("softmax_rows: NaN in input")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(y: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return y * (grad - (grad * y).sum(axis=-1, keepdims=True))


def _row_mean(x: np.ndarray) -> np.ndarray:
    # mean over the last axis as a mat-vec; much faster than ufunc.reduce on short rows
    return np.matmul(x, np.full((x.shape[-1], 1), 1.0 / x.shape[-1], dtype=x.dtype))


def layer_norm(x, gamma, beta, eps=1e-5, return_cache=False):
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: last axis {x.shape[-1]} does not match gamma {gamma.shape} / beta {beta.shape}"
        )
    xc = x - _row_mean(x)
    inv = 1.0 / np.sqrt(_row_mean(xc * xc) + eps)
    xhat = xc * inv
    y = xhat * gamma + beta
    if return_cache:
        return y, (xhat, inv, gamma)
    return y


def layer_norm_backward(cache, grad):
    """Returns (dx, dgamma, dbeta); parameter grads are summed over leading axes."""
    xhat, inv, gamma = cache
    g2 = grad.reshape(-1, grad.shape[-1])
    dgamma = np.einsum("ij,ij->j", g2, xhat.reshape(g2.shape))
    dbeta = g2.sum(axis=0)
    g = grad * gamma
    dx = inv * (g - _row_mean(g) - xhat * _row_mean(g * xhat))
    return dx, dgamma, dbeta


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    y = np.matmul(x, w)
    if b is not None:
        y += b
    return y


def linear_backward(x, w, grad, need_dx=True):
    """Returns (dx, dw, db) for y = x @ w + b."""
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad.reshape(-1, grad.shape[-1])
    dw = x2.T @ g2
    db = g2.sum(axis=0)
    dx = np.matmul(grad, w.T) if need_dx else None
    return dx, dw, db


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray, return_tanh=False):
    """tanh-approximation GELU."""
    t = np.tanh(x * (_GELU_C + (_GELU_C * 0.044715) * (x * x)))
    y = 0.5 * x * (1.0 + t)
    return (y, t) if return_tanh else y


def gelu_backward(x: np.ndarray, grad: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = np.tanh(x * (_GELU_C + (_GELU_C * 0.044715) * (x * x)))
    dt = (1.0 - t * t) * (_GELU_C + (3 * _GELU_C * 0.044715) * (x * x))
    return grad * (0.5 * (1.0 + t) + 0.5 * x * dt)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def lines(self) -> list[str]:
        out = [f"{name:<60s} {err:.3e}" for name, err in self.errors.items()]
        out.append(f"{'max':<60s} {self.max_error:.3e}  {'PASS' if self.passed else 'FAIL'} (tol {self.tol:g})")
        return out


def grad_check(
    f: Callable[[], float],
    params: ParameterStore,
    h: float = 1e-5,
    tol: float = 1e-4,
    analytic: Callable[[], None] | None = None,
    max_entries: int | None = None,
    rng: Rng | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients in ``params.grads`` against central differences.

    ``f`` evaluates the scalar loss at the current weights. ``analytic``, if
    given, is called once first to (re)populate ``params.grads``. The
    relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``; the
    report holds the max per parameter. With ``max_entries`` only a random
    subset of coordinates per parameter is perturbed.
    """
    if analytic is not None:
        params.zero_grad()
        analytic()
    base = f()
    if not np.isfinite(base):
        raise NumericError(f"grad_check: non-finite loss {base}")
    rng = rng or Rng(0)
    errors: dict[str, float] = {}
    for name, w in params.items():
        flat = w.reshape(-1)
        ga = params.grads[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.child(len(errors)).permutation(flat.size)[:max_entries])
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite loss while perturbing {name}[{i}]")
            num = (fp - fm) / (2 * h)
            a = float(ga[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(errors, tol)


# ---------------------------------------------------------------------------
# PTT1 tensor container
# ---------------------------------------------------------------------------


def write_ptt1(fp, arr: np.ndarray) -> None:
    """Write ``arr`` to an open binary file object in PTT1 layout."""
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise DataError(f"PTT1 supports float32/float64 only, got {arr.dtype}")
    fp.write(PTT1_MAGIC)
    fp.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_ptt1(fp) -> np.ndarray:
    magic = fp.read(4)
    if magic != PTT1_MAGIC:
        raise DataError(f"not a PTT1 container (magic {magic!r})")
    code, ndim = struct.unpack("<BB", fp.read(2))
    if code not in _CODE_DTYPES:
        raise DataError(f"PTT1: unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", fp.read(4 * ndim))
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    count = int(np.prod(shape)) if ndim else 1
    payload = fp.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise DataError("PTT1: truncated payload")
    return np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(shape)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fp:
        write_ptt1(fp, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fp:
        return read_ptt1(fp)


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_ptt1(buf, arr)
    return buf.getvalue()
