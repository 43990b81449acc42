"""Store-backed layers with hand-written backward passes.

A layer registers its weights in a shared ``ParameterStore`` under a dotted
prefix, caches what it needs during ``forward`` and accumulates into the
store's gradient slots during ``backward``.
"""

from __future__ import annotations

import numpy as np

from .errors import StateError
from .tensor import ParameterStore, Rng, layer_norm, layer_norm_backward, linear, linear_backward


class Module:
    def _cached(self, attr: str):
        value = getattr(self, attr, None)
        if value is None:
            raise StateError(f"{type(self).__name__} {getattr(self, 'name', '')}: backward called without a cached forward")
        setattr(self, attr, None)
        return value

    def children(self):
        for v in vars(self).values():
            if isinstance(v, Module):
                yield v
            elif isinstance(v, (list, tuple)):
                yield from (c for c in v if isinstance(c, Module))

    def clear_cache(self) -> None:
        for k in list(vars(self)):
            if k.startswith("_c_"):
                setattr(self, k, None)
        for c in self.children():
            c.clear_cache()


class Linear(Module):
    def __init__(self, store: ParameterStore, name: str, din: int, dout: int, rng: Rng, bias=True, dtype=np.float32):
        self.store, self.name = store, name
        bound = 1.0 / np.sqrt(din)
        self.w = store.add(f"{name}.weight", rng.uniform(-bound, bound, (din, dout), dtype=dtype))
        self.b = store.add(f"{name}.bias", rng.uniform(-bound, bound, (dout,), dtype=dtype)) if bias else None
        self._c_x = None

    def forward(self, x):
        self._c_x = x
        return linear(x, self.store[self.w], self.store[self.b] if self.b else None)

    def backward(self, grad, need_dx=True):
        x = self._cached("_c_x")
        dx, dw, db = linear_backward(x, self.store[self.w], grad, need_dx)
        self.store.grads[self.w] += dw
        if self.b:
            self.store.grads[self.b] += db
        return dx


class LayerNorm(Module):
    def __init__(self, store: ParameterStore, name: str, dim: int, eps=1e-5, dtype=np.float32):
        self.store, self.name, self.eps = store, name, eps
        self.gamma = store.add(f"{name}.gamma", np.ones(dim, dtype=dtype))
        self.beta = store.add(f"{name}.beta", np.zeros(dim, dtype=dtype))
        self._c_ln = None

    def forward(self, x):
        y, self._c_ln = layer_norm(x, self.store[self.gamma], self.store[self.beta], self.eps, return_cache=True)
        return y

    def backward(self, grad):
        dx, dg, db = layer_norm_backward(self._cached("_c_ln"), grad)
        self.store.grads[self.gamma] += dg
        self.store.grads[self.beta] += db
        return dx


class WindowLinear(Module):
    """``Linear`` applied to every n x n window of an image: (N, C, X, Y) -> (N, L, dout).

    With stride 1 and at least as many input channels as outputs, the
    (N, L, C*n*n) window matrix is never built: every pixel is projected once
    against all n*n weight slices and the shifted partial products are summed.
    Otherwise it is unfold + matmul. Both
    paths share the ``{name}.weight`` layout of a plain ``Linear`` on unfolded
    tokens.
    """

    def __init__(self, store: ParameterStore, name: str, c_in: int, spec, dout: int, rng: Rng, dtype=np.float32):
        self.spec, self.c_in, self.dout = spec, c_in, dout
        self.lin = Linear(store, name, c_in * spec.n * spec.n, dout, rng, dtype=dtype)
        self.store, self.name = store, name
        self._c_x = None

    @property
    def shifted(self) -> bool:
        return self.spec.stride == 1 and self.c_in >= self.dout

    def _wr(self):
        # (C*n*n, dout) -> (C, n*n*dout)
        return self.store[self.lin.w].reshape(self.c_in, -1)

    def forward(self, x):
        from .patching import unfold

        if not self.shifted:
            self._c_x = x.shape
            return self.lin.forward(unfold(x, self.spec))
        N, C, X, Y = x.shape
        n, p, D = self.spec.n, self.spec.pad, self.dout
        gx, gy = self.spec.grid(X, Y)
        xp = np.zeros((N, X + 2 * p, Y + 2 * p, C), dtype=x.dtype)
        xp[:, p : p + X, p : p + Y] = x.transpose(0, 2, 3, 1)
        P = np.matmul(xp, self._wr()).reshape(N, X + 2 * p, Y + 2 * p, n, n, D)
        out = np.zeros((N, gx, gy, D), dtype=x.dtype)
        for a in range(n):
            for b in range(n):
                out += P[:, a : a + gx, b : b + gy, a, b]
        out += self.store[self.lin.b]
        self._c_x = (x.shape, xp)
        return out.reshape(N, gx * gy, D)

    def backward(self, grad, need_dx=True):
        from .patching import unfold_backward

        if not self.shifted:
            X, Y = self._cached("_c_x")[2:]
            g = self.lin.backward(grad, need_dx)
            return unfold_backward(g, self.spec, X, Y) if need_dx else None
        (N, C, X, Y), xp = self._cached("_c_x")
        n, p, D = self.spec.n, self.spec.pad, self.dout
        gx, gy = self.spec.grid(X, Y)
        g = grad.reshape(N, gx, gy, D)
        dP = np.zeros((N, X + 2 * p, Y + 2 * p, n, n, D), dtype=grad.dtype)
        for a in range(n):
            for b in range(n):
                dP[:, a : a + gx, b : b + gy, a, b] = g
        dP = dP.reshape(-1, n * n * D)
        self.store.grads[self.lin.w] += (xp.reshape(-1, C).T @ dP).reshape(-1, D)
        self.store.grads[self.lin.b] += g.reshape(-1, D).sum(axis=0)
        if not need_dx:
            return None
        dxp = (dP @ self._wr().T).reshape(N, X + 2 * p, Y + 2 * p, C)
        return np.ascontiguousarray(dxp[:, p : p + X, p : p + Y].transpose(0, 3, 1, 2))
