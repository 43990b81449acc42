# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled window extraction kernels; same contract as ``_pykernels``."""

import numpy as np

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _extent(Py_ssize_t size, Py_ssize_t n, Py_ssize_t stride, Py_ssize_t pad) nogil:
    return (size + 2 * pad - n) // stride + 1


def grid_extent(int size, int n, int stride, int pad):
    return _extent(size, n, stride, pad)


cdef void _unfold(const real[:, :, :, ::1] x, real[:, :, ::1] out,
                  Py_ssize_t n, Py_ssize_t stride, Py_ssize_t pad,
                  Py_ssize_t gx, Py_ssize_t gy) noexcept nogil:
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], X = x.shape[2], Y = x.shape[3]
    cdef Py_ssize_t s, gi, gj, c, a, b, xi, yj, f, l
    for s in range(N):
        for gi in range(gx):
            for gj in range(gy):
                l = gi * gy + gj
                f = 0
                for c in range(C):
                    for a in range(n):
                        xi = gi * stride + a - pad
                        if xi < 0 or xi >= X:
                            for b in range(n):
                                out[s, l, f] = 0
                                f += 1
                            continue
                        for b in range(n):
                            yj = gj * stride + b - pad
                            if yj < 0 or yj >= Y:
                                out[s, l, f] = 0
                            else:
                                out[s, l, f] = x[s, c, xi, yj]
                            f += 1


cdef void _unfold_adjoint(const real[:, :, ::1] t, real[:, :, :, ::1] out,
                          Py_ssize_t n, Py_ssize_t stride, Py_ssize_t pad,
                          Py_ssize_t gx, Py_ssize_t gy) noexcept nogil:
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], X = out.shape[2], Y = out.shape[3]
    cdef Py_ssize_t s, gi, gj, c, a, b, xi, yj, f, l
    for s in range(N):
        for gi in range(gx):
            for gj in range(gy):
                l = gi * gy + gj
                f = 0
                for c in range(C):
                    for a in range(n):
                        xi = gi * stride + a - pad
                        if xi < 0 or xi >= X:
                            f += n
                            continue
                        for b in range(n):
                            yj = gj * stride + b - pad
                            if yj >= 0 and yj < Y:
                                out[s, c, xi, yj] += t[s, l, f]
                            f += 1


def unfold(x, int n, int stride, int pad):
    """(N, C, X, Y) -> (N, L, C*n*n), tokens row-major over the output grid."""
    x = np.ascontiguousarray(x)
    N, C, X, Y = x.shape
    gx, gy = _extent(X, n, stride, pad), _extent(Y, n, stride, pad)
    out = np.empty((N, gx * gy, C * n * n), dtype=x.dtype)
    if x.dtype == np.float32:
        _unfold[float](x, out, n, stride, pad, gx, gy)
    elif x.dtype == np.float64:
        _unfold[double](x, out, n, stride, pad, gx, gy)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return out


def unfold_adjoint(t, int n, int stride, int pad, int X, int Y):
    """Transpose of ``unfold``: scatter-add token entries back onto the image."""
    t = np.ascontiguousarray(t)
    N, L, F = t.shape
    C = F // (n * n)
    gx, gy = _extent(X, n, stride, pad), _extent(Y, n, stride, pad)
    out = np.zeros((N, C, X, Y), dtype=t.dtype)
    if t.dtype == np.float32:
        _unfold_adjoint[float](t, out, n, stride, pad, gx, gy)
    elif t.dtype == np.float64:
        _unfold_adjoint[double](t, out, n, stride, pad, gx, gy)
    else:
        raise TypeError(f"unsupported dtype {t.dtype}")
    return out
