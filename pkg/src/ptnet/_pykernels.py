"""Pure-numpy window extraction kernels (fallback for the compiled ``_ckernels``)."""

import numpy as np


def grid_extent(size: int, n: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - n) // stride + 1


def unfold(x: np.ndarray, n: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, X, Y) -> (N, L, C*n*n), tokens row-major over the output grid."""
    N, C, X, Y = x.shape
    gx, gy = grid_extent(X, n, stride, pad), grid_extent(Y, n, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((N, gx, gy, C, n, n), dtype=x.dtype)
    for a in range(n):
        for b in range(n):
            win = xp[:, :, a : a + stride * (gx - 1) + 1 : stride, b : b + stride * (gy - 1) + 1 : stride]
            cols[:, :, :, :, a, b] = win.transpose(0, 2, 3, 1)
    return cols.reshape(N, gx * gy, C * n * n)


def unfold_adjoint(t: np.ndarray, n: int, stride: int, pad: int, X: int, Y: int) -> np.ndarray:
    """Transpose of ``unfold``: scatter-add token entries back onto the image."""
    N, L, F = t.shape
    C = F // (n * n)
    gx, gy = grid_extent(X, n, stride, pad), grid_extent(Y, n, stride, pad)
    cols = t.reshape(N, gx, gy, C, n, n)
    xp = np.zeros((N, C, X + 2 * pad, Y + 2 * pad), dtype=t.dtype)
    for a in range(n):
        for b in range(n):
            xp[:, :, a : a + stride * (gx - 1) + 1 : stride, b : b + stride * (gy - 1) + 1 : stride] += cols[
                :, :, :, :, a, b
            ].transpose(0, 3, 1, 2)
    return xp[:, :, pad : pad + X, pad : pad + Y].copy()
