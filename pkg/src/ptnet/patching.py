"""Image <-> token conversion and bilinear resizing.

Images are (N, C, X, Y); token batches are (N, L, D) with tokens in row-major
order over the output grid and features channel-major within a token.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class UnfoldSpec:
    n: int = 3
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        if self.n < 1 or self.n % 2 == 0:
            raise ConfigError(f"unfold window must be a positive odd integer, got {self.n}")
        if self.stride < 1:
            raise ConfigError(f"unfold stride must be positive, got {self.stride}")
        if self.padding is not None and self.padding < 0:
            raise ConfigError(f"unfold padding must be non-negative, got {self.padding}")

    @property
    def pad(self) -> int:
        return self.n // 2 if self.padding is None else self.padding

    def grid(self, X: int, Y: int) -> tuple[int, int]:
        return (
            kernels.grid_extent(X, self.n, self.stride, self.pad),
            kernels.grid_extent(Y, self.n, self.stride, self.pad),
        )


def unfold(x: np.ndarray, spec: UnfoldSpec) -> np.ndarray:
    """Zero-padded n x n windows at every strided grid location -> (N, L, C*n*n)."""
    if x.ndim != 4:
        raise DimensionError(f"unfold expects (N, C, X, Y), got shape {x.shape}")
    return kernels.unfold(x, spec.n, spec.stride, spec.pad)


def unfold_backward(grad: np.ndarray, spec: UnfoldSpec, X: int, Y: int) -> np.ndarray:
    return kernels.unfold_adjoint(grad, spec.n, spec.stride, spec.pad, X, Y)


def tokens_to_grid(t: np.ndarray, gx: int, gy: int) -> np.ndarray:
    N, L, C = t.shape
    if L != gx * gy:
        raise DimensionError(f"tokens_to_grid: {L} tokens cannot fill a {gx}x{gy} grid")
    return np.ascontiguousarray(t.reshape(N, gx, gy, C).transpose(0, 3, 1, 2))


def grid_to_tokens(x: np.ndarray) -> np.ndarray:
    N, C, X, Y = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1).reshape(N, X * Y, C))


def fold_overlap(t: np.ndarray, spec: UnfoldSpec, X: int, Y: int) -> np.ndarray:
    """Average overlapping window contributions back onto an X x Y image.

    Pixels no window covers (possible only when stride exceeds the window)
    come back as zero.
    """
    gx, gy = spec.grid(X, Y)
    if t.ndim != 3 or t.shape[1] != gx * gy or t.shape[2] % (spec.n * spec.n):
        raise DimensionError(f"fold_overlap: tokens {t.shape} inconsistent with {spec} on {X}x{Y}")
    C = t.shape[2] // (spec.n * spec.n)
    total = unfold_backward(t, spec, X, Y)
    ones = np.ones((1, C, X, Y), dtype=t.dtype)
    counts = unfold_backward(unfold(ones, spec), spec, X, Y)
    return np.divide(total, counts, out=np.zeros_like(total), where=counts > 0)


@lru_cache(maxsize=256)
def bilinear_matrix(n_in: int, n_out: int, mode: str = "bilinear") -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel (align-corners-false) sampling.

    Sample positions outside the outermost pixel centers are linearly
    extrapolated from the two border pixels, so affine signals are reproduced
    exactly in both directions.
    """
    A = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    if mode == "nearest":
        idx = np.clip(np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(int), 0, n_in - 1)
        A[np.arange(n_out), idx] = 1.0
        return A
    if n_in == 1:
        A[:, 0] = 1.0
        return A
    i0 = np.clip(np.floor(src).astype(int), 0, n_in - 2)
    w = src - i0
    A[np.arange(n_out), i0] = 1.0 - w
    A[np.arange(n_out), i0 + 1] += w
    return A


def resize_bilinear(x: np.ndarray, size: tuple[int, int] | None = None, factor: float | None = None, mode="bilinear"):
    """Resize the two spatial axes to ``size`` or by ``factor`` (2 or 0.5)."""
    N, C, X, Y = x.shape
    if size is None:
        if factor == 2:
            size = (2 * X, 2 * Y)
        elif factor == 0.5:
            if X % 2 or Y % 2:
                raise DimensionError(f"resize_bilinear: cannot halve odd extents {X}x{Y}")
            size = (X // 2, Y // 2)
        else:
            raise ConfigError(f"resize_bilinear: factor must be 2 or 0.5, got {factor}")
    if tuple(size) == (X, Y):
        return x.copy()
    A = bilinear_matrix(X, size[0], mode).astype(x.dtype)
    B = bilinear_matrix(Y, size[1], mode).astype(x.dtype)
    return np.matmul(np.matmul(A, x), B.T)


def resize_bilinear_backward(grad: np.ndarray, in_size: tuple[int, int], mode="bilinear") -> np.ndarray:
    X, Y = in_size
    gx, gy = grad.shape[-2:]
    if (gx, gy) == (X, Y):
        return grad.copy()
    A = bilinear_matrix(X, gx, mode).astype(grad.dtype)
    B = bilinear_matrix(Y, gy, mode).astype(grad.dtype)
    return np.matmul(np.matmul(A.T, grad), B)
