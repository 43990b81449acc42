"""Timing and accuracy measurements for exact vs. FAVOR+ attention."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .attention import attention_exact, attention_favor, orthogonal_gaussian
from .errors import ConfigError
from .tensor import Rng


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    return float(np.linalg.norm(approx - exact) / np.linalg.norm(exact))


def random_qkv(rng: Rng, L: int, d: int, dtype=np.float64):
    """Q, K, V with entries ~ N(0, 1/d)."""
    sd = d**-0.5
    return tuple(rng.child(i).normal((L, d), dtype=dtype) * sd for i in range(3))


def favor_error(L: int, d: int, m: int, seed: int) -> float:
    rng = Rng(seed)
    Q, K, V = random_qkv(rng.child(0), L, d)
    omega = orthogonal_gaussian(rng.child(1), m, d)
    return relative_error(attention_favor(Q, K, V, omega), attention_exact(Q, K, V))


def favor_error_sweep(L: int, d: int, ms, seeds) -> dict[int, list[float]]:
    """Relative L2 error of FAVOR+ against exact attention for every (m, seed)."""
    return {m: [favor_error(L, d, m, s) for s in seeds] for m in ms}


def _median_time(fn, repeats: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


@dataclass
class BenchRow:
    L: int
    d: int
    m: int
    exact_s: float
    favor_s: float
    rel_error: float


def bench_attention(Ls, d: int = 16, ms=(64,), repeats: int = 5, seed: int = 0, dtype=np.float64) -> list[BenchRow]:
    """Median wall time of both kernels and the FAVOR+ relative error for each (L, m)."""
    if any(L < 2 for L in Ls):
        raise ConfigError(f"sequence lengths must be >= 2, got {list(Ls)}")
    if d < 1 or any(m < 1 for m in ms) or repeats < 1:
        raise ConfigError("d, m and repeats must be positive")
    rows = []
    for L in Ls:
        Q, K, V = random_qkv(Rng(seed).child(L), L, d, dtype)
        exact = attention_exact(Q, K, V)
        t_exact = _median_time(lambda: attention_exact(Q, K, V), repeats)
        for m in ms:
            omega = orthogonal_gaussian(Rng(seed).child(L, m), m, d)
            t_favor = _median_time(lambda: attention_favor(Q, K, V, omega), repeats)
            err = relative_error(attention_favor(Q, K, V, omega), exact)
            rows.append(BenchRow(L, d, m, t_exact, t_favor, err))
    return rows


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(BenchRow.__dataclass_fields__), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(asdict(r))
    return buf.getvalue()
