"""Time the compiled window kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeats 20] [--csv out.csv]

Each row is one (kernel, shape, window, stride) case with the median time of
both backends and the speedup. Outputs of the two backends are compared
before timing.
"""

import argparse
import csv
import statistics
import sys
import timeit

import numpy as np

from ptnet import _pykernels

try:
    from ptnet import _ckernels
except ImportError:
    sys.exit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")

# (N, C, X, Y, n, stride): stem, strided encoder and decoder shapes of the reduced and full models
CASES = [
    (4, 1, 64, 64, 7, 1),
    (4, 16, 64, 64, 3, 2),
    (4, 32, 32, 32, 3, 2),
    (4, 16, 64, 64, 7, 1),
    (1, 32, 256, 224, 3, 2),
    (1, 1, 256, 224, 7, 1),
]


def median_time(fn, repeats):
    fn()
    return statistics.median(timeit.repeat(fn, number=1, repeat=repeats))


def run(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for N, C, X, Y, n, s in CASES:
        pad = n // 2
        x = rng.standard_normal((N, C, X, Y)).astype(np.float32)
        t = _pykernels.unfold(x, n, s, pad)
        assert np.array_equal(t, _ckernels.unfold(x, n, s, pad))
        back_py = _pykernels.unfold_adjoint(t, n, s, pad, X, Y)
        back_c = _ckernels.unfold_adjoint(t, n, s, pad, X, Y)
        np.testing.assert_allclose(back_c, back_py, rtol=1e-5, atol=1e-5)
        for name, py, cy in (
            ("unfold", lambda: _pykernels.unfold(x, n, s, pad), lambda: _ckernels.unfold(x, n, s, pad)),
            ("adjoint", lambda: _pykernels.unfold_adjoint(t, n, s, pad, X, Y),
             lambda: _ckernels.unfold_adjoint(t, n, s, pad, X, Y)),
        ):
            tp, tc = median_time(py, repeats), median_time(cy, repeats)
            rows.append({"kernel": name, "shape": f"{N}x{C}x{X}x{Y}", "n": n, "stride": s,
                         "python_ms": 1e3 * tp, "cython_ms": 1e3 * tc, "speedup": tp / tc})
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--csv", default=None, help="also write the table to this file")
    args = p.parse_args(argv)
    rows = run(args.repeats)
    print(f"{'kernel':<8} {'shape':<14} {'n':>2} {'S':>2} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for r in rows:
        print(f"{r['kernel']:<8} {r['shape']:<14} {r['n']:>2} {r['stride']:>2} "
              f"{r['python_ms']:>10.3f} {r['cython_ms']:>10.3f} {r['speedup']:>7.2f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fp:
            w = csv.DictWriter(fp, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
