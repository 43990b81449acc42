"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Run on its own with ``pytest tests/test_acceptance.py -v``; the verdict lines
are repeated in the "acceptance criteria" section of the terminal summary.
The training criterion takes about 25 minutes on one CPU core.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy import integrate

from ptnet.attention import MhaWeights, mha
from ptnet.bench import bench_attention, favor_error_sweep
from ptnet.cli import main as cli_main
from ptnet.data import synthetic_arrays
from ptnet.metrics import paired_ttest, psnr, ssim
from ptnet.model import PTNet, check_model_gradients, gradcheck_config, ptnet_l, ptnet_s, ptnet_s_reduced, read_checkpoint
from ptnet.patching import UnfoldSpec, fold_overlap, unfold
from ptnet.tensor import Rng
from ptnet.training import TrainPlan, select_best, train, validation_ssim

REFERENCE_COUNTS = {"PTNet-S": 8.78e6, "PTNet-L": 27.69e6}


@pytest.mark.slow
def test_gradient_correctness(verdict):
    t0 = time.perf_counter()
    rep = check_model_gradients(gradcheck_config(), size=16)
    elapsed = time.perf_counter() - t0
    worst = max(rep.errors, key=rep.errors.get)
    ok = rep.max_error <= 1e-4 and elapsed <= 300
    verdict(1, "f64 finite-difference check of the reduced model", ok,
            f"max rel err {rep.max_error:.2e} ({worst}) over {len(rep.errors)} tensors, {elapsed:.0f}s")


def _loop_mha(x, w: MhaWeights):
    L, D = x.shape
    H = w.heads
    dh = w.wq.shape[1] // H
    q, k, v = x @ w.wq, x @ w.wk, x @ w.wv
    concat = np.zeros((L, w.wv.shape[1]))
    for h in range(H):
        cols = range(h * dh, (h + 1) * dh)
        for i in range(L):
            s = [sum(q[i, c] * k[j, c] for c in cols) / math.sqrt(dh) for j in range(L)]
            mx = max(s)
            e = [math.exp(a - mx) for a in s]
            z = sum(e)
            for j in range(L):
                for c in cols:
                    concat[i, c] += e[j] / z * v[j, c]
    out = np.zeros((L, w.wo.shape[1]))
    for i in range(L):
        for o in range(w.wo.shape[1]):
            out[i, o] = sum(concat[i, c] * w.wo[c, o] for c in range(w.wo.shape[0]))
    return out


def test_attention_oracle(verdict):
    worst = 0.0
    for case in range(1000):
        rng = Rng(2024, case)
        L = int(rng.integers(1, 9))
        D = int(rng.integers(1, 9))
        divisors = [h for h in range(1, D + 1) if D % h == 0]
        H = divisors[int(rng.integers(0, len(divisors)))]
        x = rng.child(0).normal((L, D))
        w = MhaWeights(*(rng.child(i).normal((D, D)) / math.sqrt(D) for i in range(1, 5)), heads=H)
        worst = max(worst, float(np.max(np.abs(mha(x, w) - _loop_mha(x, w)))))
    verdict(2, "multi-head attention vs. loop oracle", worst <= 1e-6, f"1000 cases, max abs diff {worst:.2e}")


def test_favor_approximation(verdict):
    ms = [16, 32, 64, 128, 256]
    errs = favor_error_sweep(64, 16, ms, range(10))
    med = float(np.median(errs[256]))
    means = [float(np.mean(errs[m])) for m in ms]
    monotone = all(a >= b for a, b in zip(means, means[1:]))
    verdict(3, "FAVOR+ error at L=64, d=16", med <= 0.10 and monotone,
            f"median@256 {med:.4f}; mean by m " + ", ".join(f"{m}:{e:.4f}" for m, e in zip(ms, means)))


def test_complexity_ratios(verdict):
    t0 = time.perf_counter()
    rows = {r.L: r for r in bench_attention([1024, 4096], d=16, ms=[64], repeats=5)}
    elapsed = time.perf_counter() - t0
    exact = rows[4096].exact_s / rows[1024].exact_s
    favor = rows[4096].favor_s / rows[1024].favor_s
    ok = exact >= 8 and favor <= 6 and elapsed <= 120
    verdict(4, "time ratio L=4096/L=1024", ok, f"exact {exact:.1f}x, favor(m=64) {favor:.1f}x, {elapsed:.0f}s")


def test_shape_contract(verdict):
    problems, checked = [], 0
    for name, cfg in (("S", ptnet_s()), ("L", ptnet_l())):
        model = PTNet(cfg, seed=0)
        seen = {}
        fwd = model.high.bottleneck.forward

        def spy(x, fwd=fwd, seen=seen):
            out = fwd(x)
            seen["grid"] = out.shape[2:]
            return out

        model.high.bottleneck.forward = spy
        for X, Y in ((64, 64), (96, 80)):
            out = model.forward(Rng(0).uniform(size=(1, 1, X, Y)).astype(np.float32))
            model.clear_cache()
            checked += 1
            if out.shape != (1, 1, X, Y):
                problems.append(f"{name} {X}x{Y}: output {out.shape}")
            if seen["grid"] != (X // 16, Y // 16):
                problems.append(f"{name} {X}x{Y}: deepest grid {seen['grid']}")
    verdict(5, "output extents and 1/16 bottleneck grid", not problems,
            f"{checked} model/input pairs" + (f"; {'; '.join(problems)}" if problems else ", all match"))


@pytest.mark.slow
def test_synthetic_training(verdict, tmp_path):
    train_src, train_tgt = synthetic_arrays(100, 200, 64, 64)
    val_src, val_tgt = synthetic_arrays(200, 40, 64, 64)
    test_src, test_tgt = synthetic_arrays(300, 40, 64, 64)
    model = PTNet(ptnet_s_reduced(), seed=0)
    plan = TrainPlan(batch_size=4, epochs_fixed=20, epochs_decay=20, lr=2e-4, seed=0)
    t0 = time.perf_counter()
    res = train(model, train_src, train_tgt, val_src, val_tgt, plan, out_dir=tmp_path)
    elapsed = time.perf_counter() - t0
    steps = res.log[-1]["step"]
    held_out = validation_ssim(model, test_src, test_tgt)

    vals = [r["val_ssim"] for r in res.log]
    argmax = select_best(vals) + 1
    best_tensors, best_meta = read_checkpoint(tmp_path / "best.ptck")
    epoch_tensors, _ = read_checkpoint(tmp_path / f"epoch_{argmax:03d}.ptck")
    selection_ok = (
        res.best_epoch == argmax == best_meta["epoch"]
        and all(np.array_equal(best_tensors[k], epoch_tensors[k]) for k in epoch_tensors)
        and all(np.array_equal(model.store[k], epoch_tensors[k]) for k in model.store)
    )
    ok = held_out >= 0.90 and steps <= 2000 and elapsed <= 1800 and selection_ok
    verdict(6, "reduced PTNet-S on the synthetic task", ok,
            f"held-out SSIM {held_out:.4f} after {steps} steps in {elapsed / 60:.1f} min; "
            f"best epoch {res.best_epoch} (argmax {argmax}, selection {'ok' if selection_ok else 'WRONG'})")


def _t_two_sided_quadrature(t, df):
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    body, _ = integrate.quad(lambda x: c * (1 + x * x / df) ** (-(df + 1) / 2), 0.0, abs(t), epsabs=1e-14, epsrel=1e-13)
    return 1.0 - 2.0 * body


def test_metric_fidelity(verdict):
    x = Rng(7).random((24, 20, 6)) * 0.8
    s_self = ssim(x, x)
    p1, p2 = psnr(x, x + 0.1), psnr(x, x + 0.01)
    res = paired_ttest([0.5, 0.7, 0.3, 0.6, 0.4], [0.0] * 5)
    oracle_p = _t_two_sided_quadrature(res.t, res.df)
    ok = (
        s_self == 1.0
        and abs(p1 - 20.0) <= 1e-9
        and abs(p2 - 40.0) <= 1e-9
        and abs(res.t - 7.0711) <= 1e-3
        and abs(res.p - 0.0021) <= 1e-3
        and abs(res.p - oracle_p) <= 1e-3
    )
    verdict(7, "SSIM, pSNR and paired t-test", ok,
            f"ssim(x,x)={s_self!r}, psnr {p1:.12f}/{p2:.12f} dB, t={res.t:.4f} p={res.p:.5f} (quadrature p={oracle_p:.5f})")


def _tree_bytes(root):
    # the evaluate snapshot records its own checkpoint path, which differs by run directory
    files = (p for p in sorted(root.rglob("*")) if p.is_file() and p.name != "resolved_config.json")
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in files}


def test_round_trip_and_determinism(verdict, tmp_path):
    x = Rng(8).normal((2, 3, 12, 10))
    fold = {}
    for n in (1, 3, 7):
        for S in (1, 2):
            spec = UnfoldSpec(n, S)
            fold[(n, S)] = float(np.max(np.abs(fold_overlap(unfold(x, spec), spec, 12, 10) - x)))
    fold_bad = [k for k, e in fold.items() if e > 1e-12]

    data = tmp_path / "data"
    assert cli_main(["gen-data", "--volumes", "10", "--size", "16x16", "--depth", "2", "--seed", "1", "-o", str(data)]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "gradcheck", "train": {"epochs_fixed": 1, "epochs_decay": 1}}))
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli_main(["train", "-c", str(cfg), "-m", str(data / "manifest.json"), "--seed", "4", "-o", str(out / "train")]) == 0
        assert cli_main(["evaluate", "-k", str(out / "train" / "best.ptck"), "-m", str(data / "manifest.json"),
                         "-o", str(out / "eval"), "--error-maps"]) == 0
        runs.append(_tree_bytes(out))
    differ = sorted(k for k in runs[0].keys() | runs[1].keys() if runs[0].get(k) != runs[1].get(k))
    same = not differ
    verdict(8, "fold/unfold round trip and byte-identical reruns", not fold_bad and same,
            "fold errors " + ", ".join(f"(n={n},S={S}):{e:.1e}" for (n, S), e in fold.items())
            + f"; {len(runs[0])} logs/checkpoints/reports " + ("identical" if same else f"differ: {differ}"))


def test_parameter_accounting(verdict):
    parts = []
    ok = True
    for name, cfg in (("PTNet-S", ptnet_s()), ("PTNet-L", ptnet_l())):
        n = PTNet(cfg, seed=0).param_count()
        ref = REFERENCE_COUNTS[name]
        delta = (n - ref) / ref
        ok &= abs(delta) <= 0.30
        parts.append(f"{name} {n / 1e6:.2f}M vs {ref / 1e6:.2f}M ({delta:+.1%})")
    verdict(9, "parameter counts vs. reference", ok, "; ".join(parts))
