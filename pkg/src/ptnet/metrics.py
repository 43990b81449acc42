"""Image quality metrics and the paired t-test.

SSIM defaults to whole-volume (global) statistics; ``ssim_windowed`` is the
Gaussian-window local variant kept for cross-checking.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, NumericError

K1, K2 = 0.01, 0.03


def _pair(x, y, what):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"{what}: shape mismatch {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y) -> float:
    """10 log10(1 / MSE) for unit dynamic range; ``math.inf`` when the inputs are identical."""
    x, y = _pair(x, y, "psnr")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim_terms(x, y, c1=None, c2=None, c3=None) -> tuple[float, float, float]:
    """(luminance, contrast, structure) factors from global statistics."""
    x, y = _pair(x, y, "ssim")
    c1 = (K1 * 1.0) ** 2 if c1 is None else c1
    c2 = (K2 * 1.0) ** 2 if c2 is None else c2
    c3 = c2 / 2 if c3 is None else c3
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy = float(np.mean(dx * dx)), float(np.mean(dy * dy))
    cov = float(np.mean(dx * dy))
    sxy = math.sqrt(vx * vy)  # sqrt(v*v) == v exactly, so ssim(x, x) == 1
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    con = (2 * sxy + c2) / (vx + vy + c2)
    stru = (cov + c3) / (sxy + c3)
    return float(lum), float(con), float(stru)


def ssim(x, y, c1=None, c2=None, c3=None) -> float:
    lum, con, stru = ssim_terms(x, y, c1, c2, c3)
    return lum * con * stru


def ssim_windowed(x, y, sigma=1.5, radius=5) -> float:
    """Mean local SSIM under a Gaussian window of width 2*radius+1 along every axis."""
    from scipy.ndimage import gaussian_filter

    x, y = _pair(x, y, "ssim_windowed")
    c1, c2 = K1**2, K2**2
    filt = lambda a: gaussian_filter(a, sigma, truncate=radius / sigma, mode="reflect")  # noqa: E731
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cov = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def abs_error_map(truth, pred) -> np.ndarray:
    truth, pred = _pair(truth, pred, "abs_error_map")
    return np.abs(truth - pred)


# ---------------------------------------------------------------------------
# Student t via the regularized incomplete beta function
# ---------------------------------------------------------------------------


def _beta_cf(a, b, x, max_iter=10000, tol=1e-15):
    """Continued fraction for I_x(a, b), modified Lentz evaluation."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise NumericError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc requires a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"betainc requires 0 <= x <= 1, got {x}")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_sf_two_sided(t, df)
    return 1.0 - tail if t >= 0 else tail


@dataclass
class TTestResult:
    t: float
    df: int
    p: float
    n: int


def paired_ttest(a, b) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"paired_ttest: need equal-length 1-D samples, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ConfigError(f"paired_ttest needs at least 2 pairs, got {n}")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateInputError("paired_ttest: differences have zero variance")
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    return TTestResult(t, n - 1, t_sf_two_sided(t, n - 1), n)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else repr(float(v))


def _num(v: float):
    return "inf" if math.isinf(v) else float(v)


@dataclass
class MetricsReport:
    rows: list[tuple[str, float, float]] = field(default_factory=list)
    comparison: dict | None = None

    def add(self, vid: str, s: float, p: float) -> None:
        if not -1.0 <= s <= 1.0:
            raise NumericError(f"SSIM {s} for {vid} outside [-1, 1]")
        self.rows.append((vid, float(s), float(p)))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def mean_psnr(self) -> float:
        vals = [r[2] for r in self.rows]
        return math.inf if any(math.isinf(v) for v in vals) else float(np.mean(vals))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "ssim", "psnr"])
        for vid, s, p in self.rows:
            w.writerow([vid, _fmt(s), _fmt(p)])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {"volumes": len(self.rows), "mean_ssim": self.mean_ssim, "mean_psnr": _num(self.mean_psnr)}
        if self.comparison is not None:
            out["comparison"] = self.comparison
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def read_report_csv(path) -> dict[str, tuple[float, float]]:
    with open(path, newline="") as fp:
        return {r["id"]: (float(r["ssim"]), float(r["psnr"])) for r in csv.DictReader(fp)}


def compare_reports(mine: MetricsReport, other: dict[str, tuple[float, float]]) -> dict:
    """Paired t-tests (ssim, psnr) over the ids both reports share."""
    shared = [r for r in mine.rows if r[0] in other]
    if not shared:
        raise ConfigError("compared reports share no volume ids")
    out = {"shared_ids": len(shared)}
    for i, key in ((1, "ssim"), (2, "psnr")):
        res = paired_ttest([r[i] for r in shared], [other[r[0]][i - 1] for r in shared])
        out[key] = {"t": res.t, "df": res.df, "p": res.p}
    return out
