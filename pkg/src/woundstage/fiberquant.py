"""Collagen masking, orientation coherency and group statistics.

Coherency is taken from a single structure tensor averaged over the collagen
mask, ``C = (l1 - l2) / (l1 + l2)`` for its eigenvalues ``l1 >= l2``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DegenerateInputError

EPS = 1e-12


def rgb_to_hsv(rgb: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """8-bit RGB to (hue in degrees [0, 360), saturation, value) in [0, 1]."""
    x = np.asarray(rgb, dtype=np.float64) / 255.0
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    v = x.max(axis=-1)
    c = v - x.min(axis=-1)
    s = np.divide(c, v, out=np.zeros_like(v), where=v > 0)
    safe = np.where(c > 0, c, 1.0)
    h = np.select(
        [c == 0, v == r, v == g],
        [0.0, ((g - b) / safe) % 6.0, (b - r) / safe + 2.0],
        default=(r - g) / safe + 4.0,
    )
    return (60.0 * h) % 360.0, s, v


@dataclass
class CollagenMask:
    mask: np.ndarray
    h_lo: float = 150.0
    h_hi: float = 270.0
    s_min: float = 0.15
    v_min: float = 0.10

    @property
    def fraction(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0

    @property
    def empty(self) -> bool:
        return not bool(self.mask.any())


def collagen_mask(rgb: np.ndarray, h_lo: float = 150.0, h_hi: float = 270.0,
                  s_min: float = 0.15, v_min: float = 0.10) -> CollagenMask:
    """Blue-stained pixels: hue in [h_lo, h_hi] degrees with enough saturation and value."""
    h, s, v = rgb_to_hsv(rgb)
    mask = (h >= h_lo) & (h <= h_hi) & (s >= s_min) & (v >= v_min)
    return CollagenMask(mask, h_lo, h_hi, s_min, v_min)


def luminance(rgb: np.ndarray) -> np.ndarray:
    x = np.asarray(rgb, dtype=np.float64)
    return 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]


@dataclass
class StructureTensorSummary:
    jxx: float
    jxy: float
    jyy: float

    def eigenvalues(self) -> Tuple[float, float]:
        half_trace = 0.5 * (self.jxx + self.jyy)
        r = 0.5 * math.sqrt((self.jxx - self.jyy) ** 2 + 4 * self.jxy ** 2)
        return half_trace + r, half_trace - r

    def coherency(self) -> float:
        num = math.sqrt((self.jxx - self.jyy) ** 2 + 4.0 * self.jxy ** 2)
        return num / (self.jxx + self.jyy + EPS)

    def orientation(self) -> float:
        """Dominant structure orientation in radians (image axes, y pointing down)."""
        return 0.5 * math.atan2(2 * self.jxy, self.jyy - self.jxx)


def structure_tensor(gray: np.ndarray, mask: Optional[np.ndarray] = None,
                     sigma: float = 2.0) -> StructureTensorSummary:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    f = np.asarray(gray, dtype=np.float64)
    if mask is None:
        mask = np.ones(f.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != f.shape:
        raise ValueError(f"mask shape {mask.shape} differs from image {f.shape}")
    if not mask.any():
        raise DegenerateInputError("coherency undefined on an empty mask")
    fy, fx = np.gradient(f)
    jxx = gaussian_filter(fx * fx, sigma, mode="reflect")
    jxy = gaussian_filter(fx * fy, sigma, mode="reflect")
    jyy = gaussian_filter(fy * fy, sigma, mode="reflect")
    return StructureTensorSummary(float(jxx[mask].mean()), float(jxy[mask].mean()), float(jyy[mask].mean()))


def coherency(gray: np.ndarray, mask: Optional[np.ndarray] = None, sigma: float = 2.0) -> float:
    """Orientation coherency in [0, 1]; 0 for a constant image."""
    return structure_tensor(gray, mask, sigma).coherency()


def image_coherency(rgb: np.ndarray, sigma: float = 2.0, **thresholds) -> Tuple[float, float]:
    """(coherency of the luminance inside the collagen mask, masked fraction)."""
    m = collagen_mask(rgb, **thresholds)
    return coherency(luminance(rgb), m.mask, sigma), m.fraction


# --------------------------------------------------------------------------
# Student t via the regularized incomplete beta function


def _beta_continued_fraction(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-16) -> float:
    # modified Lentz evaluation
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
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
    raise ArithmeticError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x={x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_continued_fraction(a, b, x) / a
    return 1.0 - math.exp(log_front) * _beta_continued_fraction(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0:
        return 1.0
    p = regularized_incomplete_beta(df / (df + t * t), 0.5 * df, 0.5)
    # keep p strictly positive when it underflows
    return min(1.0, max(p, np.finfo(float).tiny))


def welch_statistic(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Welch's t and Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DegenerateInputError(f"each group needs at least 2 values (got {a.size} and {b.size})")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    if va == 0 and vb == 0:
        raise DegenerateInputError("both groups have zero variance")
    se2 = va + vb
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2 * se2 / (va * va / (a.size - 1) + vb * vb / (b.size - 1))
    return float(t), float(df)


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided p-value of Welch's unequal-variance t-test."""
    t, df = welch_statistic(a, b)
    return t_two_sided_p(t, df)


# --------------------------------------------------------------------------
# group summaries


@dataclass
class GroupStats:
    n: int
    mean: float
    median: float
    q1: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    minimum: float
    maximum: float


def group_stats(values: Sequence[float]) -> GroupStats:
    """Box-plot summary; quartiles interpolate linearly between order statistics."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise DegenerateInputError("group_stats needs at least one value")
    q1, median, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    return GroupStats(
        n=int(x.size), mean=float(x.mean()), median=float(median), q1=float(q1), q3=float(q3),
        whisker_lo=float(max(q1 - 1.5 * iqr, x.min())), whisker_hi=float(min(q3 + 1.5 * iqr, x.max())),
        minimum=float(x.min()), maximum=float(x.max()),
    )


@dataclass
class PValueMatrix:
    names: List[str]
    values: np.ndarray

    def __getitem__(self, pair: Tuple[str, str]) -> float:
        i, j = (self.names.index(n) for n in pair)
        return float(self.values[i, j])

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([""] + self.names)
            for i, name in enumerate(self.names):
                w.writerow([name] + ["-" if i == j else f"{self.values[i, j]:.6g}"
                                     for j in range(len(self.names))])
        return path


def pvalue_matrix(groups: Mapping[str, Sequence[float]]) -> PValueMatrix:
    names = list(groups)
    if len(names) < 2:
        raise DegenerateInputError("need at least two groups")
    k = len(names)
    values = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(i + 1, k):
            try:
                p = welch_t_test(groups[names[i]], groups[names[j]])
            except DegenerateInputError as exc:
                raise DegenerateInputError(f"{names[i]} vs {names[j]}: {exc}") from exc
            values[i, j] = values[j, i] = p
    return PValueMatrix(names, values)


def write_group_stats(stats: Mapping[str, GroupStats], path) -> Path:
    """CSV with one row per group: n, mean and median coherency plus box-plot fields."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "n", "mean_coherency", "median_coherency", "q1", "q3",
                    "whisker_lo", "whisker_hi", "min", "max"])
        for name, s in stats.items():
            w.writerow([name, s.n] + [f"{v:.6g}" for v in (s.mean, s.median, s.q1, s.q3,
                                                            s.whisker_lo, s.whisker_hi, s.minimum, s.maximum)])
    return path


def write_boxplot_json(stats: Mapping[str, GroupStats], groups: Mapping[str, Sequence[float]], path) -> Path:
    path = Path(path)
    payload = {}
    for name, s in stats.items():
        vals = np.asarray(groups[name], dtype=float)
        outliers = vals[(vals < s.whisker_lo) | (vals > s.whisker_hi)]
        payload[name] = {**asdict(s), "outliers": outliers.tolist()}
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path
