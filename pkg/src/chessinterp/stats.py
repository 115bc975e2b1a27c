"""Error bars: SEM, binomial order-statistic percentile bands, error propagation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import binom

PERCENTILE_GRID = np.arange(1, 200) / 200.0  # 199 points in (0, 1)


def mean_sem(samples) -> tuple[float, float]:
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise ValueError("mean_sem needs at least 2 samples")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def format_bar(mean: float, sem: float, digits: int = 2) -> str:
    """'m ± 2·sem' rounded to `digits` decimals."""
    return f"{mean:.{digits}f} ± {2 * sem:.{digits}f}"


def binomial_quantile(n: int, p: float, q: float) -> int:
    """Smallest k with P(B(n, p) <= k) >= q."""
    return int(binom.ppf(q, n, p))


def percentile_ci(samples, p: float, level: float = 0.95, min_n: int = 20) -> tuple[float, float]:
    """Order-statistic confidence band for the p-th percentile.

    The number of samples below the true percentile is B(n, p); its
    (1-level)/2 and 1-(1-level)/2 quantiles give the ranks (1-based, clamped
    to [1, n]) whose sorted values bound the percentile.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    if n < min_n:
        raise ValueError(f"percentile_ci needs at least {min_n} samples, got {n}")
    alpha = (1.0 - level) / 2
    k_lo = min(max(binomial_quantile(n, p, alpha), 1), n)
    k_hi = min(max(binomial_quantile(n, p, 1 - alpha), 1), n)
    return float(x[k_lo - 1]), float(x[k_hi - 1])


def empirical_percentile(samples, p: float) -> float:
    """Sorted value at rank ceil(p n) (1-based, clamped)."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    k = min(max(math.ceil(p * x.size), 1), x.size)
    return float(x[k - 1])


@dataclass
class PercentileCurve:
    p: np.ndarray
    value: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n: int

    @classmethod
    def from_samples(cls, samples, grid=PERCENTILE_GRID, level: float = 0.95) -> "PercentileCurve":
        grid = np.asarray(grid, dtype=np.float64)
        val = np.array([empirical_percentile(samples, p) for p in grid])
        bands = np.array([percentile_ci(samples, p, level) for p in grid])
        return cls(grid, val, bands[:, 0], bands[:, 1], len(samples))

    def rows(self):
        for i in range(self.p.size):
            yield self.p[i], self.value[i], self.lo[i], self.hi[i]

    def write_csv(self, path, label: str = "") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["series", "p", "value", "lo", "hi", "n"])
            for p, v, lo, hi in self.rows():
                w.writerow([label, f"{p:.3f}", f"{v:.6f}", f"{lo:.6f}", f"{hi:.6f}", self.n])


def propagate(sigmas) -> float:
    s = [float(v) for v in sigmas]
    if any(v < 0 for v in s):
        raise ValueError("standard errors must be non-negative")
    return math.sqrt(math.fsum(v * v for v in sorted(s)))


def accuracy_sigma(acc: float, n: int) -> float:
    """Bernoulli standard error of an accuracy measured on n items."""
    return math.sqrt(acc * (1.0 - acc) / n)
