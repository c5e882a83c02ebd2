"""Robust summaries and the paired Wilcoxon signed-rank test."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm, rankdata


@dataclass
class StatSummary:
    median: float
    mad: float
    n: int
    statistic: float | None = None
    p_value: float | None = None
    z: float | None = None
    flag: str | None = None


def median_mad(samples) -> StatSummary:
    """Median and median absolute deviation (unscaled)."""
    x = np.asarray(samples, dtype=float).ravel()
    x = x[np.isfinite(x)]
    if x.size == 0:
        return StatSummary(float("nan"), float("nan"), 0, flag="empty")
    med = float(np.median(x))
    return StatSummary(med, float(np.median(np.abs(x - med))), int(x.size))


def wilcoxon(paired_a, paired_b, min_n: int = 6) -> StatSummary:
    """Two-sided signed-rank test of ``a - b`` by normal approximation.

    Zero differences are ranked and then dropped from the rank sum (Pratt);
    the null mean and variance are adjusted for them and for ties.  The
    summary's median/MAD describe the differences; ``statistic`` is
    ``min(R+, R-)`` and ``z`` is signed so that ``z > 0`` means ``a > b``.
    """
    a = np.asarray(paired_a, dtype=float).ravel()
    b = np.asarray(paired_b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    if a.size < min_n:
        raise ValueError(f"need at least {min_n} pairs, got {a.size}")
    d = a - b
    if not np.isfinite(d).all():
        raise ValueError("non-finite differences")
    summary = median_mad(d)
    zeros = d == 0
    n, n0 = d.size, int(zeros.sum())
    if n0 == n:
        summary.statistic, summary.p_value, summary.z, summary.flag = 0.0, 1.0, 0.0, "all differences zero"
        return summary
    ranks = rankdata(np.abs(d))
    r_plus = float(ranks[d > 0].sum())
    r_minus = float(ranks[d < 0].sum())
    mean = (n * (n + 1) - n0 * (n0 + 1)) / 4.0
    var = (n * (n + 1) * (2 * n + 1) - n0 * (n0 + 1) * (2 * n0 + 1)) / 24.0
    _, counts = np.unique(np.abs(d[~zeros]), return_counts=True)
    var -= float((counts ** 3 - counts).sum()) / 48.0
    z = (r_plus - mean) / math.sqrt(var)
    summary.statistic = min(r_plus, r_minus)
    summary.z = float(z)
    summary.p_value = float(min(1.0, 2.0 * norm.sf(abs(z))))
    return summary


STATS_CSV_HEADER = ["metric", "k_fb", "sigma", "median", "mad", "n", "p_value"]


@dataclass
class StatRow:
    metric: str
    k_fb: float | str
    sigma: float | str
    summary: StatSummary


def write_stats_csv(path, rows: Iterable[StatRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_CSV_HEADER)
        for r in rows:
            s = r.summary
            p = "" if s.p_value is None else f"{s.p_value:.6g}"
            w.writerow([r.metric, r.k_fb, r.sigma, f"{s.median:.6g}", f"{s.mad:.6g}", s.n, p])


def read_stats_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sign_test_passes(summary: StatSummary, expect_positive: bool, alpha: float = 0.05) -> bool:
    """Correct direction of the paired effect with ``p < alpha``."""
    if summary.p_value is None or summary.z is None:
        return False
    direction = summary.z > 0 if expect_positive else summary.z < 0
    return bool(direction and summary.p_value < alpha)


def summarize(values: Sequence[float]) -> str:
    s = median_mad(values)
    return f"{s.median:.4g} ± {s.mad:.4g} (n={s.n})"
