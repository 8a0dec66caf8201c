"""Correlations, bootstrap intervals, permutation tests and the Wilcoxon signed-rank test."""
import itertools
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from exceptions import AllZeroDifferences, ConstantInput, ResampleExhausted, StatisticsError

logger = logging.getLogger(__name__)

EXACT_PERMUTATION_MAX_N = 8
EXACT_WILCOXON_MAX_N = 25
RESAMPLE_RETRIES = 10
MAX_SKIPPED_SHARE = 0.10
TIE_TOLERANCE = 1e-12


class CorrelationKind(Enum):
    PEARSON = "PEARSON"
    SPEARMAN = "SPEARMAN"


class PairedMethod(Enum):
    EXACT = "EXACT"
    NORMAL_APPROX = "NORMAL_APPROX"


@dataclass(frozen=True)
class CorrelationResult:
    """Percentile bootstrap bounds may exclude the estimate on tiny samples"""
    estimate: float
    kind: CorrelationKind
    n: int
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    p_value: Optional[float] = None
    skipped_resamples: int = 0


@dataclass(frozen=True)
class PairedTestResult:
    statistic: float
    p_value: float
    n_effective: int
    method: PairedMethod


def _pair(x: Sequence[float], y: Sequence[float]):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatisticsError(f"Inputs must be 1-D of equal length, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise StatisticsError(f"Need at least 3 pairs, got {len(x)}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ConstantInput("Correlation is undefined for a constant input vector")
    return x, y


def _pearson_rows(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise product-moment correlation of two 2-D arrays"""
    dx = x - x.mean(axis=-1, keepdims=True)
    dy = y - y.mean(axis=-1, keepdims=True)
    denominator = np.sqrt(np.sum(dx * dx, axis=-1) * np.sum(dy * dy, axis=-1))
    return np.clip(np.sum(dx * dy, axis=-1) / denominator, -1.0, 1.0)


def _statistic_rows(x: np.ndarray, y: np.ndarray, kind: CorrelationKind) -> np.ndarray:
    if kind is CorrelationKind.SPEARMAN:
        x, y = rankdata(x, axis=-1), rankdata(y, axis=-1)
    return _pearson_rows(np.atleast_2d(x), np.atleast_2d(y))


def _estimate(x, y, kind: CorrelationKind) -> float:
    return float(_statistic_rows(x, y, kind)[0])


def spearman(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    x, y = _pair(x, y)
    return CorrelationResult(_estimate(x, y, CorrelationKind.SPEARMAN), CorrelationKind.SPEARMAN, len(x))


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    x, y = _pair(x, y)
    return CorrelationResult(_estimate(x, y, CorrelationKind.PEARSON), CorrelationKind.PEARSON, len(x))


@dataclass(frozen=True)
class BootstrapInterval:
    low: float
    high: float
    skipped: int


def bootstrap_ci(x: Sequence[float], y: Sequence[float], statistic: CorrelationKind = CorrelationKind.PEARSON,
                 n_boot: int = 10000, level: float = 0.95, seed: int = 0) -> BootstrapInterval:
    """Percentile bootstrap over paired resamples.

    Resamples with a constant side are redrawn up to RESAMPLE_RETRIES times
    and skipped after that; more than 10% skipped raises ResampleExhausted.
    """
    x, y = _pair(x, y)
    if not 0.0 < level < 1.0:
        raise StatisticsError(f"level must lie in (0, 1), got {level}")
    n = len(x)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_boot, n))
    degenerate = (np.ptp(x[idx], axis=1) == 0) | (np.ptp(y[idx], axis=1) == 0)
    for _ in range(RESAMPLE_RETRIES):
        if not degenerate.any():
            break
        rows = np.flatnonzero(degenerate)
        idx[rows] = rng.integers(0, n, size=(len(rows), n))
        degenerate[rows] = (np.ptp(x[idx[rows]], axis=1) == 0) | (np.ptp(y[idx[rows]], axis=1) == 0)
    skipped = int(degenerate.sum())
    if skipped > MAX_SKIPPED_SHARE * n_boot:
        raise ResampleExhausted(f"{skipped} of {n_boot} bootstrap resamples stayed constant")
    if skipped:
        logger.warning(f"Skipped {skipped} constant bootstrap resamples")
    valid = idx[~degenerate]
    stats = np.sort(_statistic_rows(x[valid], y[valid], statistic))
    m = len(stats)
    tail = (1.0 - level) / 2.0
    low_rank = min(max(int(round(m * tail)), 1), m)
    high_rank = min(max(int(round(m * (1.0 - tail))), 1), m)
    return BootstrapInterval(float(stats[low_rank - 1]), float(stats[high_rank - 1]), skipped)


def permutation_p(x: Sequence[float], y: Sequence[float], statistic: CorrelationKind = CorrelationKind.SPEARMAN,
                  n_perm: int = 10000, seed: int = 0) -> float:
    """Two-tailed permutation p for |statistic|.

    Spearman with n <= 8 enumerates all n! orderings (p = count / n!);
    otherwise p = (1 + count) / (1 + n_perm) over seeded permutations.
    """
    x, y = _pair(x, y)
    n = len(x)
    observed = abs(_estimate(x, y, statistic))
    if statistic is CorrelationKind.SPEARMAN and n <= EXACT_PERMUTATION_MAX_N:
        orderings = np.array(list(itertools.permutations(range(n))))
        null = _statistic_rows(np.broadcast_to(x, orderings.shape), y[orderings], statistic)
        count = int(np.sum(np.abs(null) >= observed - TIE_TOLERANCE))
        return count / len(orderings)
    rng = np.random.default_rng(seed)
    orderings = np.argsort(rng.random((n_perm, n)), axis=1)
    null = _statistic_rows(np.broadcast_to(x, orderings.shape), y[orderings], statistic)
    count = int(np.sum(np.abs(null) >= observed - TIE_TOLERANCE))
    return (1 + count) / (1 + n_perm)


def correlation_report(x: Sequence[float], y: Sequence[float], kind: CorrelationKind = CorrelationKind.SPEARMAN,
                       n_boot: int = 10000, n_perm: int = 10000, level: float = 0.95,
                       seed: int = 0) -> CorrelationResult:
    estimate = _estimate(*_pair(x, y), kind)
    interval = bootstrap_ci(x, y, kind, n_boot=n_boot, level=level, seed=seed)
    p_value = permutation_p(x, y, kind, n_perm=n_perm, seed=seed)
    return CorrelationResult(estimate, kind, len(x), interval.low, interval.high, p_value, interval.skipped)


@dataclass(frozen=True)
class StratumResult:
    stratum: str
    n: int
    result: Optional[CorrelationResult]
    skipped_reason: Optional[str] = None


def stratified_correlation(records: Sequence[Mapping[str, float]], x_key: str, y_key: str, stratum_key: str,
                           threshold: float = 0.1, kind: CorrelationKind = CorrelationKind.SPEARMAN,
                           n_boot: int = 10000, n_perm: int = 10000, seed: int = 0) -> Dict[str, StratumResult]:
    """Correlation within records below ("severe") and at or above ("moderate") a stability threshold"""
    strata = {
        "all": list(records),
        "severe": [r for r in records if float(r[stratum_key]) < threshold],
        "moderate": [r for r in records if float(r[stratum_key]) >= threshold],
    }
    results = {}
    for name, members in strata.items():
        xs = [float(r[x_key]) for r in members]
        ys = [float(r[y_key]) for r in members]
        if len(members) < 3:
            results[name] = StratumResult(name, len(members), None, "fewer than 3 records")
            continue
        try:
            result = correlation_report(xs, ys, kind, n_boot=n_boot, n_perm=n_perm, seed=seed)
        except StatisticsError as e:
            logger.warning(f"Stratum {name}: {e}")
            results[name] = StratumResult(name, len(members), None, str(e))
            continue
        results[name] = StratumResult(name, len(members), result)
    return results


def _signed_rank_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments reaching each positive rank sum (in doubled units)"""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float],
                         method: Optional[PairedMethod] = None) -> PairedTestResult:
    """Two-tailed Wilcoxon signed-rank test on a - b.

    Zero differences are dropped and tied magnitudes share average ranks.
    W = min(W+, W-). Exact enumeration is used up to 25 nonzero pairs unless
    `method` forces a choice.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise StatisticsError(f"Paired inputs differ in shape: {a.shape} vs {b.shape}")
    diff = a - b
    diff = diff[diff != 0]
    n = len(diff)
    if n == 0:
        raise AllZeroDifferences("Every paired difference is zero")
    ranks = rankdata(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    total = float(ranks.sum())
    statistic = min(w_plus, total - w_plus)
    if method is None:
        method = PairedMethod.EXACT if n <= EXACT_WILCOXON_MAX_N else PairedMethod.NORMAL_APPROX

    if method is PairedMethod.EXACT:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _signed_rank_counts(doubled)
        sums = np.arange(len(counts))
        extreme = np.minimum(sums, int(doubled.sum()) - sums) <= int(round(2 * statistic))
        p_value = float(sum(counts[extreme]) / 2 ** n)
    else:
        mean = total / 2.0
        sd = math.sqrt(float(np.sum(ranks ** 2)) / 4.0)
        z = (statistic - mean + 0.5) / sd
        p_value = float(2.0 * norm.cdf(min(z, 0.0)))
    return PairedTestResult(statistic, min(1.0, p_value), n, method)
