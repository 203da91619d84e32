"""Rank-based group comparison: Kruskal-Wallis plus Dunn post-hoc tests.

Self-contained implementations (mid-rank ties, tie-corrected statistics,
chi-square / normal upper tails via closed forms) so score distributions can
be compared without a stats dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "StatsError",
    "rankdata",
    "tie_term",
    "chi2_sf",
    "normal_sf",
    "KruskalResult",
    "kruskal_wallis",
    "PairwiseComparison",
    "dunn_bonferroni",
]


class StatsError(ValueError):
    pass


def rankdata(values) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 1:
        raise StatsError("rankdata expects a 1-D sequence")
    n = a.shape[0]
    order = np.argsort(a, kind="stable")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def tie_term(values) -> float:
    """Sum of t^3 - t over tie groups of size t."""
    a = np.sort(np.asarray(values, dtype=np.float64))
    total = 0.0
    i = 0
    n = a.shape[0]
    while i < n:
        j = i
        while j + 1 < n and a[j + 1] == a[i]:
            j += 1
        t = j - i + 1
        total += t ** 3 - t
        i = j + 1
    return total


def chi2_sf(x: float, df: int) -> float:
    """Upper tail P(X >= x) for a chi-square with df degrees of freedom.

    Built from the two base cases erfc(sqrt(x/2)) and exp(-x/2) and the
    two-degree recurrence, which is exact for the df values used here.
    """
    if df < 1 or int(df) != df:
        raise StatsError(f"df must be a positive integer, got {df}")
    if x <= 0.0:
        return 1.0
    half = x / 2.0
    if df % 2 == 0:
        q = math.exp(-half)
        k = 2
    else:
        q = math.erfc(math.sqrt(half))
        k = 1
    while k + 2 <= df:
        q += math.exp((k / 2.0) * math.log(half) - half
                      - math.lgamma(k / 2.0 + 1.0))
        k += 2
    return min(q, 1.0)


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


@dataclass(frozen=True)
class KruskalResult:
    statistic: float
    df: int
    p_value: float
    group_sizes: tuple[int, ...]
    rank_sums: tuple[float, ...]
    tie_correction: float


def kruskal_wallis(groups) -> KruskalResult:
    """H test that the groups come from the same distribution."""
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(arrays) < 2:
        raise StatsError("need at least two groups")
    for g in arrays:
        if g.size == 0:
            raise StatsError("groups must be non-empty")
    pooled = np.concatenate(arrays)
    n = pooled.shape[0]
    ranks = rankdata(pooled)
    rank_sums = []
    start = 0
    for g in arrays:
        rank_sums.append(float(ranks[start:start + g.size].sum()))
        start += g.size
    s = sum(rs * rs / g.size for rs, g in zip(rank_sums, arrays))
    # Single division so that integer-valued cases round only once.
    h = (12.0 * s - 3.0 * n * (n + 1) ** 2) / (n * (n + 1))
    correction = 1.0 - tie_term(pooled) / (n ** 3 - n)
    if correction == 0.0:
        raise StatsError("all pooled values are identical")
    h /= correction
    df = len(arrays) - 1
    return KruskalResult(statistic=h, df=df, p_value=chi2_sf(h, df),
                         group_sizes=tuple(g.size for g in arrays),
                         rank_sums=tuple(rank_sums),
                         tie_correction=correction)


@dataclass(frozen=True)
class PairwiseComparison:
    i: int
    j: int
    z: float
    p_unadjusted: float
    p_adjusted: float


def dunn_bonferroni(groups) -> list[PairwiseComparison]:
    """All pairwise mean-rank comparisons, Bonferroni-adjusted (capped at 1)."""
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(arrays) < 2:
        raise StatsError("need at least two groups")
    for g in arrays:
        if g.size == 0:
            raise StatsError("groups must be non-empty")
    pooled = np.concatenate(arrays)
    n = pooled.shape[0]
    ranks = rankdata(pooled)
    means = []
    start = 0
    for g in arrays:
        means.append(float(ranks[start:start + g.size].mean()))
        start += g.size
    ties = tie_term(pooled)
    base_var = n * (n + 1) / 12.0 - ties / (12.0 * (n - 1))
    m = len(arrays) * (len(arrays) - 1) // 2
    out = []
    for i in range(len(arrays)):
        for j in range(i + 1, len(arrays)):
            se = math.sqrt(base_var * (1.0 / arrays[i].size
                                       + 1.0 / arrays[j].size))
            if se == 0.0:
                raise StatsError("zero variance; cannot compare groups")
            z = (means[i] - means[j]) / se
            p = 2.0 * normal_sf(abs(z))
            out.append(PairwiseComparison(
                i=i, j=j, z=z, p_unadjusted=p,
                p_adjusted=min(1.0, p * m)))
    return out
