"""Paired significance machinery: exact Wilcoxon signed-rank and BH-FDR.

The Wilcoxon p-value is exact for n <= EXACT_LIMIT via the signed-rank
generating function (equivalent to enumerating all 2^n sign assignments);
larger samples use the normal approximation with a continuity correction.
Zero differences are dropped (standard convention); ties among |d| take
average ranks, kept exact by working in doubled integer ranks.
"""
from __future__ import annotations

import math

import numpy as np

EXACT_LIMIT = 25


def _rank_twice(absdiff: np.ndarray) -> np.ndarray:
    """Average ranks scaled by 2 so ties stay integral."""
    order = np.argsort(absdiff, kind="stable")
    ranks = np.empty(len(absdiff), dtype=np.int64)
    i = 0
    sorted_vals = absdiff[order]
    while i < len(absdiff):
        j = i
        while j + 1 < len(absdiff) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        # average of ranks i+1..j+1, doubled: (i+1 + j+1)
        ranks[order[i:j + 1]] = (i + 1) + (j + 1)
        i = j + 1
    return ranks


def _exact_two_sided(ranks2: np.ndarray, w2_plus: int) -> float:
    """P(W <= min tail) + P(W >= max tail) over all sign assignments.

    Computes the distribution of the doubled positive-rank sum with a
    generating-function DP: poly[s] = number of assignments with sum s.
    """
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    n_assign = counts.sum()
    lo_tail = counts[: w2_plus + 1].sum() / n_assign
    hi_tail = counts[w2_plus:].sum() / n_assign
    return float(min(1.0, 2.0 * min(lo_tail, hi_tail)))


def wilcoxon_paired(a, b) -> float:
    """Two-sided paired Wilcoxon signed-rank p-value for a vs b.

    All differences zero gives p = 1 (no signal).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("need two equal-length 1-D samples")
    d = a - b
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return 1.0
    ranks2 = _rank_twice(np.abs(d))
    w2_plus = int(ranks2[d > 0].sum())
    if n <= EXACT_LIMIT:
        return _exact_two_sided(ranks2, w2_plus)
    # normal approximation with continuity correction on the doubled scale
    mean2 = ranks2.sum() / 2.0
    # var(W2+) = sum(ranks2^2) / 4, so sd on the doubled scale:
    sd2 = math.sqrt(float((ranks2.astype(np.float64) ** 2).sum())) / 2.0
    z = (abs(w2_plus - mean2) - 1.0) / sd2                 # cc: 0.5 raw = 1 doubled
    z = max(z, 0.0)
    p = math.erfc(z / math.sqrt(2.0))
    return float(min(1.0, p))


def wilcoxon_brute_force(a, b) -> float:
    """Literal 2^n enumeration; test oracle for small n."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = (a - b)
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return 1.0
    if n > 20:
        raise ValueError("brute force limited to n <= 20")
    ranks2 = _rank_twice(np.abs(d))
    w_obs = int(ranks2[d > 0].sum())
    sums = []
    for mask in range(1 << n):
        s = 0
        for i in range(n):
            if mask >> i & 1:
                s += int(ranks2[i])
        sums.append(s)
    sums = np.array(sums)
    lo = (sums <= w_obs).mean()
    hi = (sums >= w_obs).mean()
    return float(min(1.0, 2.0 * min(lo, hi)))


def bh_correct(p_values, m: int | None = None) -> np.ndarray:
    """Benjamini-Hochberg q-values: q_(i) = min_{j >= i} (m / j) * p_(j).

    m defaults to the number of p-values; q is clipped into [p, 1] and the
    procedure is idempotent.
    """
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0:
        raise ValueError("need a non-empty 1-D p-value array")
    if ((p < 0) | (p > 1)).any():
        raise ValueError("p-values must lie in [0, 1]")
    if m is None:
        m = len(p)
    if m < len(p):
        raise ValueError("m must be >= the number of p-values")
    order = np.argsort(p, kind="stable")
    # scale as p * (m/j): the ratio first, so ties like 0.039 * 9/6 land on
    # the representable side of the decimal midpoint
    scaled = p[order] * (m / np.arange(1, len(p) + 1))
    q_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    q_sorted = np.clip(q_sorted, None, 1.0)
    q = np.empty_like(q_sorted)
    q[order] = q_sorted
    return np.maximum(q, p)
