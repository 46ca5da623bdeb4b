"""Two-sample KS test, Pearson/Spearman correlations, allocation scores."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import InvalidInputError, UndefinedCorrelationError

SPEARMAN_EXACT_MAX_N = 10
_PERM_CHUNK = 200_000


@dataclass(frozen=True)
class CorrelationResult:
    coefficient: float
    p_value: float
    n: int
    method: str


def ks_two_sample(a, b) -> tuple[float, float]:
    """Kolmogorov-Smirnov statistic sup|F_a - F_b| and its asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise InvalidInputError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / a.size
    fb = np.searchsorted(b, pooled, side="right") / b.size
    stat = float(np.abs(fa - fb).max())
    en = np.sqrt(a.size * b.size / (a.size + b.size))
    p = float(np.clip(special.kolmogorov(en * stat), 0.0, 1.0))
    return stat, p


def _validate_pair(x, y, min_n: int = 3) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise InvalidInputError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_n:
        raise InvalidInputError(f"need at least {min_n} observations, got {x.size}")
    return x, y


def _pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt((dx * dx).sum())
    sy = np.sqrt((dy * dy).sum())
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


def _t_p_value(r: float, n: int) -> float:
    df = n - 2
    if abs(r) >= 1.0:
        return 0.0
    t = abs(r) * np.sqrt(df / (1.0 - r * r))
    return float(2.0 * special.stdtr(df, -t))


def pearson(x, y) -> CorrelationResult:
    """Product-moment correlation; p-value from the t distribution (n-2 df)."""
    x, y = _validate_pair(x, y)
    r = _pearson_r(x, y)
    return CorrelationResult(coefficient=r, p_value=_t_p_value(r, x.size), n=x.size, method="pearson")


def rankdata_average(x) -> np.ndarray:
    """Ranks starting at 1; ties share the average of their positions."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        ranks[order[i : j + 1]] = avg
        i = j + 1
    return ranks


def _spearman_exact_p(rx: np.ndarray, ry: np.ndarray, observed: float) -> float:
    """Two-sided permutation p-value: share of y-rank orderings with |rho| at
    least as large as observed."""
    n = rx.size
    dx = rx - rx.mean()
    sy = ry - ry.mean()
    denom = np.sqrt((dx * dx).sum() * (sy * sy).sum())
    threshold = abs(observed) - 1e-12
    total = 0
    hits = 0
    perms = itertools.permutations(ry)
    while True:
        chunk = list(itertools.islice(perms, _PERM_CHUNK))
        if not chunk:
            break
        arr = np.asarray(chunk, dtype=np.float64)
        rho = (arr - ry.mean()) @ dx / denom
        hits += int((np.abs(rho) >= threshold).sum())
        total += arr.shape[0]
    return hits / total


def spearman(x, y) -> CorrelationResult:
    """Rank correlation with average-rank ties.

    The p-value is exact (permutation) for n <= 10 and a t approximation
    otherwise.
    """
    x, y = _validate_pair(x, y)
    rx = rankdata_average(x)
    ry = rankdata_average(y)
    rho = _pearson_r(rx, ry)
    if x.size <= SPEARMAN_EXACT_MAX_N:
        p = _spearman_exact_p(rx, ry, rho)
    else:
        p = _t_p_value(rho, x.size)
    return CorrelationResult(coefficient=rho, p_value=p, n=x.size, method="spearman")


def allocation_scores(matrices) -> np.ndarray:
    """Per-host attention scores: mean over the batch of each host's total
    allocated probability mass (sum over bundles)."""
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    if not mats:
        raise InvalidInputError("empty batch of allocation matrices")
    shape = mats[0].shape
    for m in mats:
        if m.shape != shape:
            raise InvalidInputError("allocation matrices must share one shape")
    return np.mean([m.sum(axis=1) for m in mats], axis=0)
