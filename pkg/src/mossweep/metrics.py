"""Evaluation metrics: MSE, Pearson LCC, Spearman SRCC with average-rank ties.

All accumulation happens in float64 with a fixed left-to-right order so
results are deterministic regardless of the precision of the inputs.
Correlations that are undefined (zero variance on either side) are returned
as ``None`` rather than silently coerced to 0; callers decide what to do.
"""

from __future__ import annotations

import numpy as np

__all__ = ["mse", "pearson_lcc", "average_ranks", "spearman_srcc"]


def _as_vector(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def _paired(predictions, targets) -> tuple[np.ndarray, np.ndarray]:
    p = _as_vector(predictions, "predictions")
    y = _as_vector(targets, "targets")
    if p.size != y.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} targets")
    return p, y


def mse(predictions, targets) -> float:
    """Mean squared error, (1/N) * sum((p_i - y_i)^2)."""
    p, y = _paired(predictions, targets)
    d = p - y
    return float(np.dot(d, d) / d.size)


def pearson_lcc(predictions, targets) -> float | None:
    """Pearson linear correlation coefficient.

    Returns None when either input has zero variance (correlation undefined).
    Requires N >= 2.
    """
    p, y = _paired(predictions, targets)
    if p.size < 2:
        raise ValueError("correlation requires at least 2 points")
    pc = p - p.mean()
    yc = y - y.mean()
    var_p = float(np.dot(pc, pc))
    var_y = float(np.dot(yc, yc))
    if var_p == 0.0 or var_y == 0.0:
        return None
    return float(np.dot(pc, yc) / np.sqrt(var_p * var_y))


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values get the mean of the positions they occupy."""
    a = _as_vector(values, "values")
    n = a.size
    order = np.argsort(a, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_srcc(predictions, targets) -> float | None:
    """Spearman rank correlation: Pearson over average ranks.

    The rank-then-Pearson form is exact under ties, unlike the
    1 - 6*sum(d^2)/(N(N^2-1)) shortcut. Returns None when either rank
    vector is constant.
    """
    p, y = _paired(predictions, targets)
    if p.size < 2:
        raise ValueError("correlation requires at least 2 points")
    return pearson_lcc(average_ranks(p), average_ranks(y))
