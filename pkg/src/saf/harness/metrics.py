"""Forecast error metrics, rank correlation and percent deltas."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata


def metric(kind: str, forecasts, targets) -> float:
    """Mean squared or absolute error pooled over every (anchor, step) pair."""
    f = np.asarray(forecasts, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if f.shape != t.shape:
        raise ValueError(f"forecast shape {f.shape} != target shape {t.shape}")
    if f.size == 0:
        raise ValueError("no forecasts to score")
    d = f - t
    if kind == "mse":
        return float(np.mean(d * d))
    if kind == "mae":
        return float(np.mean(np.abs(d)))
    raise ValueError(f"unknown metric {kind!r}")


def spearman(xs, ys) -> float:
    """Spearman's rho: Pearson correlation of average ranks (ties share ranks).

    Doubled average ranks are integers, so all sums are exact integer
    arithmetic; without ties the two rank variances coincide and the result is
    a single correctly rounded division.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D sequences of equal length")
    n = x.size
    if n < 2:
        raise ValueError("need at least two observations")
    rx = [int(v) for v in np.rint(2 * rankdata(x))]
    ry = [int(v) for v in np.rint(2 * rankdata(y))]
    sx, sy = sum(rx), sum(ry)
    cov = n * sum(a * b for a, b in zip(rx, ry)) - sx * sy
    vx = n * sum(a * a for a in rx) - sx * sx
    vy = n * sum(b * b for b in ry) - sy * sy
    if vx == 0 or vy == 0:
        return float("nan")
    if vx == vy:
        return cov / vx
    return max(-1.0, min(1.0, cov / math.sqrt(vx * vy)))


def percent_change(new: float, reference: float) -> float:
    """(new - reference) / reference * 100."""
    return (new - reference) / reference * 100.0
