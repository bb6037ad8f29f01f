"""Log-log fits and percentile profiles of attack distances."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    stderr: float
    r2: float


def _ols(x: np.ndarray, y: np.ndarray) -> LineFit:
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0:
        raise ValueError("x values must not all be equal")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - ym) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = len(x) - 2
    stderr = math.sqrt(ss_res / dof / sxx) if dof > 0 else math.nan
    return LineFit(slope, intercept, stderr, r2)


def fit_loglog(xs, ys) -> LineFit:
    """Least squares line through ``(ln x, ln y)``."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1-d arrays of equal length")
    if len(xs) < 3:
        raise ValueError(f"need at least 3 points, got {len(xs)}")
    if np.any(~(xs > 0)) or np.any(~(ys > 0)):
        raise ValueError("log-log fit needs strictly positive values")
    return _ols(np.log(xs), np.log(ys))


@dataclass(frozen=True)
class PercentileProfile:
    percentiles: np.ndarray
    distances: np.ndarray
    fit: LineFit
    fit_range: tuple


def percentile_profile(records, p=None, low: float = 0.0, high: float = 0.25,
                       min_records: int = 100) -> PercentileProfile:
    """Empirical quantile curve of attack distances plus a line fit over ``[low, high]``.

    ``records`` may be attack records (filtered to norm ``p`` when given,
    censored ones dropped) or plain distances.  Percentile ``i`` of ``N``
    sorted values is ``(i + 0.5) / N``.
    """
    dist = []
    for r in records:
        if hasattr(r, "distance"):
            if r.censored or (p is not None and float(r.p) != float(p)):
                continue
            dist.append(r.distance)
        else:
            dist.append(float(r))
    if len(dist) < min_records:
        raise ValueError(f"need at least {min_records} non-censored records, got {len(dist)}")
    d = np.sort(np.asarray(dist, dtype=float))
    q = (np.arange(len(d)) + 0.5) / len(d)
    mask = (q >= low) & (q <= high)
    if mask.sum() < 3:
        raise ValueError("fewer than 3 records inside the fit range")
    return PercentileProfile(q, d, _ols(q[mask], d[mask]), (low, high))
