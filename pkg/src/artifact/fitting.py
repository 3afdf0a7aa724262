"""Least-squares slope fits for convergence studies."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

MIN_POINTS = 4


class FitDataError(ValueError):
    pass


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    stderr: float
    npoints: int

    def __iter__(self):
        # unpacks as (slope, intercept, r2)
        return iter((self.slope, self.intercept, self.r2))

    def ci95(self):
        if self.npoints <= 2:
            return (np.nan, np.nan)
        q = stats.t.ppf(0.975, self.npoints - 2) * self.stderr
        return (self.slope - q, self.slope + q)


def fit_slope(xs, ys, mode: str = "log-log") -> SlopeFit:
    """OLS in transformed coordinates.

    log-log: log y against log x. semilog-x: log y against x (x left linear,
    so exponential laws y = c exp(-a x) come out with slope -a).
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise FitDataError("xs and ys must be 1-D of equal length")
    if len(x) < MIN_POINTS:
        raise FitDataError(f"insufficient points: {len(x)} < {MIN_POINTS}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise FitDataError("non-finite data")
    if mode == "log-log":
        if np.any(x <= 0) or np.any(y <= 0):
            raise FitDataError("log-log fit needs positive data")
        X, Y = np.log(x), np.log(y)
    elif mode == "semilog-x":
        if np.any(y <= 0):
            raise FitDataError("semilog fit needs positive y")
        X, Y = x, np.log(y)
    else:
        raise FitDataError(f"unknown mode {mode}")
    res = stats.linregress(X, Y)
    return SlopeFit(float(res.slope), float(res.intercept), float(res.rvalue**2),
                    float(res.stderr), len(x))
