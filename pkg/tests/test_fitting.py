import numpy as np
import pytest
from hypothesis import given, strategies as st

from artifact.fitting import FitDataError, fit_slope


def test_power_law_exact():
    xs = np.array([0.1, 0.2, 0.4, 0.8, 1.6])
    fit = fit_slope(xs, 3.0 * xs, "log-log")
    assert abs(fit.slope - 1.0) < 1e-12
    assert fit.r2 == pytest.approx(1.0)


def test_semilog_exponential_rate():
    xs = np.array([20.0, 28.0, 40.0, 56.0, 80.0])
    a = 0.25
    fit = fit_slope(xs, 2.0 * np.exp(-a * xs), "semilog-x")
    assert fit.slope == pytest.approx(-a, abs=1e-12)


@given(st.floats(-3, 3), st.integers(0, 10**6))
def test_noisy_power_law(p, seed):
    rng = np.random.default_rng(seed)
    xs = np.logspace(-3, 0, 8)
    ys = xs**p * (1 + 0.01 * rng.standard_normal(8))
    assert abs(fit_slope(xs, ys).slope - p) < 0.05


def test_unpacks_as_triple():
    s, i, r2 = fit_slope([1, 2, 3, 4], [2, 4, 6, 8])
    assert s == pytest.approx(1.0) and r2 == pytest.approx(1.0)


def test_insufficient_points():
    with pytest.raises(FitDataError, match="insufficient points"):
        fit_slope([1, 2, 3], [1, 2, 3])


def test_nonpositive_in_log_mode():
    with pytest.raises(FitDataError):
        fit_slope([1, 2, 3, 4], [1, -2, 3, 4])
    with pytest.raises(FitDataError):
        fit_slope([1, 2, 3, 4], [1, 2, 3, 4], "cubic")


def test_confidence_interval_contains_slope():
    fit = fit_slope([1, 2, 4, 8, 16], [1.0, 2.1, 3.9, 8.2, 15.8])
    lo, hi = fit.ci95()
    assert lo < fit.slope < hi
