import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from artifact.biot_savart import (GridConfigError, PeriodicField, SingularPointError, elliptic_bound_check,
                                  grid_coords, kb_eval, oseen_velocity, spectral_curl, spectral_divergence,
                                  torus_kernel, velocity_from_vorticity)

vec = st.tuples(st.floats(-5, 5), st.floats(-5, 5)).map(np.array)


def test_kb_values():
    assert np.allclose(kb_eval([1.0, 0.0]), [0, 1 / (2 * np.pi)])
    assert np.allclose(kb_eval([0.0, 1.0]), [-1 / (2 * np.pi), 0])
    with pytest.raises(SingularPointError):
        kb_eval([0.0, 0.0])


@given(vec)
def test_kb_antisymmetric_and_tangential(x):
    assume(np.hypot(*x) > 1e-6)
    assert np.allclose(kb_eval(-x), -kb_eval(x))
    assert abs(np.dot(kb_eval(x), x)) <= 1e-12 * np.hypot(*x)


def test_oseen_values():
    assert np.all(oseen_velocity([0.0, 0.0]) == 0)
    u = oseen_velocity([2.0, 0.0])
    assert u[0] == 0 and u[1] == pytest.approx((1 - np.exp(-1)) / (4 * np.pi), rel=1e-14)


@given(vec)
def test_oseen_far_field(x):
    r = np.hypot(*x)
    assume(r > 1.0)
    gap = np.linalg.norm(oseen_velocity(x) - kb_eval(x))
    assert gap <= np.exp(-r * r / 4) / (2 * np.pi * r) * (1 + 1e-10)


@given(vec, st.integers(-2, 2), st.integers(-2, 2))
def test_torus_kernel_periodic(x, i, j):
    L = 3.0
    assume(np.min(np.abs(x / L - np.round(x / L))) > 1e-3)
    a = torus_kernel(x, L)
    b = torus_kernel(x + L * np.array([i, j]), L)
    assert np.allclose(a, b, atol=1e-12)


def test_torus_kernel_near_origin_is_kb():
    x = np.array([1e-3, 2e-3])
    assert np.allclose(torus_kernel(x, 10.0), kb_eval(x), rtol=1e-5)
    with pytest.raises(SingularPointError):
        torus_kernel(np.array([4.0, 0.0]), 4.0)


def _gauss(n, L, centers, s2=0.05):
    X, Y = grid_coords(n, L)
    w = sum(np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2) / s2) / (np.pi * s2) for c in centers)
    return PeriodicField(L, w)


def test_single_gaussian_matches_torus_oseen():
    n, L, s2 = 256, 8.0, 0.05
    w = _gauss(n, L, [[0, 0]], s2)
    u = velocity_from_vorticity(w).values
    X, Y = grid_coords(n, L)
    r = np.hypot(X, Y)
    m = (r > 0.5) & (r < 2.0)
    pts = np.stack([X[m], Y[m]], -1)
    s = np.sqrt(s2 / 4)
    ref = oseen_velocity(pts / s) / s + torus_kernel(pts, L) - kb_eval(pts)
    err = np.hypot(u[0][m] - ref[:, 0], u[1][m] - ref[:, 1]).max()
    assert err <= 1e-4 * np.hypot(ref[:, 0], ref[:, 1]).max()


def test_zero_vorticity_zero_velocity():
    w = PeriodicField(2.0, np.zeros((16, 16)))
    assert np.all(velocity_from_vorticity(w).values == 0)
    rep = elliptic_bound_check(w)
    assert rep.ratio_L4 is None and rep.ratio_L1 is None


def test_velocity_divergence_free_and_curl_recovers_vorticity():
    n, L = 128, 6.0
    w = _gauss(n, L, [[-1, 0], [1.2, 0.5]], 0.1)
    u = velocity_from_vorticity(w)
    assert np.abs(spectral_divergence(u)).max() < 1e-10
    mean = w.values.mean()
    assert np.abs(spectral_curl(u) - (w.values - mean)).max() < 1e-8 * np.abs(w.values).max()


def test_elliptic_ratio_stable_under_refinement():
    ratios = [elliptic_bound_check(_gauss(n, 6.0, [[0, 0]], 0.2)).ratio_L1 for n in (64, 128, 256)]
    assert np.isfinite(ratios).all()
    assert abs(ratios[-1] - ratios[-2]) < 1e-3 * ratios[-1]


def test_weighted_ratio_for_mean_zero_dipole():
    vals = []
    for lam in (1.0, 1.5, 2.0):
        X, Y = grid_coords(256, 16.0)
        s2 = 0.3 * lam**2
        g = lambda cx: np.exp(-((X - cx) ** 2 + Y**2) / s2) / (np.pi * s2)
        rep = elliptic_bound_check(PeriodicField(16.0, g(-lam) - g(lam)))
        assert rep.mean_zero
        vals.append(rep.ratio_weighted)
    assert max(vals) / min(vals) < 10


def test_bad_grid_rejected():
    with pytest.raises(GridConfigError):
        PeriodicField(1.0, np.zeros((12, 12)))
    with pytest.raises(GridConfigError):
        PeriodicField(1.0, np.full((8, 8), np.nan))
