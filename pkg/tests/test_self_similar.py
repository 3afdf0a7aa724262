import numpy as np
import pytest
from hypothesis import given, strategies as st

from artifact.biot_savart import oseen_velocity
from artifact.harness import random_polar_fields
from artifact.self_similar import (PolarField, PolarGrid, build_corrector, cutoff, lambda_inverse, op_L_apply,
                                   op_Lambda_apply, potential_V, solve_omega_profile, velocity,
                                   weighted_dirichlet, weighted_inner)

GRID = PolarGrid()


def _gauss(X, Y):
    return np.exp(-(X**2 + Y**2) / 4) / (4 * np.pi)


@given(st.floats(0, 20))
def test_potential_bounds(r):
    v = potential_V(r)
    assert 0 < v <= 1
    assert potential_V(0.0) == 1.0


def test_even_grid_rejected():
    with pytest.raises(ValueError):
        PolarGrid(N=64)


@given(st.integers(0, 1000))
def test_operator_identities(seed):
    w = random_polar_fields(GRID, 1, seed)[0]
    nw = weighted_inner(w, w)
    assert abs(weighted_inner(op_Lambda_apply(w), w)) <= 1e-10 * nw
    assert abs(weighted_inner(op_L_apply(w), w) - (nw - weighted_dirichlet(w))) <= 1e-8 * nw


def test_gaussian_in_kernels():
    G = PolarField.from_function(GRID, _gauss)
    assert np.abs(op_L_apply(G).coeffs).max() < 1e-12
    assert np.abs(op_Lambda_apply(G).coeffs).max() < 1e-12
    pts = np.array([[0.5, 0.1], [2.0, -1.0], [-3.0, 4.0], [20.0, 1.0]])
    assert np.allclose(velocity(G).evaluate(pts), oseen_velocity(pts), atol=1e-10)


@pytest.mark.parametrize("n", [2, 3])
def test_profile_residual_and_exponent(n):
    prof = solve_omega_profile(n)
    assert prof.residual < 1e-8
    assert prof.local_exponent == pytest.approx(n, abs=1e-2)


def test_lambda_inverse_round_trip():
    f = PolarField.from_modes(GRID, {2: GRID.r**2 * np.exp(-GRID.r**2 / 4), 3: 0.5j * GRID.r**3 * np.exp(-GRID.r**2 / 4)})
    back = op_Lambda_apply(lambda_inverse(f))
    assert np.abs(back.coeffs - f.coeffs).max() < 1e-8 * np.abs(f.coeffs).max()
    with pytest.raises(ValueError):
        lambda_inverse(PolarField.from_function(GRID, _gauss))


def test_corrector_small_kappa_limit():
    w0 = build_corrector(0.0, {2: 1.0}, grid=GRID)
    w1 = build_corrector(1e-4, {2: 1.0}, grid=GRID)
    rel = np.abs(w1.coeffs - w0.coeffs).max() / np.abs(w0.coeffs).max()
    assert 0 < rel < 1e-2


@given(st.floats(1e-6, 0.1), st.floats(0, 1))
def test_cutoff_profile(k, s):
    a = np.sqrt(k)
    assert cutoff(0.5 * a, k) == 0.0
    assert cutoff(2.5 * a, k) == 1.0
    assert 0.0 <= cutoff(a * (1 + s), k) <= 1.0
