import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from artifact import collision as col

OP = col.grid_operator(8.0, 16)
G = OP.grid
v3 = st.tuples(*[st.floats(-4, 4)] * 3).map(np.array)


def test_maxwellian_normalised():
    g = col.VelocityGrid(8.0, 24)
    assert g.integrate(col.maxwellian(g.v)) == pytest.approx(1.0, rel=1e-10)
    assert np.allclose(col.sqrt_mu(g.v) ** 2, col.maxwellian(g.v))


def test_nu_at_zero_and_monte_carlo():
    assert col.nu_eval([0.0, 0.0, 0.0]) == pytest.approx(4 * np.sqrt(2 * np.pi), rel=1e-12)
    for v in ([1.0, 0, 0], [0, 2.0, 1.0]):
        m, se = col.nu_monte_carlo(v, samples=200000)
        assert abs(col.nu_eval(v) - m) < 5 * se


@given(st.floats(0, 20), st.floats(0, 20))
def test_nu_monotone(a, b):
    lo, hi = sorted((a, b))
    assert col.nu_radial(np.array([lo]))[0] <= col.nu_radial(np.array([hi]))[0] + 1e-12


def test_project_P_examples():
    f = G.sample(lambda v: (2 + 3 * v[:, 1] + 0.5 * (np.sum(v * v, 1) - 3) / 2) * col.sqrt_mu(v))
    Pf, (a, b, c) = col.project_P(f)
    assert np.allclose(Pf.values, f.values, atol=1e-12)
    assert (a, c) == (pytest.approx(2), pytest.approx(0.5))
    assert np.allclose(b, [0, 3, 0])
    h = G.sample(lambda v: v[:, 0] * v[:, 1] * col.sqrt_mu(v))
    assert np.abs(col.project_P(h)[0].values).max() < 1e-12


def test_null_space_residual_converges():
    res = []
    for op in (OP, col.grid_operator(8.0, 24)):
        B = np.stack([f(op.grid.v) for f in col.null_functions()], 1)
        res.append((np.linalg.norm(op.apply(B), axis=0) / np.linalg.norm(op.nu[:, None] * B, axis=0)).max())
    assert res[0] < 2e-2 and res[1] < res[0] / 3


def test_L_symmetric_and_coercive():
    X = col.random_microscopic(G, 6, seed=1)
    M = X.T @ OP.apply(X)
    assert np.abs(M - M.T).max() < 1e-10 * np.abs(M).max()
    assert col.coercivity(OP, 20, seed=2).c0 > 0


def test_solve_Linv_round_trip():
    X = col.random_microscopic(G, 3, seed=3)
    Y, hist = col.solve_Linv(X, OP, return_history=True)
    assert hist[-1] < 1e-10
    assert np.abs(col._project_cols(G, OP.apply(Y)) - X).max() < 1e-8 * np.abs(X).max()
    assert np.abs(Y - col._project_cols(G, Y)).max() < 1e-12


def test_solve_Linv_null_input_warns():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        out = col.solve_Linv(G.sample(col.sqrt_mu))
    assert np.all(out.values == 0) and any(issubclass(x.category, RuntimeWarning) for x in w)


@given(v3)
def test_gamma_vanishes_on_maxwellian(v):
    val = col.gamma_pointwise(col.sqrt_mu, col.sqrt_mu, v, col.GammaRule(n_rho=16, n_dir=(8, 16), n_sigma=(6, 12)))
    assert abs(val[0]) < 1e-10


def test_gamma_conserves_invariants():
    f = lambda v: (1 + v[..., 0] ** 2) * col.sqrt_mu(v)
    g = lambda v: (v[..., 1] + v[..., 0] * v[..., 2]) * col.sqrt_mu(v)
    x, w = col.gh_mu(6)
    vals = col.gamma_pointwise(f, g, x, col.GammaRule(n_rho=16, n_dir=(8, 16), n_sigma=(6, 12)))
    vals = vals / col.sqrt_mu(x)
    for phi in col.null_functions():
        p = phi(x) / col.sqrt_mu(x)
        assert abs(np.sum(w * vals * p)) < 0.05 * np.sum(w * np.abs(vals * p)) + 1e-12


def test_distfn_validation():
    with pytest.raises(ValueError):
        col.DistFn(G, np.zeros(3))
    with pytest.raises(ValueError):
        col.DistFn(G, np.zeros(G.size), weight="bogus")
