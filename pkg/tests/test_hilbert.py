import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from artifact import hilbert as hb


@given(st.floats(4.01, 100), st.floats(0, 3))
def test_delta_rule(p, beta):
    ok = 0.5 + 2 / p < beta < 2
    if ok:
        hb.check_delta_rule(beta, p)
    else:
        with pytest.raises(hb.ConfigError):
            hb.check_delta_rule(beta, p)


def test_delta_rule_needs_p_above_four():
    with pytest.raises(hb.ConfigError):
        hb.check_delta_rule(1.2, 4.0)


def test_spectral_rejects_bad_n():
    with pytest.raises(hb.ConfigError):
        hb.Spectral(12)


def test_steps_must_divide_horizon():
    with pytest.raises(hb.ConfigError):
        hb.solve_c2(None, lambda t: np.zeros((8, 8)), 8, 0.1, 1.0, T=0.25, dt=0.1)


@pytest.mark.parametrize("conv,a_t", [("stated", 2.0), ("consistent", 2.5)])
def test_c2_zero_and_constant_forcing(conv, a_t):
    n = 16
    z = hb.solve_c2(None, lambda t: np.zeros((n, n)), n, 0.1, 1.3, T=0.5, dt=0.05, convention=conv)
    assert np.all(z.values == 0)
    c = hb.solve_c2(None, lambda t: np.full((n, n), 3.0), n, 0.1, 1.3, T=0.5, dt=0.05, convention=conv)
    assert np.allclose(c.values[-1], 3.0 * 0.5 / a_t, atol=1e-12)


def test_c2_single_mode_decays_at_heat_rate():
    n, kappa, eta_c, T = 16, 0.1, 1.3, 0.5
    spec = hb.Spectral(n)
    X, Y = spec.coords()
    # steady single-mode source: c_k(t) = s (1 - e^{-lam t}) / (a_t lam)
    src = np.cos(X + 2 * Y)
    c = hb.solve_c2(None, lambda t: src, n, kappa, eta_c, T, 0.01, convention="stated")
    lam = kappa * eta_c * 5 / 2.0
    exact = src * (1 - np.exp(-lam * T)) / (2.0 * lam)
    assert np.abs(c.values[-1] - exact).max() < 1e-10


def test_b2_zero_forcing_and_divergence_free():
    n = 16
    z = hb.solve_b2(None, lambda t: np.zeros((2, n, n)), n, 0.1, 1.0, T=0.2, dt=0.05)
    assert np.all(z.values == 0)
    spec = hb.Spectral(n)
    X, Y = spec.coords()
    f = np.stack([np.sin(Y) + np.cos(X), np.cos(X + Y)])
    u = np.stack([np.sin(Y), np.zeros_like(Y)])
    b = hb.solve_b2(lambda t: u, lambda t: f, n, 0.1, 1.0, T=0.2, dt=0.01)
    for bt in b.values:
        assert np.abs(spec.div(bt)).max() < 1e-12
    assert np.all(np.isfinite(b.pressure))


def test_cfl_violation():
    n = 16
    u = np.full((2, n, n), 100.0)
    with pytest.raises(hb.StepError):
        hb.solve_c2(lambda t: u, lambda t: np.zeros((n, n)), n, 0.1, 1.0, T=0.1, dt=0.1)


def test_microscopic_vorticity_orientations():
    spec = hb.Spectral(32)
    X, Y = spec.coords()
    u = np.stack([-np.sin(Y) * np.cos(X), np.sin(X) * np.cos(Y)])
    curl = spec.grad(u[1])[0] - spec.grad(u[0])[1]
    w = hb.microscopic_vorticity(u, 1e-3, spec)
    assert np.allclose(w, curl, atol=1e-12)
    assert np.allclose(hb.microscopic_vorticity(u, 1e-3, spec, "reversed"), -curl, atol=1e-12)


def test_tables_json_round_trip(tmp_path):
    tab = hb.default_tables()
    p = tmp_path / "t.json"
    p.write_text(json.dumps(tab.to_json()))
    back = hb.KineticTables.from_json(json.loads(p.read_text()))
    assert back.grid_hash == tab.grid_hash
    assert np.array_equal(back.burnett.alpha_tilde, tab.burnett.alpha_tilde)
    d = tab.to_json()
    d["version"] = hb.TABLE_VERSION + 1
    with pytest.raises(hb.ConfigError):
        hb.KineticTables.from_json(d)
    d = tab.to_json()
    d["r"] = (np.array(d["r"]) * 1.01).tolist()
    with pytest.raises(hb.ConfigError):
        hb.KineticTables.from_json(d)


def test_f2_micro_check_small():
    tab = hb.default_tables()
    spec = hb.Spectral(16)
    X, Y = spec.coords()
    u = np.stack([-np.sin(Y) * np.cos(X), np.sin(X) * np.cos(Y)])
    chk = hb.f2_micro_check(u, 0.1, spec, tab, count=2)
    assert chk.relative < 1e-6
