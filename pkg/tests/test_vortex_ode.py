import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from artifact.vortex_ode import (DegenerateConfigError, VortexConfig, ViscousParams, center_of_vorticity,
                                 corotation_period, drift_study, hamiltonian, hk_rhs, integrate_hk,
                                 integrate_viscous, min_separation, viscous_rhs)

TWO_PI = 2 * np.pi
coord = st.floats(-3, 3)
circ = st.floats(0.2, 3).flatmap(lambda a: st.sampled_from([a, -a]))


def configs(n):
    return st.tuples(st.lists(st.tuples(coord, coord), min_size=n, max_size=n),
                     st.lists(circ, min_size=n, max_size=n)).map(lambda t: VortexConfig(t[0], t[1]))


def test_single_vortex_is_still():
    assert np.all(hk_rhs(VortexConfig([[0.3, 0.1]], [2.0])) == 0)
    tr = integrate_hk(VortexConfig([[0.3, 0.1]], [2.0]), 5.0)
    assert np.all(tr.positions == tr.positions[0])


def test_pair_velocities():
    v = hk_rhs(VortexConfig([[-0.5, 0], [0.5, 0]], [TWO_PI, TWO_PI]))
    assert np.allclose(v, [[0, -1], [0, 1]], atol=1e-15)
    v = hk_rhs(VortexConfig([[0, 0.5], [0, -0.5]], [TWO_PI, -TWO_PI]))
    assert np.allclose(v, [[1, 0], [1, 0]], atol=1e-15)


def test_corotation_period_is_pi():
    T = corotation_period(VortexConfig([[-0.5, 0], [0.5, 0]], [TWO_PI, TWO_PI]))
    assert abs(T - np.pi) < 1e-9


def test_dipole_translates_uniformly():
    tr = integrate_hk(VortexConfig([[0, 0.5], [0, -0.5]], [TWO_PI, -TWO_PI]), 2.0)
    t = tr.times
    assert np.allclose(tr.positions[:, 0, 0], t, atol=1e-9)
    assert np.allclose(tr.positions[:, :, 1], [[0.5, -0.5]], atol=1e-9)


@given(configs(3))
def test_invariants_conserved(cfg):
    assume(min_separation(cfg.positions) > 0.3)
    tr = integrate_hk(cfg, 0.5, 1e-11)
    if tr.aborted:
        return
    a = cfg.circulations
    H = [hamiltonian(z, a) for z in tr.positions]
    C = [center_of_vorticity(z, a) for z in tr.positions]
    assert np.ptp(H) <= 1e-7 * max(1.0, abs(H[0]))
    assert np.ptp(np.array(C), axis=0).max() <= 1e-8 * max(1.0, np.abs(C[0]).max())


@given(configs(3), st.floats(0, 2 * np.pi), coord, coord)
def test_hamiltonian_euclidean_invariance(cfg, th, dx, dy):
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    z2 = cfg.positions @ R.T + [dx, dy]
    assume(min_separation(cfg.positions) > 1e-3)
    a = cfg.circulations
    assert hamiltonian(z2, a) == pytest.approx(hamiltonian(cfg.positions, a), abs=1e-9)


@given(configs(4))
def test_momentum_of_rhs_vanishes(cfg):
    assume(min_separation(cfg.positions) > 1e-2)
    v = hk_rhs(cfg)
    scale = np.abs(cfg.circulations[:, None] * v).max() + 1.0
    assert np.abs(np.einsum("i,ic->c", cfg.circulations, v)).max() <= 1e-12 * scale


def test_degenerate_configs_rejected():
    with pytest.raises(DegenerateConfigError):
        VortexConfig([[0, 0], [1, 1]], [1.0])
    with pytest.raises(DegenerateConfigError):
        hk_rhs(VortexConfig([[0, 0], [0, 0]], [1.0, 1.0]))


def test_viscous_factor_at_unit_width():
    cfg = VortexConfig([[-0.5, 0], [0.5, 0]], [1.0, 1.0])
    p = ViscousParams(0.25, 1.0)
    vis = viscous_rhs(cfg, 0.0, p)
    assert np.allclose(vis, (1 - np.exp(-1)) * hk_rhs(cfg), rtol=1e-14)


def test_viscous_coincident_pair_contributes_nothing():
    cfg = VortexConfig([[0, 0], [0, 0], [1, 0]], [1.0, 1.0, 0.0])
    v = viscous_rhs(cfg, 0.1, ViscousParams(0.01))
    assert np.all(v[:2] == 0)


@given(configs(3), st.floats(0, 1))
def test_viscous_limit(cfg, tau):
    assume(min_separation(cfg.positions) > 0.2)
    vis = viscous_rhs(cfg, tau, ViscousParams(1e-6))
    assert np.allclose(vis, np.exp(tau) * hk_rhs(cfg), rtol=1e-10, atol=1e-12)


def test_drift_decreases_with_kappa():
    cfg = VortexConfig([[-0.5, 0], [0.5, 0]], [1.0, 1.0])
    tab = drift_study(cfg, [1 / 20, 1 / 40, 1 / 80, 1 / 400], np.log(2.0))
    assert np.all(np.diff(tab.drift) < 0)
    assert tab.drift[-1] < 1e-10
    assert tab.slope < 0


def test_collapse_threshold_aborts_run():
    # a dipole passing a still vortex: separations shrink below 90% of the start
    cfg = VortexConfig([[0, 0.5], [0, -0.5], [3.0, 0.6]], [TWO_PI, -TWO_PI, 0.1])
    tr = integrate_hk(cfg, 10.0, collapse_factor=0.9)
    assert tr.aborted
    assert tr.min_separation[-1] == pytest.approx(0.9 * 1.0, rel=1e-6)
    assert tr.times[-1] < 10.0


def test_viscous_trajectory_tracks_inviscid_for_small_kappa():
    cfg = VortexConfig([[-0.5, 0], [0.5, 0]], [1.0, 1.0])
    tr = integrate_viscous(cfg, 0.5, ViscousParams(1e-4))
    assert not tr.aborted
    assert np.all(np.diff(tr.times) > 0)
    assert np.allclose(tr.min_separation, 1.0, atol=1e-9)
