import numpy as np
import pytest

from artifact.ns_spectral import (CFLError, Grid, ResolutionError, advance, circulations, init_gaussian_vortices,
                                  l1_lamb_oseen_error, max_speed, pointwise_velocity_error, required_n, step)
from artifact.vortex_ode import VortexConfig, ViscousParams


def _pair(kappa=1e-3, n=128, L=1.0):
    cfg = VortexConfig([[-0.1, 0.0], [0.1, 0.0]], [1.0, -0.5])
    return init_gaussian_vortices(cfg, ViscousParams(kappa, time_variable="t"), Grid(n, L))


def test_grid_rejects_non_power_of_two():
    with pytest.raises(ResolutionError):
        Grid(100, 1.0)


def test_unresolved_core_rejected():
    p = ViscousParams(1e-5, time_variable="t")
    with pytest.raises(ResolutionError):
        init_gaussian_vortices(VortexConfig([[0, 0]], [1.0]), p, Grid(32, 1.0))
    assert required_n(p, 1.0) > 32


def test_vortex_near_edge_rejected():
    with pytest.raises(ResolutionError):
        init_gaussian_vortices(VortexConfig([[0.49, 0]], [1.0]), ViscousParams(1e-3), Grid(128, 1.0))


def test_initial_state_is_exact_gaussians():
    s = _pair()
    assert np.allclose(circulations(s), [0.5, 1.0, 1.0], atol=1e-12)
    assert l1_lamb_oseen_error(s, None) < 1e-12


def test_cfl_violation_raises():
    s = _pair()
    dt = 2.0 * s.grid.h / max_speed(s)
    with pytest.raises(CFLError):
        step(s, dt)


def test_circulation_conserved():
    s = advance(_pair(), 0.05)
    assert s.t == pytest.approx(0.05)
    assert np.allclose(circulations(s), [0.5, 1.0, 1.0], atol=1e-12)


def test_single_gaussian_is_heat_solution():
    # a lone radial vortex only diffuses; what remains is the torus image effect, ~ L^-4
    p = ViscousParams(2e-3, time_variable="t")
    w = np.sqrt(4 * p.kappa)
    errs = []
    for box, n in ((16, 128), (32, 256)):
        s = init_gaussian_vortices(VortexConfig([[0, 0]], [1.0]), p, Grid(n, box * w))
        errs.append(l1_lamb_oseen_error(advance(s, 0.2, dt_max=1e-2), None))
    assert errs[1] < 2e-5
    assert errs[0] / errs[1] > 10


def test_pointwise_empty_when_cutoff_exceeds_box():
    rep = pointwise_velocity_error(_pair(), None, cutoff=10.0)
    assert rep.empty and rep.distances.size == 0
