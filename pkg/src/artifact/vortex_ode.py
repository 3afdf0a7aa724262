"""Point-vortex (Helmholtz-Kirchhoff) and viscous vortex systems."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .biot_savart import TWO_PI, kb_eval, perp, torus_kernel
from .fitting import fit_slope


class DegenerateConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VortexConfig:
    positions: np.ndarray
    circulations: np.ndarray

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.positions, dtype=float))
        a = np.atleast_1d(np.asarray(self.circulations, dtype=float))
        if z.shape[-1] != 2 or z.shape[0] != a.shape[0] or a.shape[0] < 1:
            raise DegenerateConfigError("positions and circulations must have matching length N >= 1")
        object.__setattr__(self, "positions", z)
        object.__setattr__(self, "circulations", a)

    @property
    def count(self) -> int:
        return len(self.circulations)

    def with_positions(self, z):
        return VortexConfig(np.reshape(z, (-1, 2)), self.circulations)


@dataclass(frozen=True)
class ViscousParams:
    kappa: float
    eta0: float = 1.0
    time_variable: str = "tau"
    # "kappa_eta0": exponent |y|^2/(4 kappa eta0 e^tau); "kappa": |y|^2/(4 kappa e^tau)
    mollifier: str = "kappa_eta0"

    def __post_init__(self):
        if self.kappa < 0 or self.eta0 <= 0:
            raise ValueError("need kappa >= 0 and eta0 > 0")
        if self.time_variable not in ("t", "tau"):
            raise ValueError("time_variable must be 't' or 'tau'")
        if self.mollifier not in ("kappa_eta0", "kappa"):
            raise ValueError("unknown mollifier convention")

    def width2(self, tau):
        """Squared mollifier length 4 kappa (eta0) e^tau."""
        s = self.kappa * (self.eta0 if self.mollifier == "kappa_eta0" else 1.0)
        return 4.0 * s * np.exp(tau)


@dataclass
class TrajectorySet:
    times: np.ndarray
    positions: np.ndarray  # (T, N, 2)
    min_separation: np.ndarray
    d_T: float
    aborted: bool = False
    time_variable: str = "t"
    circulations: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def physical_times(self):
        return np.expm1(self.times) if self.time_variable == "tau" else self.times

    def at(self, t):
        """Linear-in-time positions at t (for output grids between stored times)."""
        out = np.empty(self.positions.shape[1:])
        for i in range(out.shape[0]):
            for c in range(2):
                out[i, c] = np.interp(t, self.times, self.positions[:, i, c])
        return out


def min_separation(z) -> float:
    z = np.asarray(z, dtype=float)
    if len(z) < 2:
        return np.inf
    d = np.linalg.norm(z[:, None, :] - z[None, :, :], axis=-1)
    d[np.diag_indices(len(z))] = np.inf
    return float(d.min())


def _pair_diffs(z):
    return z[:, None, :] - z[None, :, :]


def _hk_velocity(z, alpha, L=None):
    n = len(z)
    if n < 2:
        return np.zeros_like(z)
    d = _pair_diffs(z)
    off = ~np.eye(n, dtype=bool)
    K = np.zeros_like(d)
    K[off] = kb_eval(d[off]) if L is None else torus_kernel(d[off], L)
    return np.einsum("ijc,j->ic", K, alpha)


def hk_rhs(config: VortexConfig, L: float | None = None):
    """Velocity of each vortex induced by all the others (torus kernel if L given)."""
    z = config.positions
    if min_separation(z) == 0.0:
        raise DegenerateConfigError("coincident vortex positions")
    return _hk_velocity(z, config.circulations, L)


def viscous_rhs(config: VortexConfig, tau: float, params: ViscousParams):
    """Mollified interaction in logarithmic time; coincident pairs contribute 0."""
    if params.kappa <= 0:
        raise ValueError("viscous system needs kappa > 0")
    z = config.positions
    n = len(z)
    if n < 2:
        return np.zeros_like(z)
    d = _pair_diffs(z)
    r2 = np.sum(d * d, axis=-1)
    w2 = params.width2(tau)
    fac = np.zeros_like(r2)
    nz = r2 > 0
    fac[nz] = -np.expm1(-r2[nz] / w2) / (TWO_PI * r2[nz])
    vel = perp(d) * fac[..., None]
    return np.exp(tau) * np.einsum("ijc,j->ic", vel, config.circulations)


def hamiltonian(z, alpha) -> float:
    z = np.asarray(z)
    d = np.linalg.norm(_pair_diffs(z), axis=-1)
    iu = np.triu_indices(len(z), 1)
    return float(np.sum(np.outer(alpha, alpha)[iu] * np.log(d[iu])))


def center_of_vorticity(z, alpha):
    return np.einsum("i,ic->c", alpha, np.asarray(z))


def _integrate(fun, config, t_span, tolerance, n_out, collapse_factor, time_variable, events=()):
    z0 = config.positions
    d0 = min_separation(z0)
    N = config.count
    threshold = collapse_factor * d0 if np.isfinite(d0) else 0.0

    def collapse(t, y):
        return min_separation(y.reshape(N, 2)) - threshold
    collapse.terminal = True
    collapse.direction = -1

    t_eval = np.linspace(t_span[0], t_span[1], n_out)
    sol = solve_ivp(lambda t, y: fun(t, y.reshape(N, 2)).ravel(), t_span, z0.ravel(),
                    method="DOP853", rtol=tolerance, atol=tolerance * 1e-2,
                    t_eval=t_eval, events=(collapse,) + tuple(events))
    if sol.status < 0:
        raise RuntimeError(sol.message)
    pos = sol.y.T.reshape(-1, N, 2)
    aborted = sol.status == 1 and len(sol.t_events[0]) > 0
    if aborted:
        # keep the partial trajectory including the collapse point
        pos = np.concatenate([pos, sol.y_events[0].reshape(-1, N, 2)])
        times = np.concatenate([sol.t, sol.t_events[0]])
    else:
        times = sol.t
    ms = np.array([min_separation(p) for p in pos])
    traj = TrajectorySet(times, pos, ms, float(ms.min()), aborted, time_variable,
                         config.circulations.copy())
    return traj, sol


def integrate_hk(config: VortexConfig, horizon: float, tolerance: float = 1e-12,
                 n_out: int = 401, collapse_factor: float = 1e-6,
                 L: float | None = None) -> TrajectorySet:
    if horizon <= 0 or tolerance <= 0:
        raise ValueError("horizon and tolerance must be positive")
    hk_rhs(config, L)
    alpha = config.circulations
    traj, _ = _integrate(lambda t, z: _hk_velocity(z, alpha, L), config, (0.0, horizon),
                         tolerance, n_out, collapse_factor, "t")
    return traj


def integrate_hk_tau(config: VortexConfig, tau_star: float, tolerance: float = 1e-12,
                     n_out: int = 401, collapse_factor: float = 1e-6) -> TrajectorySet:
    """Inviscid system written in tau = ln(t+1)."""
    alpha = config.circulations
    traj, _ = _integrate(lambda s, z: np.exp(s) * _hk_velocity(z, alpha), config, (0.0, tau_star),
                         tolerance, n_out, collapse_factor, "tau")
    return traj


def integrate_viscous(config: VortexConfig, tau_star: float, params: ViscousParams,
                      tolerance: float = 1e-12, n_out: int = 401,
                      collapse_factor: float = 1e-6) -> TrajectorySet:
    alpha = config.circulations
    traj, _ = _integrate(lambda s, z: viscous_rhs(VortexConfig(z, alpha), s, params), config,
                         (0.0, tau_star), tolerance, n_out, collapse_factor, "tau")
    return traj


def corotation_period(config: VortexConfig, tolerance: float = 1e-12, horizon: float | None = None) -> float:
    """First return time of the direction z1 - z2 to its initial value."""
    z0 = config.positions
    e0 = z0[0] - z0[1]
    if horizon is None:
        r = np.linalg.norm(e0)
        horizon = 4.0 * np.pi**2 * r**2 / max(abs(config.circulations.sum()), 1e-300) * 1.5
    N = config.count

    def cross(t, y):
        z = y.reshape(N, 2)
        e = z[0] - z[1]
        return e0[0] * e[1] - e0[1] * e[0]
    cross.direction = 0
    _, sol = _integrate(lambda t, z: _hk_velocity(z, config.circulations), config, (0.0, horizon),
                        tolerance, 3, 1e-6, "t", events=(cross,))
    for t, y in zip(sol.t_events[1], sol.y_events[1]):
        z = y.reshape(N, 2)
        if t > 1e-9 * horizon and np.dot(z[0] - z[1], e0) > 0:
            return float(t)
    raise RuntimeError("no full revolution within the horizon")


@dataclass
class DriftTable:
    kappa: np.ndarray
    drift: np.ndarray
    valid: np.ndarray
    slope: float | None
    intercept: float | None
    r2: float | None
    eta0: float
    mollifier: str


def drift_study(config: VortexConfig, kappa_list, tau_star: float, eta0: float = 1.0,
                tolerance: float = 1e-12, mollifier: str = "kappa_eta0", n_out: int = 201) -> DriftTable:
    """max_i sup_tau |y_i^kappa - y_i| per kappa, with a semilog fit against 1/kappa."""
    ref = integrate_hk_tau(config, tau_star, tolerance, n_out)
    ks = np.asarray(kappa_list, dtype=float)
    drift = np.full(len(ks), np.nan)
    valid = np.zeros(len(ks), dtype=bool)
    for m, k in enumerate(ks):
        vis = integrate_viscous(config, tau_star, ViscousParams(k, eta0, "tau", mollifier), tolerance, n_out)
        if vis.aborted or ref.aborted:
            continue
        drift[m] = np.max(np.linalg.norm(vis.positions - ref.positions, axis=-1))
        valid[m] = True
    ok = valid & (drift > 0)
    slope = intercept = r2 = None
    if ok.sum() >= 4:
        slope, intercept, r2 = fit_slope(1.0 / ks[ok], drift[ok], "semilog-x")
    return DriftTable(ks, drift, valid, slope, intercept, r2, eta0, mollifier)
