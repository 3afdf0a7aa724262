"""Pseudo-spectral 2D Navier-Stokes in vorticity form on a periodic box.

The total vorticity and optionally the per-vortex passive components are
advanced together by the velocity of the total field. Diffusion is applied
exactly through an integrating factor; advection uses RK4 with 2/3 dealiasing.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import fft

from .biot_savart import (PeriodicField, TWO_PI, _wrap, grid_coords, kb_eval,
                          oseen_velocity, spectral_velocity, torus_kernel, wavenumbers)
from .vortex_ode import TrajectorySet, VortexConfig, ViscousParams


class ResolutionError(ValueError):
    pass


class CFLError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid:
    n: int
    L: float

    def __post_init__(self):
        if self.n <= 0 or self.n & (self.n - 1):
            raise ResolutionError("n must be a power of two")

    @property
    def h(self):
        return self.L / self.n


@dataclass
class NSState:
    t: float
    grid: Grid
    what: np.ndarray  # (M, n, n//2+1) spectra; index 0 is the total vorticity
    alphas: np.ndarray
    centers0: np.ndarray
    params: ViscousParams

    @property
    def has_parts(self) -> bool:
        return self.what.shape[0] > 1

    def field(self, m: int = 0) -> np.ndarray:
        return fft.irfft2(self.what[m], s=(self.grid.n, self.grid.n))

    @property
    def omega(self) -> PeriodicField:
        return PeriodicField(self.grid.L, self.field(0))

    def parts(self):
        return [PeriodicField(self.grid.L, self.field(m)) for m in range(1, self.what.shape[0])]

    def velocity(self):
        n = self.grid.n
        uh, vh = spectral_velocity(self.what[0], n, self.grid.L)
        return np.stack([fft.irfft2(uh, s=(n, n)), fft.irfft2(vh, s=(n, n))])


def gaussian(X, Y, center, width2, L=None):
    """Unit-mass Gaussian exp(-|x-z|^2/width2)/(pi width2); nearest image on a torus."""
    dx, dy = X - center[0], Y - center[1]
    if L is not None:
        dx, dy = _wrap(dx, L), _wrap(dy, L)
    return np.exp(-(dx**2 + dy**2) / width2) / (np.pi * width2)


def required_n(params: ViscousParams, L: float, cells: float = 8.0) -> int:
    h = np.sqrt(4.0 * params.kappa * params.eta0) / cells
    return int(2 ** np.ceil(np.log2(L / h)))


def init_gaussian_vortices(config: VortexConfig, params: ViscousParams, grid: Grid,
                           track_parts: bool = True, margin: float = 5.0) -> NSState:
    """Unit-mass Gaussians of width^2 = 4 kappa eta0 at the vortex positions (t = 0)."""
    s2 = 4.0 * params.kappa * params.eta0
    if s2 <= 0:
        raise ResolutionError("need kappa eta0 > 0")
    if np.sqrt(s2) < 8.0 * grid.h:
        raise ResolutionError(f"core unresolved; need n >= {required_n(params, grid.L)}")
    half = grid.L / 2 - margin * np.sqrt(s2)
    if np.any(np.abs(config.positions) > half):
        raise ResolutionError("vortex too close to the box edge")
    X, Y = grid_coords(grid.n, grid.L)
    parts = [gaussian(X, Y, z, s2) for z in config.positions]
    total = sum(a * p for a, p in zip(config.circulations, parts))
    fields = [total] + (parts if track_parts else [])
    what = np.stack([fft.rfft2(f) for f in fields])
    return NSState(0.0, grid, what, config.circulations.copy(), config.positions.copy(), params)


class _Stepper:
    def __init__(self, grid: Grid, nu: float):
        n, L = grid.n, grid.L
        self.n, self.L = n, L
        KX, KY = wavenumbers(n, L)
        self.KX, self.KY = KX, KY
        self.k2 = KX**2 + KY**2
        kmax = np.pi * n / L
        self.mask = (np.abs(KX) < 2.0 / 3.0 * kmax) & (np.abs(KY) < 2.0 / 3.0 * kmax)
        self.nu = nu
        self._cache = {}

    def factor(self, dt):
        key = float(dt)
        if key not in self._cache:
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[key] = (np.exp(-self.nu * self.k2 * dt), np.exp(-self.nu * self.k2 * dt / 2))
        return self._cache[key]

    def velocity(self, w0h):
        n = self.n
        uh, vh = spectral_velocity(w0h, n, self.L)
        return fft.irfft2(uh, s=(n, n)), fft.irfft2(vh, s=(n, n))

    def nonlinear(self, wh):
        n = self.n
        u, v = self.velocity(wh[0])
        out = np.empty_like(wh)
        for m in range(wh.shape[0]):
            wx = fft.irfft2(1j * self.KX * wh[m], s=(n, n))
            wy = fft.irfft2(1j * self.KY * wh[m], s=(n, n))
            out[m] = -fft.rfft2(u * wx + v * wy) * self.mask
        return out

    def rk4(self, wh, dt):
        E, E2 = self.factor(dt)
        k1 = self.nonlinear(wh)
        k2 = self.nonlinear(E2 * (wh + 0.5 * dt * k1))
        k3 = self.nonlinear(E2 * wh + 0.5 * dt * k2)
        k4 = self.nonlinear(E * wh + dt * E2 * k3)
        return E * wh + dt / 6.0 * (E * k1 + 2.0 * E2 * (k2 + k3) + k4)


_steppers: dict = {}


def _stepper(state: NSState) -> _Stepper:
    nu = state.params.kappa * state.params.eta0
    key = (state.grid.n, state.grid.L, nu)
    if key not in _steppers:
        _steppers.clear()
        _steppers[key] = _Stepper(state.grid, nu)
    return _steppers[key]


def max_speed(state: NSState) -> float:
    u, v = _stepper(state).velocity(state.what[0])
    return float(np.sqrt((u**2 + v**2).max()))


def step(state: NSState, dt: float, cfl: float = 1.0, check: bool = True) -> NSState:
    st = _stepper(state)
    if check:
        umax = max_speed(state)
        if dt * umax > cfl * state.grid.h:
            raise CFLError(f"dt={dt:g} exceeds CFL limit {cfl * state.grid.h / umax:g}")
    new = st.rk4(state.what, dt)
    if not np.all(np.isfinite(new)):
        raise DivergenceError("non-finite spectral coefficients")
    return replace(state, t=state.t + dt, what=new)


def advance(state: NSState, T: float, cfl: float = 0.5, dt_max: float = np.inf,
            callback=None) -> NSState:
    """Step to time T with dt chosen from the current max speed each step."""
    while state.t < T - 1e-14:
        umax = max(max_speed(state), 1e-300)
        dt = min(cfl * state.grid.h / umax, dt_max, T - state.t)
        state = step(state, dt, check=False)
        if callback is not None:
            callback(state)
    return state


# ---------------------------------------------------------------- comparisons

def lamb_oseen_field(grid: Grid, centers, alphas, width2) -> np.ndarray:
    X, Y = grid_coords(grid.n, grid.L)
    return sum(a * gaussian(X, Y, z, width2, grid.L) for z, a in zip(centers, alphas))


def _centers_at(state: NSState, traj: TrajectorySet | None):
    if traj is None:
        return state.centers0
    if traj.positions.shape[1] != len(state.alphas):
        raise ValueError("trajectory does not match the vortex count")
    if state.t > traj.times[-1] + 1e-12:
        raise ValueError("trajectory shorter than the state time")
    return traj.at(state.t)


def l1_lamb_oseen_error(state: NSState, traj: TrajectorySet | None, centers=None) -> float:
    """L1 distance to the sum of heat-widened Gaussians at the reference positions."""
    if traj is not None and traj.time_variable != "t":
        raise ValueError("physical-time trajectory expected")
    z = _centers_at(state, traj) if centers is None else np.asarray(centers)
    p = state.params
    ref = lamb_oseen_field(state.grid, z, state.alphas, 4.0 * p.kappa * p.eta0 * (state.t + 1.0))
    return float(np.abs(state.field(0) - ref).sum() * state.grid.h**2)


def point_vortex_velocity(points, centers, alphas, L=None):
    out = np.zeros(points.shape)
    for z, a in zip(centers, alphas):
        d = points - z
        out += a * (kb_eval(d) if L is None else torus_kernel(d, L))
    return out


def oseen_superposition_velocity(points, centers, alphas, width2, L=None):
    """Velocity of Gaussian vortices; on a torus the point-vortex part uses the torus kernel."""
    out = np.zeros(points.shape)
    s = np.sqrt(width2 / 4.0)
    for z, a in zip(centers, alphas):
        d = points - z
        if L is not None:
            d = np.stack([_wrap(d[..., 0], L), _wrap(d[..., 1], L)], axis=-1)
        ug = oseen_velocity(d / s) / s
        out += a * ug
        if L is not None:
            # harmonic torus correction is unchanged by radial smoothing
            out += a * (torus_kernel(d, L) - kb_eval(d))
    return out


@dataclass
class PointwiseReport:
    distances: np.ndarray
    errors: np.ndarray
    empty: bool
    C: float | None = None
    C0: float | None = None


def pointwise_velocity_error(state: NSState, traj: TrajectorySet | None, cutoff: float,
                             torus: bool = True, centers=None, d_T: float | None = None) -> PointwiseReport:
    """|u^kappa - sum alpha_i K(x - z_i)| on nodes with min_i |x - z_i| >= cutoff.

    torus=True uses the periodic kernel so box images do not enter the error.
    Also fits the bound shape C (min(1/d, e^{-d_T^2/(C0 kappa)}/d^2) + e^{-d^2/(16 kappa (t+1))}/d + sqrt kappa).
    """
    z = _centers_at(state, traj) if centers is None else np.asarray(centers)
    X, Y = grid_coords(state.grid.n, state.grid.L)
    pts = np.stack([X, Y], axis=-1)
    dist = np.full(X.shape, np.inf)
    for c in z:
        dist = np.minimum(dist, np.hypot(_wrap(X - c[0], state.grid.L), _wrap(Y - c[1], state.grid.L)))
    sel = dist >= cutoff
    if not np.any(sel):
        return PointwiseReport(np.zeros(0), np.zeros(0), True)
    u = state.velocity()
    ref = point_vortex_velocity(pts[sel], z, state.alphas, state.grid.L if torus else None)
    err = np.hypot(u[0][sel] - ref[:, 0], u[1][sel] - ref[:, 1])
    d = dist[sel]
    rep = PointwiseReport(d, err, False)
    k = state.params.kappa
    dT = d_T if d_T is not None else (traj.d_T if traj is not None else None)
    if dT is not None and np.isfinite(dT):
        best = None
        for C0 in (1.0, 2.0, 4.0, 8.0, 16.0):
            shape = (np.minimum(1.0 / d, np.exp(-dT**2 / (C0 * k)) / d**2)
                     + np.exp(-d**2 / (16.0 * k * (state.t + 1.0))) / d + np.sqrt(k))
            C = float(np.max(err / shape))
            if best is None or C < best[0]:
                best = (C, C0)
        rep.C, rep.C0 = best
    return rep


def circulations(state: NSState):
    """Integral of every stored field (total first)."""
    return np.real(state.what[:, 0, 0]) * state.grid.h**2


@dataclass
class FarFieldShape:
    distances: np.ndarray
    measured: np.ndarray   # |u - alpha K| extrapolated to an unbounded box
    predicted: np.ndarray  # e^{-d^2/(4 kappa eta0 (t+1))} / (2 pi d)
    raw_rel: float         # worst relative deviation on the largest box alone
    t: float

    @property
    def rel(self) -> np.ndarray:
        return np.abs(self.measured - self.predicted) / self.predicted

    @property
    def max_rel(self) -> float:
        return float(self.rel.max())


def single_vortex_far_field(params: ViscousParams, T: float = 1.0, boxes=(32.0, 64.0),
                            cells: float = 8.0, inner: float = 3.0, outer: float = 10.0,
                            cfl: float = 0.5) -> FarFieldShape:
    """Velocity error of one Gaussian vortex against alpha K on d in [inner, outer] sqrt(kappa eta0 T).

    The periodic images strain the core and leave an O(L^-4) imprint on the
    far field. Two boxes (sizes in units of the initial core width, same
    spacing) are run and combined as (16 r_big - r_small)/15 on shared nodes.
    """
    if len(boxes) != 2 or boxes[1] != 2 * boxes[0]:
        raise ValueError("boxes must be (b, 2b)")
    w = np.sqrt(4.0 * params.kappa * params.eta0)
    sc = np.sqrt(params.kappa * params.eta0 * T)
    n0 = required_n(params, boxes[0] * w, cells)
    res = []
    mask = None
    for b, n in ((boxes[0], n0), (boxes[1], 2 * n0)):
        g = Grid(n, b * w)
        s = advance(init_gaussian_vortices(VortexConfig([[0.0, 0.0]], [1.0]), params, g,
                                           track_parts=False), T, cfl=cfl)
        off = (n - n0) // 2
        X, Y = (c[off:off + n0, off:off + n0] for c in grid_coords(n, g.L))
        u = s.velocity()[:, off:off + n0, off:off + n0]
        if mask is None:
            d = np.hypot(X, Y)
            mask = (d >= inner * sc) & (d <= outer * sc)
            dist = d[mask]
        pts = np.stack([X[mask], Y[mask]], axis=-1)
        res.append(np.stack([u[0][mask], u[1][mask]], axis=-1)
                   - point_vortex_velocity(pts, [[0.0, 0.0]], [1.0], g.L))
    pred = np.exp(-dist**2 / (4.0 * params.kappa * params.eta0 * (T + 1.0))) / (TWO_PI * dist)
    ext = (16.0 * res[1] - res[0]) / 15.0
    raw = float((np.abs(np.linalg.norm(res[1], axis=-1) - pred) / pred).max())
    return FarFieldShape(dist, np.linalg.norm(ext, axis=-1), pred, raw, float(T))
