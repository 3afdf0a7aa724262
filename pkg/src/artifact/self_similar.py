"""Self-similar (Oseen-vortex) variables: operators L and Lambda, the weighted
L^2_p space, the radial corrector and the residual of the corrected vortex.

Fields are stored as w(r, theta) = Re sum_{n>=0} a_n(r) e^{i n theta} with a_0
real. The radial direction uses Chebyshev points on [-R, R] folded by parity
(mode n has parity (-1)^n), so no node sits at r = 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from .biot_savart import oseen_profile, oseen_velocity


class ResolutionError(ValueError):
    pass


class IterationDivergence(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


class NumericalFailure(RuntimeError):
    pass


def potential_V(r):
    """(r^2/4) / (e^{r^2/4} - 1), equal to 1 at r = 0."""
    q = np.asarray(r, dtype=float) ** 2 / 4.0
    out = np.ones_like(q)
    nz = q > 1e-12
    out[nz] = q[nz] / np.expm1(q[nz])
    return out


def one_minus_exp_over_r2(r):
    q = np.asarray(r, dtype=float) ** 2
    out = np.full_like(q, 0.25)
    nz = q > 1e-10
    out[nz] = -np.expm1(-q[nz] / 4.0) / q[nz]
    return out


def _cheb(N: int, R: float):
    """Chebyshev extreme points on [-R, R] (descending) and the first-derivative matrix."""
    j = np.arange(N + 1)
    x = np.cos(np.pi * j / N)
    c = np.where((j == 0) | (j == N), 2.0, 1.0) * (-1.0) ** j
    dX = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (dX + np.eye(N + 1))
    D -= np.diag(D.sum(axis=1))
    return R * x, D / R


def _bary_matrix(nodes, bw, xe):
    """Barycentric interpolation matrix from nodes to points xe."""
    xe = np.asarray(xe, dtype=float)
    diff = xe[:, None] - nodes[None, :]
    exact = diff == 0.0
    diff[exact] = 1.0
    W = bw[None, :] / diff
    W /= W.sum(axis=1, keepdims=True)
    rows = np.any(exact, axis=1)
    if np.any(rows):
        W[rows] = exact[rows].astype(float)
    return W


class PolarGrid:
    """Radial Chebyshev grid on [0, R] (parity folded) with angular modes 0..nmax."""

    def __init__(self, R: float = 12.0, N: int = 127, nmax: int = 8):
        if N % 2 == 0:
            raise ValueError("N must be odd so that r = 0 is not a node")
        self.R, self.N, self.nmax = float(R), int(N), int(nmax)
        x, D = _cheb(self.N, self.R)
        self.x_full = x
        self.D_full = D
        M = (self.N + 1) // 2
        pos = np.arange(M)[::-1]            # ascending r
        mir = self.N - pos                  # node at -r
        self.r = x[pos]
        self._pos, self._mir = pos, mir
        D2 = D @ D
        self._D1 = {s: D[np.ix_(pos, pos)] + s * D[np.ix_(pos, mir)] for s in (1, -1)}
        self._D2 = {s: D2[np.ix_(pos, pos)] + s * D2[np.ix_(pos, mir)] for s in (1, -1)}
        # weights for int_0^R f(r) r dr with f even
        m = np.arange(self.N + 1)
        gx, gw = np.polynomial.legendre.leggauss(self.N + 8)
        gx = 0.5 * (gx + 1.0)
        gw = 0.5 * gw
        T = np.cos(np.outer(np.arccos(gx), m))
        mu = (T * (gx * gw)[:, None]).sum(axis=0) * self.R**2
        V = np.cos(np.outer(np.arccos(x / self.R), m))
        wfull = np.linalg.solve(V.T, mu)
        self.q = wfull[pos] + wfull[mir]
        j = np.arange(self.N + 1)
        bw = (-1.0) ** j
        bw[0] *= 0.5
        bw[-1] *= 0.5
        self._bw = bw
        self.weight = np.exp(self.r**2 / 4.0)

    @property
    def M(self) -> int:
        return len(self.r)

    @staticmethod
    def parity(n: int) -> int:
        return 1 if n % 2 == 0 else -1

    def D1(self, n):
        return self._D1[self.parity(n)]

    def D2(self, n):
        return self._D2[self.parity(n)]

    def extend(self, vals, s: int):
        """Values at all Chebyshev nodes of [-R, R] from values at r > 0."""
        full = np.empty(vals.shape[:-1] + (self.N + 1,), dtype=vals.dtype)
        full[..., self._pos] = vals
        full[..., self._mir] = s * vals
        return full

    def interp_matrix(self, r_eval):
        return _bary_matrix(self.x_full, self._bw, r_eval)

    def cheb_coeffs(self, vals, s: int):
        full = self.extend(vals, s)
        m = np.arange(self.N + 1)
        V = np.cos(np.outer(np.arccos(np.clip(self.x_full / self.R, -1, 1)), m))
        return np.linalg.solve(V, full.T).T

    @cached_property
    def lap(self):
        """Delta_n = d2 + (1/r) d - n^2/r^2 per mode."""
        r = self.r
        return {n: self.D2(n) + self.D1(n) / r[:, None] - np.diag(n**2 / r**2)
                for n in range(self.nmax + 1)}

    @cached_property
    def L_mats(self):
        r = self.r
        return {n: self.lap[n] + (r / 2.0)[:, None] * self.D1(n) + np.eye(self.M)
                for n in range(self.nmax + 1)}

    @cached_property
    def stream_mats(self):
        """Inverse of Delta_n with regularity at 0 and exterior matching at R."""
        out = {}
        for n in range(self.nmax + 1):
            A = self.lap[n].copy()
            B = np.eye(self.M)
            if n == 0:
                # exterior solution (mass / 2 pi) ln r fixes psi(R)
                A[-1] = 0.0
                A[-1, -1] = 1.0
                B[-1] = np.log(self.R) * self.q
            else:
                A[-1] = self.D1(n)[-1]
                A[-1, -1] += n / self.R
                B[-1] = 0.0
            out[n] = np.linalg.solve(A, B)
        return out

    @cached_property
    def uG_over_r(self):
        return one_minus_exp_over_r2(self.r) / (2.0 * np.pi)

    @cached_property
    def G(self):
        return np.exp(-self.r**2 / 4.0) / (4.0 * np.pi)

    @cached_property
    def Lambda_mats(self):
        """Mode-n matrix of Lambda (complex amplitudes)."""
        return {n: 1j * n * (np.diag(self.uG_over_r) + 0.5 * self.G[:, None] * self.stream_mats[n])
                for n in range(self.nmax + 1)}


@dataclass
class PolarField:
    grid: PolarGrid
    coeffs: np.ndarray  # (nmax+1, M) complex

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape != (self.grid.nmax + 1, self.grid.M):
            raise ValueError(f"coefficient table must be {(self.grid.nmax + 1, self.grid.M)}")
        c = c.copy()
        c[0] = c[0].real
        self.coeffs = c

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros((grid.nmax + 1, grid.M), dtype=complex))

    @classmethod
    def from_function(cls, grid, f, ntheta: int | None = None):
        """Sample f(X, Y) on the polar nodes and take angular FFTs."""
        nt = ntheta or 4 * (grid.nmax + 1)
        th = 2 * np.pi * np.arange(nt) / nt
        X = grid.r[:, None] * np.cos(th)[None, :]
        Y = grid.r[:, None] * np.sin(th)[None, :]
        vals = f(X, Y)
        F = np.fft.fft(vals, axis=1) / nt
        c = np.zeros((grid.nmax + 1, grid.M), dtype=complex)
        c[0] = F[:, 0].real
        for n in range(1, grid.nmax + 1):
            c[n] = 2.0 * F[:, n]
        return cls(grid, c)

    @classmethod
    def from_modes(cls, grid, modes: dict):
        c = np.zeros((grid.nmax + 1, grid.M), dtype=complex)
        for n, a in modes.items():
            c[n] = a(grid.r) if callable(a) else a
        return cls(grid, c)

    def __add__(self, other):
        return PolarField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other):
        return PolarField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, s):
        return PolarField(self.grid, self.coeffs * s)

    __rmul__ = __mul__

    def on_polar(self, ntheta: int = 64):
        """Values on the (r_k, theta_l) tensor grid."""
        th = 2 * np.pi * np.arange(ntheta) / ntheta
        n = np.arange(self.grid.nmax + 1)
        E = np.exp(1j * np.outer(n, th))
        return np.real(self.coeffs.T @ E), th

    def radial_derivative(self):
        g = self.grid
        return PolarField(g, np.stack([g.D1(n) @ self.coeffs[n] for n in range(g.nmax + 1)]))

    def _eval_modes(self, modes, parities, points):
        g = self.grid
        P = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.hypot(P[:, 0], P[:, 1])
        th = np.arctan2(P[:, 1], P[:, 0])
        if np.any(r > g.R * (1 + 1e-12)):
            raise ValueError("evaluation point outside the polar grid")
        W = g.interp_matrix(r)
        out = np.zeros(len(r))
        for n in range(g.nmax + 1):
            full = g.extend(modes[n], parities[n])
            out += np.real((W @ full) * np.exp(1j * n * th))
        return out

    def evaluate(self, points):
        g = self.grid
        par = [g.parity(n) for n in range(g.nmax + 1)]
        return self._eval_modes(self.coeffs, par, points)

    def check_resolved(self, tol: float = 1e-9):
        g = self.grid
        scale = np.abs(self.coeffs).max()
        if scale == 0:
            return 0.0
        tail = 0.0
        for n in range(g.nmax + 1):
            c = g.cheb_coeffs(self.coeffs[n], g.parity(n))
            tail = max(tail, np.abs(c[int(0.85 * g.N):]).max())
        if tail > tol * scale:
            raise ResolutionError(f"spectral tail {tail / scale:.2e} above {tol:.0e}")
        return tail / scale

    def decay_certificate(self, gamma: float = 0.9, C: float | None = None):
        """max over the outer 10% of nodes of |a_n(r)| e^{gamma r^2/4} relative to the core."""
        g = self.grid
        amp = np.abs(self.coeffs).sum(axis=0)
        env = amp * np.exp(gamma * g.r**2 / 4.0)
        outer = g.r >= 0.9 * g.R
        core = env[g.r <= 4.0].max() if np.any(g.r <= 4.0) else env.max()
        ratio = env[outer].max() / max(core, 1e-300)
        return ratio if C is None else ratio <= C

    def mean(self):
        """int w dX."""
        return 2.0 * np.pi * float(np.sum(self.grid.q * self.coeffs[0].real))

    def to_rows(self):
        g = self.grid
        return [(float(g.r[k]), n, float(self.coeffs[n, k].real), float(self.coeffs[n, k].imag))
                for n in range(g.nmax + 1) for k in range(g.M)]


# ---------------------------------------------------------------- inner products

def _mode_sum(grid, a, b, rweight):
    tot = np.sum(grid.q * rweight * a[0].real * b[0].real)
    for n in range(1, grid.nmax + 1):
        tot += 0.5 * np.sum(grid.q * rweight * np.real(a[n] * np.conj(b[n])))
    return 2.0 * np.pi * float(tot)


def weighted_inner(f: PolarField, g: PolarField) -> float:
    """<f, g> in L^2 with weight p = e^{|X|^2/4}."""
    return _mode_sum(f.grid, f.coeffs, g.coeffs, f.grid.weight)


def weighted_norm(f: PolarField) -> float:
    return np.sqrt(max(weighted_inner(f, f), 0.0))


def weighted_dirichlet(f: PolarField) -> float:
    """||grad f||^2 in L^2_p."""
    g = f.grid
    dr = f.radial_derivative().coeffs
    n = np.arange(g.nmax + 1)[:, None]
    ang = 1j * n * f.coeffs / g.r[None, :]
    return _mode_sum(g, dr, dr, g.weight) + _mode_sum(g, ang, ang, g.weight)


# ---------------------------------------------------------------- operators

def op_L_apply(w: PolarField, check: bool = False) -> PolarField:
    """L w = Delta w + (X/2).grad w + w."""
    g = w.grid
    if check:
        w.check_resolved()
    return PolarField(g, np.stack([g.L_mats[n] @ w.coeffs[n] for n in range(g.nmax + 1)]))


def stream_function(w: PolarField) -> PolarField:
    g = w.grid
    return PolarField(g, np.stack([g.stream_mats[n] @ w.coeffs[n] for n in range(g.nmax + 1)]))


def op_Lambda_apply(w: PolarField, alpha: float = 1.0) -> PolarField:
    """Lambda w = u^G.grad w + (K_B * w).grad G, times the self circulation alpha."""
    g = w.grid
    return PolarField(g, alpha * np.stack([g.Lambda_mats[n] @ w.coeffs[n] for n in range(g.nmax + 1)]))


@dataclass
class PolarVelocity:
    grid: PolarGrid
    ur: np.ndarray   # (nmax+1, M) complex
    uth: np.ndarray
    psi_R: np.ndarray  # stream amplitudes at r = R for the exterior expansion
    mass: float

    def evaluate(self, points):
        """Cartesian velocity at arbitrary points (exterior multipole beyond R)."""
        g = self.grid
        P = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.hypot(P[:, 0], P[:, 1])
        th = np.arctan2(P[:, 1], P[:, 0])
        ur = np.zeros(len(r))
        ut = np.zeros(len(r))
        inside = r <= g.R
        if np.any(inside):
            W = g.interp_matrix(r[inside])
            for n in range(g.nmax + 1):
                s = -g.parity(n)
                e = np.exp(1j * n * th[inside])
                ur[inside] += np.real((W @ g.extend(self.ur[n], s)) * e)
                ut[inside] += np.real((W @ g.extend(self.uth[n], s)) * e)
        out = ~inside
        if np.any(out):
            ro, to = r[out], th[out]
            ut[out] += self.mass / (2 * np.pi * ro)
            for n in range(1, g.nmax + 1):
                psi = self.psi_R[n] * (g.R / ro) ** n
                e = np.exp(1j * n * to)
                ur[out] += np.real(-1j * n * psi / ro * e)
                ut[out] += np.real(-n * psi / ro * e)
        c, s_ = np.cos(th), np.sin(th)
        return np.stack([ur * c - ut * s_, ur * s_ + ut * c], axis=-1)


def velocity(w: PolarField) -> PolarVelocity:
    """u = grad^perp psi with Delta psi = w: u_r = -(1/r) d_theta psi, u_theta = d_r psi."""
    g = w.grid
    psi = stream_function(w)
    n = np.arange(g.nmax + 1)[:, None]
    ur = -1j * n * psi.coeffs / g.r[None, :]
    uth = psi.radial_derivative().coeffs
    return PolarVelocity(g, ur, uth, psi.coeffs[:, -1].copy(), w.mean())


# ---------------------------------------------------------------- radial ODE

@dataclass
class RadialProfile:
    n: int
    r: np.ndarray
    values: np.ndarray
    residual: float
    local_exponent: float
    grid: PolarGrid = field(repr=False)

    def __call__(self, r_eval):
        W = self.grid.interp_matrix(np.asarray(r_eval, dtype=float))
        return W @ self.grid.extend(self.values, self.grid.parity(self.n))


def unit_forcing(n: int):
    return lambda r: (2.0 * np.pi / n) * r**n * np.exp(-r**2 / 4.0)


def _ode_matrix(grid: PolarGrid, n: int):
    A = grid.lap[n] + np.diag(potential_V(grid.r))
    A = A.astype(complex)
    A[-1] = grid.D1(n)[-1]
    A[-1, -1] += n / grid.R
    return A


def ode_residual(grid: PolarGrid, n: int, values, forcing_vals, fine: int = 2):
    """Residual of Omega'' + Omega'/r + (V - n^2/r^2) Omega = F re-evaluated on a finer grid."""
    fg = PolarGrid(grid.R, fine * (grid.N + 1) - 1, n)
    s = grid.parity(n)
    W = grid.interp_matrix(fg.r)
    Om = W @ grid.extend(values, s)
    F = W @ grid.extend(forcing_vals, s)
    res = fg.lap[n] @ Om + potential_V(fg.r) * Om - F
    scale = max(np.abs(F).max(), np.abs(fg.lap[n] @ Om).max())
    return float(np.abs(res[:-1]).max() / scale)


def solve_omega_profile(n: int, forcing=None, grid: PolarGrid | None = None,
                        tol: float = 1e-8) -> RadialProfile:
    """Regular, decaying solution of Omega'' + Omega'/r + (V - n^2/r^2) Omega = F."""
    if n < 1:
        raise ValueError("n >= 1 required")
    grid = grid or PolarGrid(nmax=max(n, 3))
    F = (forcing or unit_forcing(n))(grid.r)
    A = _ode_matrix(grid, n)
    b = np.asarray(F, dtype=complex).copy()
    b[-1] = 0.0
    Om = np.linalg.solve(A, b)
    if np.all(np.isreal(F)):
        Om = Om.real
    res = ode_residual(grid, n, Om, F)
    if not np.isfinite(res) or res > tol:
        raise NumericalFailure(f"ODE residual {res:.2e} above {tol:.0e}")
    prof = RadialProfile(n, grid.r.copy(), Om, res, np.nan, grid)
    # local exponent from the spectral interpolant near the regular singular point
    rs = np.array([1e-3, 2e-3, 4e-3, 8e-3])
    lo = np.log(np.abs(np.real(prof(rs))) + 1e-300)
    prof.local_exponent = float(np.polyfit(np.log(rs), lo, 1)[0])
    return prof


def lambda_inverse(f: PolarField, alpha: float = 1.0) -> PolarField:
    """Solve alpha Lambda w = f mode by mode (modes 0 and 1 must vanish)."""
    g = f.grid
    if np.abs(f.coeffs[:2]).max() > 1e-12 * max(np.abs(f.coeffs).max(), 1e-300):
        raise ValueError("Lambda is not invertible on modes 0 and 1")
    out = np.zeros_like(f.coeffs)
    r = g.r
    for n in range(2, g.nmax + 1):
        if not np.any(f.coeffs[n]):
            continue
        F = 2.0 * np.pi * f.coeffs[n] / (1j * n * alpha * one_minus_exp_over_r2(r))
        A = _ode_matrix(g, n)
        b = F.copy()
        b[-1] = 0.0
        Psi = np.linalg.solve(A, b)
        out[n] = F - potential_V(r) * Psi
    return PolarField(g, out)


# ---------------------------------------------------------------- corrector

@dataclass
class CorrectorBasis:
    """Unit solutions W_n of k(1 - L)W + alpha Lambda W = -r^n e^{-r^2/4} e^{i n theta}."""
    grid: PolarGrid
    kappa_eta0: float
    alpha: float
    units: dict
    history: dict

    def field(self, amplitudes: dict) -> PolarField:
        c = np.zeros((self.grid.nmax + 1, self.grid.M), dtype=complex)
        for n, A in amplitudes.items():
            c += A * self.units[n].coeffs
        return PolarField(self.grid, c)


def _direct_mode(grid, n, ke, alpha, rhs):
    A = ke * (np.eye(grid.M) - grid.L_mats[n]) + alpha * grid.Lambda_mats[n]
    b = rhs.astype(complex).copy()
    if ke > 0:
        A = A.copy()
        A[-1] = 0.0
        A[-1, -1] = 1.0
        b[-1] = 0.0
    return np.linalg.solve(A, b)


def build_corrector(kappa_eta0: float, amplitudes: dict | None = None, grid: PolarGrid | None = None,
                    alpha: float = 1.0, method: str = "direct", tol: float = 1e-10,
                    max_iter: int = 50):
    """Solve k(1 - L)w + alpha Lambda w = -T with T = Re sum_n A_n r^n e^{-r^2/4} e^{i n theta}.

    amplitudes None returns the unit basis for n = 2, 3. method "iterate" runs
    w <- w0 - k Lambda^{-1}(1 - L) w and raises on divergence; "direct" solves the
    fixed-point equation per mode and records the first iterates' contraction.
    """
    grid = grid or PolarGrid()
    ke = float(kappa_eta0)
    units, hist = {}, {}
    for n in (2, 3):
        rhs = -(grid.r**n * np.exp(-grid.r**2 / 4.0))
        f = PolarField.from_modes(grid, {n: rhs})
        w0 = lambda_inverse(f, alpha)
        h = []
        w = w0
        for k in range(max_iter if method == "iterate" else 3):
            if ke == 0:
                break
            nxt = w0 - ke * (1.0 / alpha) * lambda_inverse(w - op_L_apply(w), 1.0)
            d = weighted_norm(nxt - w)
            h.append(d)
            w = nxt
            if d < tol:
                break
            if len(h) > 2 and h[-1] > h[-2] > h[-3]:
                if method == "iterate":
                    raise IterationDivergence(f"fixed-point iteration diverging for mode {n}", h)
                break
        hist[n] = h
        if method == "iterate" or ke == 0:
            if method == "iterate" and ke > 0 and h and h[-1] >= tol:
                raise IterationDivergence(f"no convergence after {max_iter} iterations", h)
            units[n] = w
        elif method == "direct":
            units[n] = PolarField.from_modes(grid, {n: _direct_mode(grid, n, ke, alpha, rhs)})
        else:
            raise ValueError(f"unknown method {method}")
    basis = CorrectorBasis(grid, ke, alpha, units, hist)
    if amplitudes is None:
        return basis
    return basis.field(amplitudes)


# ---------------------------------------------------------------- forcing T_ij

def forcing_amplitudes(y_rel, tau: float, kappa_eta0: float, alpha_j: float = 1.0):
    """Complex mode amplitudes {2: A2, 3: A3} of alpha_j T_ij for y_rel = y_i - y_j.

    T_ij = Re sum_n A_n r^n e^{-r^2/4} e^{i n theta}, which is the two-term Taylor
    expansion with psi measured from eta_ij to X.
    """
    z = complex(y_rel[0], y_rel[1])
    c = alpha_j / (16.0 * np.pi**2)
    A2 = -1j * c * np.exp(tau) / z**2
    A3 = 1j * c * np.sqrt(kappa_eta0) * np.exp(1.5 * tau) / z**3
    return {2: A2, 3: A3}


def forcing_amplitudes_dtau(y_rel, v_rel, tau, kappa_eta0, alpha_j=1.0):
    z = complex(y_rel[0], y_rel[1])
    dz = complex(v_rel[0], v_rel[1])
    A = forcing_amplitudes(y_rel, tau, kappa_eta0, alpha_j)
    return {2: A[2] * (1.0 - 2.0 * dz / z), 3: A[3] * (1.5 - 3.0 * dz / z)}


def T_eval(X, amplitudes):
    X = np.atleast_2d(X)
    r2 = np.sum(X**2, axis=-1)
    zc = X[:, 0] + 1j * X[:, 1]
    return np.exp(-r2 / 4.0) * np.real(sum(A * zc**n for n, A in amplitudes.items()))


def R_exact(X, y_rel, tau, kappa_eta0, alpha_j=1.0):
    """(alpha_j / k)(u^G(X + eta) - u^G(eta)).grad G with eta = y_rel / sqrt(k e^tau)."""
    X = np.atleast_2d(X)
    eta = np.asarray(y_rel, dtype=float) / np.sqrt(kappa_eta0 * np.exp(tau))
    du = oseen_velocity(X + eta) - oseen_velocity(eta)
    gradG = -0.5 * X * oseen_profile(X)[:, None]
    return alpha_j * np.sum(du * gradG, axis=-1) / kappa_eta0


def psi_angle_eta(X, eta):
    """Angle from sin(psi) = X^perp.eta/(|X||eta|) taken verbatim."""
    X = np.atleast_2d(X)
    s = (-X[:, 1] * eta[0] + X[:, 0] * eta[1])
    c = X[:, 0] * eta[0] + X[:, 1] * eta[1]
    return np.arctan2(s, c)


# ---------------------------------------------------------------- cutoff

def _smooth_step(x):
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
        b = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1.0 - x, 1.0)), 0.0)
    return a / (a + b)


def cutoff(tau, kappa_eta0: float, alpha: float = 0.5):
    """phi = 0 for tau <= (k)^alpha, 1 for tau >= 2 (k)^alpha, smooth in between."""
    a = kappa_eta0**alpha
    return _smooth_step((np.asarray(tau, dtype=float) - a) / a)


def cutoff_derivative(tau, kappa_eta0: float, alpha: float = 0.5, h: float = 1e-6):
    a = kappa_eta0**alpha
    return (cutoff(tau + h * a, kappa_eta0, alpha) - cutoff(tau - h * a, kappa_eta0, alpha)) / (2 * h * a)


# ---------------------------------------------------------------- residual

@dataclass
class ResidualReport:
    tau: float
    kappa_eta0: float
    phi: float
    sup_weighted: float
    ratio_to_kappa: float
    gamma: float
    terms: dict
    nodes: np.ndarray = field(repr=False, default=None)
    values: np.ndarray = field(repr=False, default=None)


def _polar_points(grid, ntheta, rmax):
    th = 2 * np.pi * np.arange(ntheta) / ntheta
    sel = grid.r <= rmax
    r = grid.r[sel]
    X = np.stack([np.repeat(r, ntheta) * np.tile(np.cos(th), len(r)),
                  np.repeat(r, ntheta) * np.tile(np.sin(th), len(r))], axis=-1)
    return X, sel, th


def _on_nodes(f: PolarField, sel, ntheta):
    vals, _ = f.on_polar(ntheta)
    return vals[sel].ravel()


def _grad_on_nodes(f: PolarField, sel, ntheta):
    g = f.grid
    dr, th = f.radial_derivative().on_polar(ntheta)
    n = np.arange(g.nmax + 1)[:, None]
    dth = PolarField(g, 1j * n * f.coeffs / g.r[None, :]).on_polar(ntheta)[0]
    c, s = np.cos(th)[None, :], np.sin(th)[None, :]
    gx = dr * c - dth * s
    gy = dr * s + dth * c
    return np.stack([gx[sel].ravel(), gy[sel].ravel()], axis=-1)


def approximate_residual(basis: CorrectorBasis, positions, velocities, circulations, i: int,
                         tau: float, kappa_eta0: float, gamma: float = 0.5, alpha_cut: float = 0.5,
                         rmax: float = 8.0, ntheta: int = 48, phi: float | None = None) -> ResidualReport:
    """Residual of G + k phi w_{i,a} in the rescaled vortex equation for vortex i.

    positions/velocities are the viscous-system y_j(tau), dy_j/dtau. The sup is
    taken over |X| <= rmax with weight e^{gamma |X|^2/4}.
    """
    g = basis.grid
    ke = kappa_eta0
    y = np.asarray(positions, dtype=float)
    v = np.asarray(velocities, dtype=float)
    al = np.asarray(circulations, dtype=float)
    N = len(al)
    if phi is None:
        phi = float(cutoff(tau, ke, alpha_cut))
    dphi = float(cutoff_derivative(tau, ke, alpha_cut))

    def amps(k, deriv=False):
        tot = {2: 0j, 3: 0j}
        for j in range(N):
            if j == k:
                continue
            A = (forcing_amplitudes_dtau(y[k] - y[j], v[k] - v[j], tau, ke, al[j]) if deriv
                 else forcing_amplitudes(y[k] - y[j], tau, ke, al[j]))
            for n in A:
                tot[n] += A[n]
        return tot

    w = [basis.field(amps(k)) for k in range(N)]
    wi = w[i]
    dw = basis.field(amps(i, True))
    X, sel, _ = _polar_points(g, ntheta, rmax)
    on = lambda f: _on_nodes(f, sel, ntheta)
    gradG = -0.5 * X * oseen_profile(X)[:, None]
    grad_w = _grad_on_nodes(wi, sel, ntheta)
    ui = velocity(wi).evaluate(X)
    uG = oseen_velocity(X)

    Ri = np.zeros(len(X))
    Ti = T_eval(X, amps(i))
    cross_G = np.zeros(len(X))
    cross_w = np.zeros(len(X))
    shear_w = np.zeros(len(X))
    s = np.sqrt(ke * np.exp(tau))
    for j in range(N):
        if j == i:
            continue
        eta = (y[i] - y[j]) / s
        Ri += R_exact(X, y[i] - y[j], tau, ke, al[j])
        uj = velocity(w[j]).evaluate(X + eta)
        cross_G += al[j] * np.sum(uj * gradG, axis=-1)
        cross_w += al[j] * np.sum(uj * grad_w, axis=-1)
        shear_w += al[j] * np.sum((oseen_velocity(X + eta) - oseen_velocity(eta)) * grad_w, axis=-1)
    lin = ke * (on(dw) - on(op_L_apply(wi))) + al[i] * on(op_Lambda_apply(wi))
    self_nl = al[i] * np.sum(ui * grad_w, axis=-1)
    terms = {
        "time_and_L": ke * (on(dw) - on(op_L_apply(wi))),
        "Lambda_plus_T": al[i] * on(op_Lambda_apply(wi)) + Ti,
        "S": Ri - Ti,
        "coupling_G": cross_G,
        "coupling_w": ke * cross_w,
        "shear_w": shear_w,
        "self_nl": ke * self_nl,
        "cutoff_rate": ke * dphi * on(wi),
    }
    total = (Ri + ke * dphi * on(wi) + phi * (lin + shear_w + cross_G)
             + phi**2 * ke * (self_nl + cross_w))
    del uG
    wt = np.exp(gamma * np.sum(X**2, axis=-1) / 4.0)
    sup = float(np.max(np.abs(total) * wt))
    term_sups = {k: float(np.max(np.abs(t) * wt)) for k, t in terms.items()}
    return ResidualReport(tau, ke, phi, sup, sup / ke, gamma, term_sups, X, total)


# ---------------------------------------------------------------- NS comparison

@dataclass
class ExpansionReport:
    remainder_with_corrector: float
    remainder_without: float
    scale: float
    rcut: float


def expansion_check(omega_i, x_coords, center, t: float, kappa_eta0: float,
                    w: PolarField | None = None, phi: float = 1.0, rcut: float = 6.0,
                    h: float | None = None) -> ExpansionReport:
    """L^2_p norms of bar-omega_i - G - k phi w and bar-omega_i - G over |X| <= rcut.

    omega_i is the unit-mass vortex field on grid nodes (X, Y) = x_coords; the
    rescaling uses s = sqrt(k (t + 1)) about the given center.
    """
    Xg, Yg = x_coords
    s = np.sqrt(kappa_eta0 * (t + 1.0))
    P = np.stack([(Xg - center[0]) / s, (Yg - center[1]) / s], axis=-1)
    r2 = np.sum(P**2, axis=-1)
    sel = r2 <= rcut**2
    if not np.any(sel):
        raise ValueError("no grid nodes inside the rescaled disc")
    if h is None:
        h = Xg[1, 0] - Xg[0, 0]
    dX = (h / s) ** 2
    bar = s**2 * np.asarray(omega_i)[sel]
    Xs = P[sel]
    base = bar - oseen_profile(Xs)
    p = np.exp(r2[sel] / 4.0)
    without = np.sqrt(np.sum(base**2 * p) * dX)
    if w is None:
        return ExpansionReport(without, without, s, rcut)
    corr = base - kappa_eta0 * phi * w.evaluate(Xs)
    with_c = np.sqrt(np.sum(corr**2 * p) * dX)
    return ExpansionReport(with_c, without, s, rcut)
