"""Biot-Savart kernel, Oseen profile and grid velocity recovery."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft

TWO_PI = 2.0 * np.pi


class SingularPointError(ValueError):
    pass


class GridConfigError(ValueError):
    pass


def perp(x):
    x = np.asarray(x, dtype=float)
    return np.stack([-x[..., 1], x[..., 0]], axis=-1)


def kb_eval(x):
    """K_B(x) = x^perp / (2 pi |x|^2); works on (..., 2) arrays."""
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    if np.any(r2 == 0.0):
        raise SingularPointError("Biot-Savart kernel evaluated at x = 0")
    return perp(x) / (TWO_PI * r2[..., None])


def _one_minus_exp_over_r2(r2):
    # (1 - exp(-r2/4)) / r2, with the series near zero
    r2 = np.asarray(r2, dtype=float)
    out = np.empty_like(r2)
    small = r2 < 1e-8
    out[small] = 0.25 - r2[small] / 32.0
    rs = r2[~small]
    out[~small] = -np.expm1(-rs / 4.0) / rs
    return out


def oseen_profile(X):
    """Unit-mass Gaussian G(X) = exp(-|X|^2/4)/(4 pi)."""
    X = np.asarray(X, dtype=float)
    return np.exp(-np.sum(X * X, axis=-1) / 4.0) / (4.0 * np.pi)


def oseen_velocity(X):
    """Velocity u^G of the unit Oseen vortex; u^G(0) = 0."""
    X = np.asarray(X, dtype=float)
    r2 = np.sum(X * X, axis=-1)
    return perp(X) * (_one_minus_exp_over_r2(r2) / TWO_PI)[..., None]


# ---------------------------------------------------------------- torus kernel

def _wrap(x, L):
    return x - L * np.floor(x / L + 0.5)


def torus_kernel(x, L: float, images: int = 6):
    """Velocity kernel of a unit point vortex on the L-periodic torus.

    Includes the uniform compensating background, so it is the kernel that
    matches the spectral inversion with the zero mode removed.
    """
    x = np.asarray(x, dtype=float)
    k = TWO_PI / L
    px = _wrap(x[..., 0], L)
    py = _wrap(x[..., 1], L)
    skx = np.sin(k * px)
    ckx = np.cos(k * px)
    s2 = np.sin(0.5 * k * px) ** 2
    gx = np.zeros_like(px)
    gy = np.sign(py) / (2.0 * L) - py / L**2
    for m in range(-images, images + 1):
        Y = py - m * L
        den = 2.0 * L * (2.0 * np.sinh(0.5 * k * Y) ** 2 + 2.0 * s2)
        with np.errstate(divide="ignore", invalid="ignore"):
            gx = gx + skx / den
            gy = gy + np.sign(Y) * (ckx - np.exp(-k * np.abs(Y))) / den
    if np.any(~np.isfinite(gx)) or np.any(~np.isfinite(gy)):
        raise SingularPointError("torus kernel evaluated on a lattice point")
    return np.stack([-gy, gx], axis=-1)


# ---------------------------------------------------------------- grid fields

@dataclass(frozen=True)
class PeriodicField:
    """Values on the n x n periodic box [-L/2, L/2)^2, x_i = i h - L/2.

    values has shape (n, n) for scalars or (2, n, n) for vectors; axis -2 is x.
    """
    L: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim not in (2, 3) or v.shape[-1] != v.shape[-2] or v.shape[-1] == 0:
            raise GridConfigError(f"bad grid shape {v.shape}")
        n = v.shape[-1]
        if n & (n - 1):
            raise GridConfigError("grid size must be a power of two")
        if not np.all(np.isfinite(v)):
            raise GridConfigError("non-finite grid values")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[-1]

    @property
    def h(self) -> float:
        return self.L / self.n

    def coords(self):
        return grid_coords(self.n, self.L)

    def integral(self):
        return self.values.sum(axis=(-2, -1)) * self.h**2


def grid_coords(n: int, L: float):
    x = np.arange(n) * (L / n) - L / 2
    return np.meshgrid(x, x, indexing="ij")


def wavenumbers(n: int, L: float):
    """Angular wavenumbers for rfft2 layout."""
    kx = fft.fftfreq(n, d=L / n) * TWO_PI
    ky = fft.rfftfreq(n, d=L / n) * TWO_PI
    KX, KY = np.meshgrid(kx, ky, indexing="ij")
    return KX, KY


def spectral_velocity(what, n: int, L: float):
    """u_hat = i k^perp psi_hat with -|k|^2 psi_hat = w_hat, zero mode dropped."""
    KX, KY = wavenumbers(n, L)
    k2 = KX**2 + KY**2
    k2[0, 0] = 1.0
    psi = -what / k2
    psi[0, 0] = 0.0
    return -1j * KY * psi, 1j * KX * psi


def velocity_from_vorticity(w: PeriodicField) -> PeriodicField:
    if w.values.ndim != 2:
        raise GridConfigError("scalar vorticity expected")
    n, L = w.n, w.L
    uh, vh = spectral_velocity(fft.rfft2(w.values), n, L)
    u = fft.irfft2(uh, s=(n, n))
    v = fft.irfft2(vh, s=(n, n))
    return PeriodicField(L, np.stack([u, v]))


def spectral_divergence(u: PeriodicField):
    KX, KY = wavenumbers(u.n, u.L)
    d = 1j * KX * fft.rfft2(u.values[0]) + 1j * KY * fft.rfft2(u.values[1])
    return fft.irfft2(d, s=(u.n, u.n))


def spectral_curl(u: PeriodicField):
    KX, KY = wavenumbers(u.n, u.L)
    c = 1j * KX * fft.rfft2(u.values[1]) - 1j * KY * fft.rfft2(u.values[0])
    return fft.irfft2(c, s=(u.n, u.n))


# ---------------------------------------------------------------- elliptic check

@dataclass
class EllipticReport:
    u_sup: float
    w_L4_L43: float
    w_L1_Linf: float
    ratio_L4: float | None
    ratio_L1: float | None
    weighted_u_sup: float | None = None
    weighted_w_L4_L43: float | None = None
    ratio_weighted: float | None = None
    mean_zero: bool = False


def _lp(f, p, dA):
    return (np.sum(np.abs(f) ** p) * dA) ** (1.0 / p)


def _ratio(a, b):
    return None if b == 0.0 else a / b


def elliptic_bound_check(w: PeriodicField, mean_tol: float = 1e-10) -> EllipticReport:
    """Norm ratios for the velocity estimates; intersections use the sum norm."""
    u = velocity_from_vorticity(w).values
    dA = w.h**2
    f = w.values
    speed = np.hypot(u[0], u[1])
    u_sup = float(speed.max())
    n4 = _lp(f, 4.0, dA) + _lp(f, 4.0 / 3.0, dA)
    n1 = _lp(f, 1.0, dA) + float(np.abs(f).max())
    rep = EllipticReport(u_sup, n4, n1, _ratio(u_sup, n4), _ratio(u_sup, n1))
    if n1 == 0.0:
        return rep
    mass = abs(float(f.sum() * dA))
    if mass <= mean_tol * _lp(f, 1.0, dA):
        X, Y = w.coords()
        wt = 1.0 + X**2 + Y**2
        rep.mean_zero = True
        rep.weighted_u_sup = float((wt * speed).max())
        rep.weighted_w_L4_L43 = _lp(wt * f, 4.0, dA) + _lp(wt * f, 4.0 / 3.0, dA)
        rep.ratio_weighted = _ratio(rep.weighted_u_sup, rep.weighted_w_L4_L43)
    return rep
