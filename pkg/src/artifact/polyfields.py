"""Polynomial fields on R^3 with exact derivatives (oracle fields for moment identities)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as P


@dataclass(frozen=True)
class PolyField:
    coef: np.ndarray  # c[i, j, k] multiplies x^i y^j z^k

    @classmethod
    def random(cls, rng, degree: int = 3, scale: float = 1.0):
        c = rng.standard_normal((degree + 1,) * 3) * scale
        i, j, k = np.indices(c.shape)
        c[i + j + k > degree] = 0.0
        return cls(c)

    @classmethod
    def constant(cls, value: float):
        return cls(np.full((1, 1, 1), float(value)))

    def __call__(self, x):
        x = np.asarray(x, float)
        return P.polyval3d(x[..., 0], x[..., 1], x[..., 2], self.coef)

    def d(self, axis: int) -> "PolyField":
        if self.coef.shape[axis] == 1:
            return PolyField(np.zeros((1, 1, 1)))
        return PolyField(P.polyder(self.coef, axis=axis))

    def __add__(self, other):
        a, b = self.coef, other.coef
        shape = tuple(max(s, t) for s, t in zip(a.shape, b.shape))
        out = np.zeros(shape)
        out[tuple(slice(0, s) for s in a.shape)] += a
        out[tuple(slice(0, s) for s in b.shape)] += b
        return PolyField(out)

    def __neg__(self):
        return PolyField(-self.coef)

    def __sub__(self, other):
        return self + (-other)


def curl(A):
    """Divergence-free vector field curl A for a list of three PolyFields."""
    return [A[2].d(1) - A[1].d(2), A[0].d(2) - A[2].d(0), A[1].d(0) - A[0].d(1)]


def div(b, x):
    return sum(b[k].d(k)(x) for k in range(3))
