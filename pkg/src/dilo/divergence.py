"""f-divergence generators and their conjugate restricted to nonnegative ratios.

For a generator ``f`` the constrained conjugate is

    f*_p(x) = max_{w >= 0} w * x - f(w),

attained at ``w = max(0, f'^{-1}(x))``. The maximizer doubles as the derivative
of ``f*_p`` and as the optimal visitation ratio for a residual ``x``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels


class DomainError(ValueError):
    """Raised when a divergence routine receives a non-finite argument."""


class Kind(enum.Enum):
    PEARSON_CHI2 = "chi2"


@dataclass(frozen=True)
class FGenerator:
    kind: Kind = Kind.PEARSON_CHI2

    @classmethod
    def from_name(cls, name: str) -> "FGenerator":
        try:
            return cls(Kind(name))
        except ValueError:
            raise ValueError(f"unknown f-divergence {name!r}; available: {[k.value for k in Kind]}") from None

    def f(self, x):
        return (np.asarray(x, dtype=float) - 1.0) ** 2

    def f_prime(self, x):
        return 2.0 * (np.asarray(x, dtype=float) - 1.0)

    def f_prime_inv(self, y):
        return 0.5 * np.asarray(y, dtype=float) + 1.0

    def divergence(self, p, q) -> float:
        """D_f(p || q) = sum_x q(x) f(p(x) / q(x)) over entries with q > 0."""
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        mask = q > 0
        if np.any(p[~mask] > 0):
            return math.inf
        return float(np.sum(q[mask] * self.f(p[mask] / q[mask])))


CHI2 = FGenerator()


def _check_finite(x):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("conjugate argument must be finite")
    return arr


def _scalar_or_array(out, x):
    return float(out[0]) if np.ndim(x) == 0 else out.reshape(np.shape(x))


def ratio_from_residual(gen: FGenerator, y):
    """Optimal ratio ``max(0, f'^{-1}(y))`` for residual ``y``."""
    arr = _check_finite(y)
    return _scalar_or_array(np.maximum(0.0, gen.f_prime_inv(arr)).ravel(), y)


def conjugate_p(gen: FGenerator, x):
    arr = _check_finite(x)
    if gen.kind is Kind.PEARSON_CHI2:
        val, _ = kernels.chi2_conjugate(arr)
    else:  # pragma: no cover - only chi2 is defined
        w = np.maximum(0.0, gen.f_prime_inv(arr))
        val = (w * arr - gen.f(w)).ravel()
    return _scalar_or_array(val, x)


def conjugate_p_derivative(gen: FGenerator, x):
    """d/dx f*_p(x); equal to ``ratio_from_residual`` by the envelope theorem.

    At the clamp kink the value of the clamped branch (zero) is returned.
    """
    return ratio_from_residual(gen, x)


def conjugate_p_with_derivative(gen: FGenerator, x):
    """Vectorized (f*_p(x), d f*_p / dx) in one pass."""
    arr = _check_finite(x)
    if gen.kind is Kind.PEARSON_CHI2:
        val, der = kernels.chi2_conjugate(arr)
        return val.reshape(arr.shape), der.reshape(arr.shape)
    w = np.maximum(0.0, gen.f_prime_inv(arr))  # pragma: no cover
    return w * arr - gen.f(w), w  # pragma: no cover
