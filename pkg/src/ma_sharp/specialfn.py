"""Dimensional constants and gamma-function plumbing.

Everything downstream compares against the sharp constant computed here, so
this module keeps two independent routes to it: the gamma-function formula
and adaptive quadrature of the defining integral.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.integrate import quad

__all__ = [
    "SharpConstant",
    "UnitBallVolume",
    "log_gamma",
    "sharp_constant",
    "sharp_constant_integral",
    "unit_ball_volume",
]


def check_dimension(n: int, minimum: int = 2) -> int:
    if not isinstance(n, (int,)) or isinstance(n, bool):
        raise TypeError(f"dimension must be an integer, got {n!r}")
    if n < minimum:
        raise ValueError(f"dimension must be >= {minimum}, got {n}")
    return n


@dataclass(frozen=True)
class SharpConstant:
    value: float
    n: int

    def __post_init__(self):
        if not (self.value > 0 and math.isfinite(self.value)):
            raise ValueError("sharp constant must be positive and finite")


@dataclass(frozen=True)
class UnitBallVolume:
    value: float
    n: int

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError("ball volume must be positive")


def log_gamma(x: float) -> float:
    """ln Gamma(x) for x > 0."""
    if not x > 0:
        raise ValueError(f"log_gamma requires a positive argument, got {x}")
    return math.lgamma(x)


def sharp_constant(n: int) -> SharpConstant:
    """The dimensional constant Gamma(1/n) Gamma((n-2)/n) / (2 n Gamma((n-1)/n)).

    Defined for n >= 3; the middle gamma argument degenerates at n = 2.
    """
    check_dimension(n, minimum=3)
    value = math.exp(
        log_gamma(1.0 / n) + log_gamma((n - 2.0) / n) - log_gamma((n - 1.0) / n)
    ) / (2.0 * n)
    return SharpConstant(value=value, n=n)


def _excess_integrand(r: float, n: int) -> float:
    # (r^n + 1)^{1/n} - r without cancellation for large r.
    if r < 1.0:
        return (r ** n + 1.0) ** (1.0 / n) - r
    return r * math.expm1(math.log1p(r ** (-n)) / n)


def sharp_constant_integral(n: int) -> float:
    """Same constant via the integral of (r^n + 1)^{1/n} - r over (0, inf).

    Independent of the gamma route; used as a consistency gate.
    """
    check_dimension(n, minimum=3)
    head, _ = quad(_excess_integrand, 0.0, 10.0, args=(n,), epsabs=1e-13, epsrel=1e-13)
    tail, _ = quad(_excess_integrand, 10.0, math.inf, args=(n,), epsabs=1e-13, epsrel=1e-13)
    return head + tail


def unit_ball_volume(n: int) -> UnitBallVolume:
    """Lebesgue measure of the unit ball, pi^{n/2} / Gamma(n/2 + 1)."""
    check_dimension(n, minimum=1)
    value = math.exp(0.5 * n * math.log(math.pi) - log_gamma(0.5 * n + 1.0))
    return UnitBallVolume(value=value, n=n)
