"""Radial Monge-Ampere machinery.

For radial data the subgradient image of the centered ball of radius r is
the ball of radius g'(r), so the mass balance reads w_n g'(r)^n = M(r) and
everything reduces to one-dimensional quadrature. The two closed-form
profiles evaluated here are the isolated-singularity solution

    W_a(x) = int_0^{|x|} (s^n + a^n)^{1/n} ds

and the hyperplane-obstacle solution

    W_a*(x) = int_0^{|x|} max(s^n - a^n, 0)^{1/n} ds,

Legendre conjugates of one another.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .specialfn import check_dimension, sharp_constant, unit_ball_volume

__all__ = [
    "RadialProfile",
    "RadialMass",
    "solve_radial",
    "eval_W",
    "eval_W_star",
    "legendre_transform",
    "asymptote_gap",
    "make_radial_grid",
]


@dataclass(frozen=True)
class RadialProfile:
    """Convex radial function g on a grid of radii, with slopes.

    grid[0] must be 0 and g(0) = 0; the asymptote offset, when known, is
    carried separately in ``asymptote_limit`` rather than folded into g.
    """

    n: int
    grid: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    # exact limit of g(r) - r^2/2 as r -> inf, when analytically known
    asymptote_limit: float | None = field(default=None, compare=False)

    def __post_init__(self):
        check_dimension(self.n)
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        slopes = np.asarray(self.slopes, dtype=float)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "slopes", slopes)
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("grid must hold at least two radii")
        if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
            raise ValueError("grid must start at 0 and increase strictly")
        if values.shape != grid.shape or slopes.shape != grid.shape:
            raise ValueError("values and slopes must match the grid")
        if slopes[0] < -1e-15 or np.any(np.diff(slopes) < -1e-12):
            raise ValueError("slopes must be nonnegative and nondecreasing")
        if abs(values[0]) > 1e-15:
            raise ValueError("profiles are normalized to g(0) = 0")
        # chord test: secant slopes must be nondecreasing
        secants = np.diff(values) / np.diff(grid)
        if np.any(np.diff(secants) < -1e-9 * max(1.0, float(slopes[-1]))):
            raise ValueError("values fail the convexity chord test")

    def __call__(self, r):
        """Evaluate g by monotone cubic Hermite interpolation on the grid."""
        r = np.asarray(r, dtype=float)
        out = _hermite_eval(self.grid, self.values, self.slopes, np.clip(r, 0.0, None))
        # linear continuation beyond the grid keeps convexity
        beyond = r > self.grid[-1]
        if np.any(beyond):
            out = np.where(
                beyond,
                self.values[-1] + self.slopes[-1] * (r - self.grid[-1]),
                out,
            )
        return out if out.ndim else float(out)

    def slope(self, r):
        r = np.asarray(r, dtype=float)
        out = np.interp(r, self.grid, self.slopes)
        return out if out.ndim else float(out)

    def to_json(self) -> str:
        return json.dumps(
            {
                "n": self.n,
                "radii": self.grid.tolist(),
                "values": self.values.tolist(),
                "slopes": self.slopes.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "RadialProfile":
        doc = json.loads(text)
        return cls(
            n=doc["n"],
            grid=np.asarray(doc["radii"]),
            values=np.asarray(doc["values"]),
            slopes=np.asarray(doc["slopes"]),
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["r", "g", "dg"])
            for r, g, s in zip(self.grid, self.values, self.slopes):
                writer.writerow([repr(r), repr(g), repr(s)])


def _hermite_eval(x, y, dy, r):
    idx = np.clip(np.searchsorted(x, r, side="right") - 1, 0, len(x) - 2)
    h = x[idx + 1] - x[idx]
    t = (r - x[idx]) / h
    h00 = (1 + 2 * t) * (1 - t) ** 2
    h10 = t * (1 - t) ** 2
    h01 = t * t * (3 - 2 * t)
    h11 = t * t * (t - 1)
    return h00 * y[idx] + h10 * h * dy[idx] + h01 * y[idx + 1] + h11 * h * dy[idx + 1]


@dataclass(frozen=True)
class RadialMass:
    """Cumulative mass M(r) of the full target measure on centered balls."""

    n: int
    mass_of_ball: object  # callable r -> M(r), vectorized

    def __call__(self, r):
        return self.mass_of_ball(np.asarray(r, dtype=float))

    @classmethod
    def lebesgue(cls, n: int) -> "RadialMass":
        w_n = unit_ball_volume(n).value
        return cls(n=n, mass_of_ball=lambda r: w_n * r ** n)

    @classmethod
    def lebesgue_plus_atom(cls, n: int, a: float) -> "RadialMass":
        w_n = unit_ball_volume(n).value
        return cls(n=n, mass_of_ball=lambda r: w_n * (r ** n + a ** n))

    @classmethod
    def lebesgue_outside_ball(cls, n: int, a: float) -> "RadialMass":
        w_n = unit_ball_volume(n).value
        return cls(n=n, mass_of_ball=lambda r: w_n * np.maximum(r ** n - a ** n, 0.0))


def make_radial_grid(
    r_max: float, K: int, inner: float = 0.0, knot: float | None = None
) -> np.ndarray:
    """Grid on [0, r_max], geometric near 0 to resolve a conical point.

    ``inner`` is the radius of the feature to resolve (e.g. the singularity
    scale a); below it the spacing shrinks geometrically, above it the grid
    is uniform. inner = 0 gives a plain uniform grid.

    ``knot`` marks an interior radius where the slope behaves like
    (r - knot)^{1/n}: the first cell past it gets a cubically graded mesh,
    without which the trapezoid rule loses O(h^{4/3}) there and the error
    pollutes every value downstream. When set, ``inner`` is ignored.
    """
    if r_max <= 0 or K < 2:
        raise ValueError("need r_max > 0 and K >= 2")
    if knot is not None and 0.0 < knot < r_max:
        k_flat = max(6, K // 8)
        m = max(32, K // 16)
        k_out = max(K - k_flat - m, 8)
        head = np.linspace(0.0, knot, k_flat + 1)
        H = (r_max - knot) / (k_out + 1)
        sub = knot + H * (np.arange(1, m + 1, dtype=float) / m) ** 3
        tail = np.linspace(knot + H, r_max, k_out + 1)[1:]
        return np.concatenate([head, sub, tail])
    if inner <= 0 or inner >= r_max:
        return np.linspace(0.0, r_max, K + 1)
    k_in = max(8, K // 4)
    k_out = K - k_in
    # geometric refinement toward 0: spacing ratio ~1.15 capped
    ratio = min(1.15, (r_max / inner) ** (1.0 / max(k_in, 1)))
    steps = ratio ** np.arange(k_in, dtype=float)
    inner_grid = inner * (np.cumsum(steps) / steps.sum())
    outer_grid = np.linspace(inner, r_max, k_out + 1)[1:]
    return np.concatenate([[0.0], inner_grid, outer_grid])


# Gauss-Legendre nodes and weights on [0, 1]
_GL_NODES = 0.5 + 0.5 * np.array(
    [-0.8611363115940526, -0.3399810435848563, 0.3399810435848563, 0.8611363115940526]
)
_GL_WEIGHTS = 0.5 * np.array(
    [0.3478548451374538, 0.6521451548625461, 0.6521451548625461, 0.3478548451374538]
)


def solve_radial(
    mass: RadialMass, K: int, r_max: float, inner: float = 0.0, knot: float | None = None
) -> RadialProfile:
    """Exact radial solve: g'(r) = (M(r)/w_n)^{1/n}.

    Values come from per-cell Gauss quadrature of the slope; the mass
    callable is defined at arbitrary radii, so nothing forces the value
    integral down to the trapezoid rule's O(h^2).
    """
    n = mass.n
    w_n = unit_ball_volume(n).value
    grid = make_radial_grid(r_max, K, inner=inner, knot=knot)
    M = np.asarray(mass(grid), dtype=float)
    if np.any(M < -1e-12) or np.any(np.diff(M) < -1e-10 * max(1.0, M[-1])):
        raise ValueError("cumulative mass must be nonnegative and nondecreasing")
    slopes = (np.maximum(M, 0.0) / w_n) ** (1.0 / n)
    xl, h = grid[:-1], np.diff(grid)
    cell = np.zeros_like(h)
    for t, wgt in zip(_GL_NODES, _GL_WEIGHTS):
        s = (np.maximum(np.asarray(mass(xl + t * h), dtype=float), 0.0) / w_n) ** (1.0 / n)
        cell += wgt * s
    values = np.concatenate([[0.0], np.cumsum(cell * h)])
    return RadialProfile(n=n, grid=grid, values=values, slopes=slopes)


def eval_W(n: int, a: float, r: float) -> float:
    """Isolated-singularity profile, adaptive quadrature to ~1e-10."""
    check_dimension(n)
    if a < 0 or r < 0:
        raise ValueError("a and r must be nonnegative")
    if r == 0.0:
        return 0.0
    if a == 0.0:
        return 0.5 * r * r
    # integrate the excess over the pure-quadratic part; exact for the rest
    val, _ = quad(_w_excess, 0.0, r, args=(n, a), epsabs=1e-12, epsrel=1e-12, limit=200)
    return 0.5 * r * r + val


def _w_excess(s: float, n: int, a: float) -> float:
    # (s^n + a^n)^{1/n} - s, stable for s >> a
    if s < a:
        return (s ** n + a ** n) ** (1.0 / n) - s
    if s == 0.0:
        return a
    return s * math.expm1(math.log1p((a / s) ** n) / n)


def eval_W_star(n: int, a: float, r: float) -> float:
    """Hyperplane-obstacle profile; zero on [0, a]."""
    check_dimension(n)
    if a < 0 or r < 0:
        raise ValueError("a and r must be nonnegative")
    if r <= a:
        return 0.0
    if a == 0.0:
        return 0.5 * r * r
    val, _ = quad(
        lambda s: (s ** n - a ** n) ** (1.0 / n),
        a,
        r,
        epsabs=1e-12,
        epsrel=1e-12,
        limit=200,
    )
    return val


def asymptote_gap(n: int, a: float, r: float) -> float:
    """W_a(r) - r^2/2; tends to sharp_constant(n) * a^2 as r grows."""
    check_dimension(n)
    if r < 0:
        raise ValueError("r must be nonnegative")
    if a == 0.0:
        return 0.0
    if r == 0.0:
        return 0.0
    val, _ = quad(_w_excess, 0.0, r, args=(n, a), epsabs=1e-12, epsrel=1e-12, limit=200)
    return val


def asymptote_value(n: int, a: float) -> float:
    """The full-line limit of asymptote_gap: sharp_constant(n) * a^2."""
    return sharp_constant(n).value * a * a


def legendre_transform(p: RadialProfile) -> RadialProfile:
    """Discrete convex conjugate g*(s) = sup_r (r s - g(r)).

    Returned on a uniform slope grid over [g'(0), g'(r_max)], shifted so the
    dual variable starts at 0 when g'(0) = 0. For a profile with g'(0) = a > 0
    the conjugate is constant 0 on [0, a]; that plateau is included.
    """
    if not isinstance(p, RadialProfile):
        raise TypeError("expected a RadialProfile")
    r, g = p.grid, p.values
    s_lo, s_hi = float(p.slopes[0]), float(p.slopes[-1])
    if not s_hi > 0:
        raise ValueError("degenerate slope range")
    K = len(r) - 1
    s_grid = np.linspace(0.0, s_hi, K + 1)
    # sup over grid radii; argmax is monotone in s for convex g
    dual = np.empty_like(s_grid)
    arg = np.empty_like(s_grid)
    j = 0
    for i, s in enumerate(s_grid):
        while j + 1 < len(r) and s * r[j + 1] - g[j + 1] >= s * r[j] - g[j]:
            j += 1
        dual[i] = s * r[j] - g[j]
        arg[i] = r[j]
    if s_lo > 0:
        # inside the cone of slopes below g'(0) the sup sits at r = 0
        dual[s_grid <= s_lo] = 0.0
        arg[s_grid <= s_lo] = 0.0
    dual = np.maximum(dual, 0.0)
    dual[0] = 0.0
    # enforce the chord test against roundoff before constructing
    arg = np.maximum.accumulate(arg)
    return RadialProfile(n=p.n, grid=s_grid, values=dual, slopes=arg)


def profile_W(n: int, a: float, K: int, r_max: float) -> RadialProfile:
    """W_a as a solved profile, tagged with its exact asymptote."""
    prof = solve_radial(RadialMass.lebesgue_plus_atom(n, a), K, r_max, inner=a)
    return RadialProfile(
        n=prof.n,
        grid=prof.grid,
        values=prof.values,
        slopes=prof.slopes,
        asymptote_limit=asymptote_value(n, a),
    )


def profile_W_star(n: int, a: float, K: int, r_max: float) -> RadialProfile:
    # the slope kink sits at r = a, not at the origin; grade the mesh there
    prof = solve_radial(RadialMass.lebesgue_outside_ball(n, a), K, r_max, knot=a)
    return RadialProfile(
        n=prof.n,
        grid=prof.grid,
        values=prof.values,
        slopes=prof.slopes,
        asymptote_limit=-asymptote_value(n, a),
    )
