"""Signed defect measures, ellipsoid domains, and quadratic asymptotes.

The defect mu is stored decomposed: Dirac atoms (positive mass), an
absolutely-continuous density d >= 1 whose excess d - 1 is the positive
part, and a separate nonnegative field for the density of the negative
part. The two fields may not overlap, so total variation is a plain sum
with no cancellation bookkeeping.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .specialfn import check_dimension, sharp_constant, unit_ball_volume

logger = logging.getLogger(__name__)

__all__ = [
    "Atom",
    "MeasureData",
    "EllipsoidDomain",
    "QuadraticAsymptote",
    "total_variation",
    "tv_radius",
    "restrict",
    "strict_convexity_criterion",
]


@dataclass(frozen=True)
class Atom:
    location: np.ndarray
    mass: float

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.location, dtype=float))
        object.__setattr__(self, "location", loc)
        if not self.mass > 0:
            raise ValueError("atoms carry strictly positive mass")

    def radius(self, n: int) -> float:
        """The a with mass = w_n a^n."""
        return (self.mass / unit_ball_volume(n).value) ** (1.0 / n)


def _as_field(value):
    """Normalize a density spec (None | scalar | callable) to a callable."""
    if value is None:
        return None
    if callable(value):
        return value
    const = float(value)
    return lambda x: np.full(np.asarray(x).shape[:-1], const)


@dataclass(frozen=True)
class MeasureData:
    """Defect measure mu = (density - 1) L - negative_part L + sum of atoms.

    density >= 1 everywhere (its excess over Lebesgue is the a.c. positive
    part); negative_part in [0, 1] keeps the full target 1 + mu nonnegative.
    Supports of the two fields must be disjoint.
    """

    n: int
    atoms: tuple = ()
    density: object = None  # callable (m, n) -> (m,), or scalar, or None for 1
    negative_part: object = None

    def __post_init__(self):
        check_dimension(self.n)
        atoms = tuple(
            a if isinstance(a, Atom) else Atom(np.asarray(a[0]), float(a[1]))
            for a in self.atoms
        )
        for a in atoms:
            if a.location.shape != (self.n,):
                raise ValueError("atom location dimension mismatch")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "density", _as_field(self.density))
        object.__setattr__(self, "negative_part", _as_field(self.negative_part))

    def density_at(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = np.ones(x.shape[:-1]) if self.density is None else np.asarray(self.density(x), dtype=float)
        if np.any(d < 1.0 - 1e-12):
            raise ValueError("density must dominate Lebesgue (>= 1)")
        return d

    def negative_at(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.negative_part is None:
            return np.zeros(x.shape[:-1])
        nu = np.asarray(self.negative_part(x), dtype=float)
        if np.any(nu < -1e-12) or np.any(nu > 1.0 + 1e-12):
            raise ValueError("negative part density must lie in [0, 1]")
        return nu

    def target_density_at(self, x: np.ndarray) -> np.ndarray:
        """Density of the a.c. part of the full target 1 + mu."""
        d = self.density_at(x)
        nu = self.negative_at(x)
        if np.any(np.minimum(d - 1.0, nu) > 1e-9):
            raise ValueError("positive and negative densities must have disjoint supports")
        return d - nu

    def is_trivial_ac(self) -> bool:
        return self.density is None and self.negative_part is None

    def to_json(self, lattice_points: np.ndarray | None = None) -> str:
        doc = {
            "n": self.n,
            "atoms": [{"y": a.location.tolist(), "mass": a.mass} for a in self.atoms],
        }
        if lattice_points is not None:
            doc["density_grid"] = self.density_at(lattice_points).tolist()
            doc["negative_density_grid"] = self.negative_at(lattice_points).tolist()
        return json.dumps(doc)


@dataclass(frozen=True)
class EllipsoidDomain:
    """E_A(x0, rho) = {y : (y - x0)^T A (y - x0) < rho^2}, det A = 1."""

    A: np.ndarray
    center: np.ndarray
    radius: float

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        if A.shape != (center.size, center.size):
            raise ValueError("matrix and center dimensions disagree")
        if not np.allclose(A, A.T, atol=1e-12):
            raise ValueError("A must be symmetric")
        eigvals = np.linalg.eigvalsh(A)
        if eigvals[0] <= 0:
            raise ValueError("A must be positive definite")
        det = float(np.prod(eigvals))
        if abs(det - 1.0) > 1e-8:
            logger.info("rescaling ellipsoid matrix: det A = %.3e corrected to 1", det)
        if abs(det - 1.0) > 1e-16:
            A = A / det ** (1.0 / center.size)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "center", center)
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def n(self) -> int:
        return self.center.size

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Strict membership test, vectorized over leading axes."""
        x = np.asarray(x, dtype=float)
        d = x - self.center
        q = np.einsum("...i,ij,...j->...", d, self.A, d)
        return q < self.radius ** 2

    def volume(self) -> float:
        return unit_ball_volume(self.n).value * self.radius ** self.n

    def bounding_box(self) -> np.ndarray:
        """Axis-aligned box [lo, hi] containing the ellipsoid."""
        Ainv = np.linalg.inv(self.A)
        half = self.radius * np.sqrt(np.diag(Ainv))
        return np.stack([self.center - half, self.center + half])

    def to_json(self) -> str:
        return json.dumps(
            {"A": self.A.ravel().tolist(), "center": self.center.tolist(), "radius": self.radius}
        )


@dataclass(frozen=True)
class QuadraticAsymptote:
    """q(x) = x^T A x / 2 + b . x + c with det A = 1."""

    A: np.ndarray
    b: np.ndarray = None
    c: float = 0.0

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        n = A.shape[0]
        b = np.zeros(n) if self.b is None else np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.shape != (n, n) or b.shape != (n,):
            raise ValueError("shape mismatch in quadratic data")
        if not np.allclose(A, A.T, atol=1e-12):
            raise ValueError("A must be symmetric")
        eigvals = np.linalg.eigvalsh(A)
        if eigvals[0] <= 0:
            raise ValueError("A must be positive definite")
        det = float(np.prod(eigvals))
        if abs(det - 1.0) > 1e-8:
            logger.info("rescaling quadratic matrix: det A = %.3e corrected to 1", det)
        if abs(det - 1.0) > 1e-16:
            A = A / det ** (1.0 / n)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @classmethod
    def standard(cls, n: int) -> "QuadraticAsymptote":
        return cls(A=np.eye(n))

    def __call__(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        out = 0.5 * np.einsum("...i,ij,...j->...", x, self.A, x) + x @ self.b + self.c
        return out if out.ndim else float(out)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.A + self.b

    def gradient_box(self, domain: EllipsoidDomain, inflate: float = 0.1) -> np.ndarray:
        """Axis box around the gradient image of the domain, inflated.

        The gradient image of an ellipsoid is an ellipsoid; per-axis extents
        come from its support function, sup (Ax + b)_k = rho sqrt(A_k^T
        A_dom^{-1} A_k) about the image of the center.
        """
        Ainv = np.linalg.inv(domain.A)
        mid = self.gradient(domain.center)
        half = domain.radius * np.sqrt(np.einsum("ki,ij,kj->k", self.A, Ainv, self.A))
        half = half * (1.0 + inflate) + 1e-12
        return np.stack([mid - half, mid + half])

    def to_json(self) -> str:
        return json.dumps({"A": self.A.ravel().tolist(), "b": self.b.tolist(), "c": self.c})


def _ac_integral(mu: MeasureData, region: EllipsoidDomain | None, lattice) -> float:
    """Cell-rule integral of |density - 1| + negative_part over the region."""
    if mu.is_trivial_ac():
        return 0.0
    if lattice is None:
        raise ValueError(
            "a lattice is required to integrate nontrivial densities; "
            "pass the one the solver will use so the books agree"
        )
    pts = lattice.interior_points()
    w = lattice.cell_volume
    excess = mu.density_at(pts) - 1.0 + mu.negative_at(pts)
    if region is not None:
        excess = excess[region.contains(pts)]
    return float(excess.sum() * w)


def total_variation(
    mu: MeasureData,
    region: EllipsoidDomain | None = None,
    lattice=None,
) -> float:
    """|mu| of the region (all space when region is None)."""
    total = 0.0
    for atom in mu.atoms:
        if region is None or bool(region.contains(atom.location)):
            total += atom.mass
    return total + _ac_integral(mu, region, lattice)


def tv_radius(mu: MeasureData, region=None, lattice=None) -> float:
    """The a with |mu| = w_n a^n."""
    tv = total_variation(mu, region, lattice)
    return (tv / unit_ball_volume(mu.n).value) ** (1.0 / mu.n)


def restrict(mu: MeasureData, region: EllipsoidDomain) -> MeasureData:
    """mu restricted to the (open) region; densities revert to 1 outside."""
    kept = tuple(a for a in mu.atoms if bool(region.contains(a.location)))
    density = mu.density
    negative = mu.negative_part
    if density is not None:
        inner_d = density

        def density(x, _f=inner_d, _r=region):
            x = np.asarray(x, dtype=float)
            return np.where(_r.contains(x), np.asarray(_f(x), dtype=float), 1.0)

    if negative is not None:
        inner_nu = negative

        def negative(x, _f=inner_nu, _r=region):
            x = np.asarray(x, dtype=float)
            return np.where(_r.contains(x), np.asarray(_f(x), dtype=float), 0.0)

    return MeasureData(n=mu.n, atoms=kept, density=density, negative_part=negative)


def strict_convexity_criterion(atoms, A: np.ndarray) -> dict:
    """Mass-separation test: sum a_i^n < (8 d_{n,0})^{n/2} inf |dy^T A dy|^{n/2}.

    Returns the verdict and the ratio lhs/rhs (margin < 1 means satisfied).
    """
    atoms = [a if isinstance(a, Atom) else Atom(np.asarray(a[0]), float(a[1])) for a in atoms]
    if len(atoms) < 2:
        raise ValueError("the criterion compares pairs; need at least two atoms")
    A = np.asarray(A, dtype=float)
    n = atoms[0].location.size
    w_n = unit_ball_volume(n).value
    lhs = sum(a.mass / w_n for a in atoms)  # sum of a_i^n
    sep = math.inf
    for i in range(len(atoms)):
        for j in range(i + 1, len(atoms)):
            dy = atoms[i].location - atoms[j].location
            sep = min(sep, float(dy @ A @ dy))
    if sep <= 0:
        raise ValueError("coincident atom locations make the criterion vacuous")
    rhs = (8.0 * sharp_constant(n).value) ** (0.5 * n) * sep ** (0.5 * n)
    return {"satisfied": bool(lhs < rhs), "margin": lhs / rhs}
