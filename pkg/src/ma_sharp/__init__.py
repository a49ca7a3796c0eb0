"""Alexandrov-sense Monge-Ampere machinery at desk scale.

Numerical layers, inside out: exact radial solves, lattice cell-volume
assembly and convexification, prescribed-mass Dirichlet and plane
obstacle solvers, and expanding-domain approximants for entire solutions
with their deviation, decay, sandwich, and sharpness experiments. The
``ma-sharp`` CLI drives the experiments and writes reports.
"""

__version__ = "0.1.0"

from .measure_model import (
    Atom,
    EllipsoidDomain,
    MeasureData,
    QuadraticAsymptote,
    total_variation,
)
from .radial_core import RadialProfile, profile_W, profile_W_star, solve_radial
from .specialfn import sharp_constant, unit_ball_volume

__all__ = [
    "__version__",
    "Atom",
    "EllipsoidDomain",
    "MeasureData",
    "QuadraticAsymptote",
    "RadialProfile",
    "profile_W",
    "profile_W_star",
    "sharp_constant",
    "solve_radial",
    "total_variation",
    "unit_ball_volume",
]
