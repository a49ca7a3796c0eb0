"""Prescribed-mass Dirichlet solves on rasterized ellipsoids.

Unknowns are interior nodal values; each interior node must own an
Alexandrov cell of prescribed volume (Lebesgue density sampled at the
node times the lattice cell volume, plus any atoms snapped to nodes).
The default method is a damped Newton iteration on the cell-volume map,
whose derivative in a neighbor value is dual-facet area over edge length.
A diagonal-relaxation ``sweep`` method is kept for cross-checks on tiny
grids; both converge to the same discrete solution.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .discrete_ma import ConvexNodalFunction, Lattice, ma_jacobian_weights
from .measure_model import EllipsoidDomain, MeasureData, QuadraticAsymptote

logger = logging.getLogger(__name__)

__all__ = [
    "DirichletProblem",
    "SolveReport",
    "Infeasible",
    "node_targets",
    "solve",
    "comparison_check",
]


class Infeasible(ValueError):
    """Interior mass exceeds what the boundary data can support."""


@dataclass(frozen=True)
class DirichletProblem:
    domain: EllipsoidDomain
    boundary: QuadraticAsymptote | object   # callable x -> value on ghost nodes
    measure: MeasureData
    spacing: float
    gradient_box: np.ndarray | None = None

    def build(self):
        lat = Lattice.rasterize(self.domain, self.spacing)
        pts = lat.points
        vals = np.zeros(len(pts))
        vals[~lat.interior] = np.asarray(self.boundary(pts[~lat.interior]), dtype=float)
        box = self.gradient_box
        if box is None and isinstance(self.boundary, QuadraticAsymptote):
            box = self.boundary.gradient_box(self.domain)
        u = ConvexNodalFunction(
            n=lat.n, nodes=pts, values=vals,
            boundary=~lat.interior, gradient_box=box, lattice=lat,
        )
        m = node_targets(lat, self.measure)
        return u, m


def node_targets(lattice: Lattice, measure: MeasureData) -> np.ndarray:
    """Per-node masses on the full node set (zero at ghosts).

    Absolutely continuous part: target density sampled at the node times
    the cell volume. Atoms snap to the nearest interior node; an atom
    more than one cell away from any interior node is an error.
    """
    if measure.n != lattice.n:
        raise ValueError("dimension mismatch between measure and lattice")
    m = np.zeros(len(lattice.points))
    inner = lattice.interior
    m[inner] = lattice.cell_volume * measure.target_density_at(lattice.points[inner])
    if measure.atoms:
        idx_inner = np.flatnonzero(inner)
        pts = lattice.points[inner]
        for atom in measure.atoms:
            d2 = ((pts - atom.location) ** 2).sum(axis=1)
            k = int(np.argmin(d2))
            if d2[k] > (lattice.spacing * 1.001) ** 2 * lattice.n:
                raise ValueError(f"atom at {atom.location} is not inside the lattice")
            if d2[k] > 1e-18:
                logger.info("atom snapped to nearest node, offset %.3g", d2[k] ** 0.5)
            m[idx_inner[k]] += atom.mass
    return m


@dataclass
class SolveReport:
    method: str
    iterations: int
    max_residual: float
    sup_change: float
    converged: bool
    reason: str
    wall_time: float
    tol_mass: float
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "iterations": self.iterations,
            "max_residual": self.max_residual,
            "sup_change": self.sup_change,
            "converged": self.converged,
            "reason": self.reason,
            "tol_mass": self.tol_mass,
        }


def _gradient_budget(u: ConvexNodalFunction) -> float:
    """Volume of the declared gradient box; infinite when none is declared.

    Cells live inside the box by contract, so total interior mass beyond
    its volume cannot be realized by any nodal function.
    """
    if u.gradient_box is None:
        return float("inf")
    lo, hi = u.gradient_box
    return float(np.prod(hi - lo))


def _paraboloid_start(u: ConvexNodalFunction) -> np.ndarray:
    """Initial values: least-squares quadratic through the boundary data,
    shifted down so every boundary point sits on or above it."""
    b = u.boundary
    x = u.nodes[b]
    n = u.n
    cols = [x[:, a] * x[:, c] for a in range(n) for c in range(a, n)]
    A = np.column_stack(cols + [x[:, a] for a in range(n)] + [np.ones(len(x))])
    coef, *_ = np.linalg.lstsq(A, u.values[b], rcond=None)

    def q(pts):
        cc = [pts[:, a] * pts[:, c] for a in range(n) for c in range(a, n)]
        B = np.column_stack(cc + [pts[:, a] for a in range(n)] + [np.ones(len(pts))])
        return B @ coef

    slack = max(0.0, float((q(x) - u.values[b]).max()))
    vals = u.values.copy()
    vals[~b] = q(u.nodes[~b]) - slack
    return vals


def _interior_system(u: ConvexNodalFunction, active_idx: np.ndarray):
    ei, ej, w, asm = ma_jacobian_weights(u)
    m = len(u.nodes)
    col = np.full(m, -1, dtype=int)
    col[active_idx] = np.arange(len(active_idx))
    diag = np.zeros(m)
    np.add.at(diag, ei, w)
    np.add.at(diag, ej, w)
    both = (col[ei] >= 0) & (col[ej] >= 0)
    rows = np.concatenate([col[ei[both]], col[ej[both]], np.arange(len(active_idx))])
    cols = np.concatenate([col[ej[both]], col[ei[both]], np.arange(len(active_idx))])
    vals = np.concatenate([w[both], w[both], -diag[active_idx]])
    J = sp.coo_matrix((vals, (rows, cols)), shape=(len(active_idx),) * 2).tocsc()
    return J, asm


def _pin_passive(u: ConvexNodalFunction, passive_idx: np.ndarray) -> ConvexNodalFunction:
    if len(passive_idx) == 0:
        return u
    keep = np.ones(len(u.nodes), bool)
    keep[passive_idx] = False
    sub = ConvexNodalFunction(
        n=u.n, nodes=u.nodes[keep], values=u.values[keep],
        boundary=u.boundary[keep],
    )
    vals = u.values.copy()
    vals[passive_idx] = sub.envelope_at(u.nodes[passive_idx])
    return u.with_values(vals)


def solve(
    problem: DirichletProblem | tuple,
    method: str = "newton",
    tol_mass: float | None = None,
    max_iter: int = 60,
    max_sweeps: int = 20000,
    lam_damp: float = 0.7,
    sup_change_tol: float = 1e-10,
    init_values: np.ndarray | None = None,
):
    """Solve for the nodal function matching the prescribed cell masses.

    Returns ``(u, report)``. Non-convergence is reported, not raised: the
    best iterate comes back with ``report.converged`` False. A target mass
    beyond the boundary data's subgradient budget raises ``Infeasible``.
    """
    if isinstance(problem, DirichletProblem):
        u0, m = problem.build()
    else:
        u0, m = problem
    t0 = time.perf_counter()
    if tol_mass is None:
        cell = u0.lattice.cell_volume if u0.lattice is not None else 1.0
        tol_mass = 1e-8 * cell
    inner = u0.interior
    budget = _gradient_budget(u0)
    total = float(m[inner].sum())
    if total > budget * (1 + 1e-9):
        raise Infeasible(
            f"interior mass {total:.6g} exceeds gradient-box budget {budget:.6g}"
        )
    active_idx = np.flatnonzero(inner & (m > 0))
    passive_idx = np.flatnonzero(inner & (m <= 0))

    if init_values is not None:
        vals = np.asarray(init_values, dtype=float).copy()
        vals[~inner] = u0.values[~inner]    # boundary data is not negotiable
        u = u0.with_values(vals)
    else:
        u = u0.with_values(_paraboloid_start(u0))
    u = _pin_passive(u, passive_idx)

    if method == "sweep":
        return _solve_sweep(
            u, m, active_idx, passive_idx, tol_mass, max_sweeps, lam_damp,
            sup_change_tol, t0,
        )
    if method != "newton":
        raise ValueError(f"unknown method {method!r}")

    best = (np.inf, u.values.copy())
    history = []
    sup_change = np.inf
    reason = "max_iter"
    it = 0
    while it < max_iter:
        it += 1
        J, asm = _interior_system(u, active_idx)
        F = asm.volumes[active_idx] - m[active_idx]
        res = float(np.abs(F).max())
        history.append(res)
        if res < best[0]:
            best = (res, u.values.copy())
        if res <= tol_mass:
            reason = "converged"
            break
        dead = np.asarray(J.diagonal() == 0.0).ravel()
        if dead.any():
            # nodes that fell off the hull: nudge below the envelope to revive
            vals = u.values.copy()
            ids = active_idx[dead]
            vals[ids] = u.envelope_at(u.nodes[ids]) - 1e-3 * np.ptp(u.values)
            u = u.with_values(vals)
            continue
        delta = spsolve(J, -F)
        vol_now = asm.volumes[active_idx]
        floor = 0.5 * min(float(vol_now.min()), float(m[active_idx].min()))
        t = 1.0
        accepted = False
        norm0 = float(np.linalg.norm(F))
        for _ in range(25):
            vals = u.values.copy()
            vals[active_idx] += t * delta
            trial = u.with_values(vals)
            trial = _pin_passive(trial, passive_idx)
            t_asm = ma_jacobian_weights(trial)[3]
            tv = t_asm.volumes[active_idx]
            tF = tv - m[active_idx]
            if float(tv.min()) > floor and float(np.linalg.norm(tF)) <= (1 - 0.25 * t) * norm0:
                sup_change = float(np.abs(t * delta).max())
                u = trial
                accepted = True
                break
            t *= lam_damp
        if not accepted:
            reason = "line_search_stalled"
            break
    else:
        it = max_iter

    J, asm = _interior_system(u, active_idx)
    res = float(np.abs(asm.volumes[active_idx] - m[active_idx]).max())
    if res < best[0]:
        best = (res, u.values.copy())
    # mass residual is the criterion; a stalled line search at tolerance
    # just means the floating-point floor was reached
    converged = best[0] <= tol_mass
    if converged:
        reason = "converged"
    u = u.with_values(best[1])
    u.convexified = True
    report = SolveReport(
        method="newton",
        iterations=it,
        max_residual=best[0],
        sup_change=sup_change,
        converged=converged,
        reason=reason,
        wall_time=time.perf_counter() - t0,
        tol_mass=tol_mass,
        history=history,
    )
    if not converged:
        logger.warning("newton did not converge: %s (residual %.3g)", reason, best[0])
    return u, report


def _solve_sweep(u, m, active_idx, passive_idx, tol_mass, max_sweeps, lam_damp,
                 sup_change_tol, t0):
    """Damped diagonal relaxation; the reference scheme for cross-checks."""
    history = []
    sup_change = np.inf
    res = np.inf
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        ei, ej, w, asm = ma_jacobian_weights(u)
        diag = np.zeros(len(u.nodes))
        np.add.at(diag, ei, w)
        np.add.at(diag, ej, w)
        F = asm.volumes[active_idx] - m[active_idx]
        res = float(np.abs(F).max())
        if sweeps % 200 == 0:
            history.append(res)
        if res <= tol_mass and sup_change <= sup_change_tol:
            break
        d = diag[active_idx]
        d[d == 0] = np.inf
        # raising a value shrinks its cell, so an oversized cell moves up
        step = lam_damp * F / d
        vals = u.values.copy()
        vals[active_idx] += step
        sup_change = float(np.abs(step).max())
        u = _pin_passive(u.with_values(vals), passive_idx)
    converged = res <= tol_mass and sup_change <= sup_change_tol
    u.convexified = True
    report = SolveReport(
        method="sweep",
        iterations=sweeps,
        max_residual=res,
        sup_change=sup_change,
        converged=converged,
        reason="converged" if converged else "max_sweeps",
        wall_time=time.perf_counter() - t0,
        tol_mass=tol_mass,
        history=history,
    )
    return u, report


def comparison_check(u_low: ConvexNodalFunction, u_high: ConvexNodalFunction, tol: float = 0.0):
    """Pointwise dominance audit on a shared node set."""
    if u_low.nodes.shape != u_high.nodes.shape or not np.allclose(
        u_low.nodes, u_high.nodes
    ):
        raise ValueError("comparison requires identical node sets")
    gap = u_low.values - u_high.values
    worst = int(np.argmax(gap))
    return {
        "ok": bool(gap.max() <= tol),
        "max_violation": float(max(gap.max(), 0.0)),
        "node": worst,
    }
