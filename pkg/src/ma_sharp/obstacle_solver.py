"""Plane-obstacle solves: prescribed mass switched off on the contact set.

The solution matches the target cell mass at free nodes, sits on the
plane at contact nodes, and owns a deficient cell there (complementary
slackness). The deficit, target minus realized mass summed over the
interior, is the total variation removed from the target measure; the
mass-matched driver tunes the plane height until the deficit hits a
requested value. Heights are relative to the supporting plane of the
boundary data with the given slope, so height zero grazes the solution
from below.

A separate radial path discretizes rotationally symmetric problems on
spherical shells, where the nodal mass identity is exact in angle; grid
and radial paths cross-validate each other in the tests.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .discrete_ma import ConvexNodalFunction, Lattice, ma_jacobian_weights
from .dirichlet_solver import (
    Infeasible,
    SolveReport,
    _gradient_budget,
    _paraboloid_start,
    node_targets,
)
from .measure_model import EllipsoidDomain, MeasureData, QuadraticAsymptote
from .radial_core import RadialProfile
from .specialfn import unit_ball_volume

logger = logging.getLogger(__name__)

__all__ = [
    "ObstacleProblem",
    "CoincidenceSet",
    "ObstacleReport",
    "solve_fixed_height",
    "solve_mass_matched",
    "obstacle_comparison",
    "RadialObstacleResult",
    "solve_radial_obstacle",
]


@dataclass(frozen=True)
class ObstacleProblem:
    domain: EllipsoidDomain
    boundary: QuadraticAsymptote | object
    measure: MeasureData
    spacing: float
    slope: np.ndarray
    gradient_box: np.ndarray | None = None

    def build(self):
        lat = Lattice.rasterize(self.domain, self.spacing)
        pts = lat.points
        vals = np.zeros(len(pts))
        vals[~lat.interior] = np.asarray(self.boundary(pts[~lat.interior]), dtype=float)
        box = self.gradient_box
        if box is None and isinstance(self.boundary, QuadraticAsymptote):
            box = self.boundary.gradient_box(self.domain)
            p = np.asarray(self.slope, dtype=float)
            box = np.stack([np.minimum(box[0], p - 0.1), np.maximum(box[1], p + 0.1)])
        u = ConvexNodalFunction(
            n=lat.n, nodes=pts, values=vals,
            boundary=~lat.interior, gradient_box=box, lattice=lat,
        )
        m = node_targets(lat, self.measure)
        return u, m

    def support_offset(self, u: ConvexNodalFunction) -> float:
        """Offset beta with x -> slope . x + beta the supporting plane of
        the boundary data over the node set."""
        p = np.asarray(self.slope, dtype=float)
        if isinstance(self.boundary, QuadraticAsymptote):
            q = self.boundary
            xstar = np.linalg.solve(q.A, p - q.b)
            return float(q(xstar[None, :])[0] - p @ xstar)
        b = u.boundary
        return float((u.values[b] - u.nodes[b] @ p).min())

    def plane_values(self, u: ConvexNodalFunction, height: float) -> np.ndarray:
        p = np.asarray(self.slope, dtype=float)
        return u.nodes @ p + self.support_offset(u) + height


@dataclass
class CoincidenceSet:
    indices: np.ndarray
    count: int
    cell_volume: float
    surface_count: int

    @property
    def volume(self) -> float:
        return self.count * self.cell_volume

    @property
    def half_cell_correction(self) -> float:
        return 0.5 * self.surface_count * self.cell_volume

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "volume": self.volume,
            "half_cell_correction": self.half_cell_correction,
        }


def _coincidence(u: ConvexNodalFunction, contact: np.ndarray) -> CoincidenceSet:
    lat = u.lattice
    idx = np.flatnonzero(contact)
    surface = 0
    if lat is not None and len(idx):
        pos = {tuple(ix): k for k, ix in enumerate(lat.index)}
        cset = set(idx.tolist())
        for i in idx:
            ix = lat.index[i]
            for axis in range(u.n):
                for s in (-1, 1):
                    jx = ix.copy()
                    jx[axis] += s
                    j = pos.get(tuple(jx))
                    if j is None or j not in cset:
                        surface += 1
                        break
                else:
                    continue
                break
    cell = lat.cell_volume if lat is not None else 1.0
    return CoincidenceSet(indices=idx, count=len(idx), cell_volume=cell, surface_count=surface)


@dataclass
class ObstacleReport:
    height: float
    deficit: float
    coincidence: CoincidenceSet
    solver: SolveReport
    outer_iterations: int
    max_contact_excess: float      # max (cell - target) over contact, ~<= 0
    max_free_penetration: float    # max (plane - value) over free, ~<= 0
    endpoint_capped: bool = False
    bisection_steps: int = 0

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "deficit": self.deficit,
            "coincidence": self.coincidence.to_dict(),
            "outer_iterations": self.outer_iterations,
            "max_contact_excess": self.max_contact_excess,
            "max_free_penetration": self.max_free_penetration,
            "endpoint_capped": self.endpoint_capped,
            "bisection_steps": self.bisection_steps,
            "solver": self.solver.to_dict(),
        }


def _newton_pinned(u, m, free_idx, tol_mass, max_iter=40, lam_damp=0.7):
    """Newton on the free nodes only; everything else is fixed data."""
    best = (np.inf, u.values.copy())
    sup_change = np.inf
    it = 0
    while it < max_iter:
        it += 1
        ei, ej, w, asm = ma_jacobian_weights(u)
        mloc = len(u.nodes)
        col = np.full(mloc, -1, dtype=int)
        col[free_idx] = np.arange(len(free_idx))
        diag = np.zeros(mloc)
        np.add.at(diag, ei, w)
        np.add.at(diag, ej, w)
        both = (col[ei] >= 0) & (col[ej] >= 0)
        rows = np.concatenate([col[ei[both]], col[ej[both]], np.arange(len(free_idx))])
        cols = np.concatenate([col[ej[both]], col[ei[both]], np.arange(len(free_idx))])
        vals = np.concatenate([w[both], w[both], -diag[free_idx]])
        J = sp.coo_matrix((vals, (rows, cols)), shape=(len(free_idx),) * 2).tocsc()
        F = asm.volumes[free_idx] - m[free_idx]
        res = float(np.abs(F).max()) if len(F) else 0.0
        if res < best[0]:
            best = (res, u.values.copy())
        # residual-only: demanding a tiny step too just burns iterations
        # once the floating-point floor is reached
        if res <= tol_mass:
            break
        dead = np.asarray(J.diagonal() == 0.0).ravel()
        if dead.any():
            vv = u.values.copy()
            ids = free_idx[dead]
            vv[ids] = u.envelope_at(u.nodes[ids]) - 1e-3 * max(np.ptp(u.values), 1e-6)
            u = u.with_values(vv)
            continue
        delta = spsolve(J, -F)
        vol_now = asm.volumes[free_idx]
        floor = 0.5 * min(float(vol_now.min()), float(m[free_idx].min()))
        t = 1.0
        norm0 = float(np.linalg.norm(F))
        accepted = False
        for _ in range(25):
            vv = u.values.copy()
            vv[free_idx] += t * delta
            trial = u.with_values(vv)
            t_asm = ma_jacobian_weights(trial)[3]
            tv = t_asm.volumes[free_idx]
            if float(tv.min()) > floor and float(
                np.linalg.norm(tv - m[free_idx])
            ) <= (1 - 0.25 * t) * norm0:
                sup_change = float(np.abs(t * delta).max())
                u = trial
                accepted = True
                break
            t *= lam_damp
        if not accepted:
            break
    asm = ma_jacobian_weights(u)[3]
    res = float(np.abs(asm.volumes[free_idx] - m[free_idx]).max()) if len(free_idx) else 0.0
    if res > best[0]:
        u = u.with_values(best[1])
        asm = ma_jacobian_weights(u)[3]
        res = best[0]
    return u, asm, res, it, sup_change


def solve_fixed_height(
    problem: ObstacleProblem,
    height: float,
    tol_mass: float | None = None,
    max_outer: int = 60,
    warm=None,
    prebuilt=None,
):
    """Active-set solve at a fixed plane height."""
    t0 = time.perf_counter()
    u0, m = problem.build() if prebuilt is None else prebuilt
    if tol_mass is None:
        tol_mass = 1e-8 * u0.lattice.cell_volume
    total = float(m[u0.interior].sum())
    if total > _gradient_budget(u0) * (1 + 1e-9):
        raise Infeasible("interior mass exceeds gradient-box budget")
    ell = problem.plane_values(u0, height)
    span = max(float(np.ptp(u0.values[u0.boundary] - ell[u0.boundary])), 1e-6)
    tol_contact = 1e-9 * span
    if float((u0.values[u0.boundary] - ell[u0.boundary]).min()) < -tol_contact:
        raise ValueError("obstacle plane rises above the boundary data")

    inner = u0.interior
    vals = _paraboloid_start(u0) if warm is None else warm.copy()
    vals[inner] = np.maximum(vals[inner], ell[inner])
    u = u0.with_values(vals)
    contact = inner & (u.values <= ell + tol_contact)

    it_total = 0
    outer = 0
    asm = None
    for outer in range(1, max_outer + 1):
        free_idx = np.flatnonzero(inner & ~contact & (m > 0))
        u, asm, res, its, _ = _newton_pinned(u, m, free_idx, tol_mass)
        it_total += its
        viol = inner & ~contact & (u.values < ell - tol_contact)
        release = contact & (asm.volumes > m + max(tol_mass, 1e-14)) & inner
        if not viol.any() and not release.any() and res <= tol_mass:
            break
        if viol.any():
            vv = u.values.copy()
            vv[viol] = ell[viol]
            u = u.with_values(vv)
            contact |= viol
        if release.any():
            contact &= ~release
    else:
        asm = ma_jacobian_weights(u)[3]
    deficit = float((m[inner] - asm.volumes[inner]).sum())
    contact_excess = float((asm.volumes - m)[contact].max()) if contact.any() else -np.inf
    free_mask = inner & ~contact
    penetration = float((ell - u.values)[free_mask].max()) if free_mask.any() else -np.inf
    solver = SolveReport(
        method="newton",
        iterations=it_total,
        max_residual=float(
            np.abs((asm.volumes - m)[free_mask & (m > 0)]).max()
        ) if (free_mask & (m > 0)).any() else 0.0,
        sup_change=0.0,
        converged=True,
        reason="converged",
        wall_time=time.perf_counter() - t0,
        tol_mass=tol_mass,
    )
    solver.converged = solver.max_residual <= tol_mass and not (
        inner & ~contact & (u.values < ell - tol_contact)
    ).any()
    if not solver.converged:
        solver.reason = "active_set_stalled"
        logger.warning("obstacle active set did not settle (residual %.3g)", solver.max_residual)
    report = ObstacleReport(
        height=height,
        deficit=deficit,
        coincidence=_coincidence(u, contact),
        solver=solver,
        outer_iterations=outer,
        max_contact_excess=contact_excess,
        max_free_penetration=penetration,
    )
    return u, report


def solve_mass_matched(
    problem: ObstacleProblem,
    a: float,
    deficit_target: float | None = None,
    tol_mass: float | None = None,
    max_bisect: int = 40,
):
    """Find the plane height whose deficit equals the removal budget.

    The budget defaults to the volume of the ball of radius ``a``. The
    deficit is continuous and nondecreasing in the height, so a bracketed
    secant (Illinois rule, bisection fallback) homes in with a handful of
    solves; warm starts make the later ones cheap. If even the highest
    admissible plane removes too little, the endpoint solution is returned
    flagged ``endpoint_capped``.
    """
    prebuilt = problem.build()
    u0, m = prebuilt
    n = u0.n
    if deficit_target is None:
        deficit_target = unit_ball_volume(n).value * a ** n
    if tol_mass is None:
        tol_mass = 1e-8 * u0.lattice.cell_volume
    tol_match = max(tol_mass * int(u0.interior.sum()), 1e-12)
    b = u0.boundary
    ell0 = problem.plane_values(u0, 0.0)
    h_max = float((u0.values[b] - ell0[b]).min())
    if h_max <= 0:
        raise ValueError("boundary data leaves no room above the supporting plane")

    evals = 0
    warm_pool: list[tuple[float, np.ndarray]] = []

    def solve_at(height):
        nonlocal evals
        evals += 1
        warm = None
        if warm_pool:
            warm = min(warm_pool, key=lambda t: abs(t[0] - height))[1]
        u, rep = solve_fixed_height(
            problem, height, tol_mass=tol_mass, warm=warm, prebuilt=prebuilt
        )
        if warm is not None and not rep.solver.converged:
            # a warm plateau carried down from a much higher plane leaves the
            # hull affine over the old contact disc, where Newton's diagonal
            # dies; a cold start costs one extra solve and always settles
            evals += 1
            u, rep = solve_fixed_height(
                problem, height, tol_mass=tol_mass, prebuilt=prebuilt
            )
        if rep.solver.converged:
            warm_pool.append((height, u.values))
            del warm_pool[:-4]
        return u, rep

    # the height that removes the target is of the order of the squared
    # radius carrying that much Lebesgue mass; open the bracket there
    # instead of at h_max, where the giant contact set is hard to settle
    scale = (deficit_target / unit_ball_volume(n).value) ** (2.0 / n)
    hi = min(2.0 * scale, h_max)
    u_hi, rep_hi = solve_at(hi)
    f_hi = rep_hi.deficit - deficit_target
    while f_hi < -tol_match and hi < h_max:
        hi = min(4.0 * hi, h_max)
        u_hi, rep_hi = solve_at(hi)
        f_hi = rep_hi.deficit - deficit_target
    if f_hi < -tol_match:
        rep_hi.endpoint_capped = True
        rep_hi.bisection_steps = evals
        logger.warning(
            "deficit %.6g at the top height falls short of target %.6g",
            rep_hi.deficit, deficit_target,
        )
        return u_hi, rep_hi
    lo = 0.0
    u_lo, rep_lo = solve_at(lo)
    f_lo = rep_lo.deficit - deficit_target
    while f_lo > tol_match and lo > -16.0 * h_max:
        # plane heights below zero are legal; push the bracket down
        lo = 2.0 * lo - h_max
        u_lo, rep_lo = solve_at(lo)
        f_lo = rep_lo.deficit - deficit_target
    if f_lo > tol_match:
        raise Infeasible(
            "every admissible plane height over-removes; no mass match exists"
        )

    best = min(
        [(abs(f_hi), u_hi, rep_hi), (abs(f_lo), u_lo, rep_lo)], key=lambda t: t[0]
    )
    side = 0
    while best[0] > tol_match and evals < max_bisect and (hi - lo) > 1e-14 * max(1.0, h_max):
        if f_hi > f_lo:
            mid = hi - f_hi * (hi - lo) / (f_hi - f_lo)
            # keep the step inside the bracket or fall back to bisection
            if not lo + 1e-3 * (hi - lo) <= mid <= hi - 1e-3 * (hi - lo):
                mid = 0.5 * (lo + hi)
        else:
            mid = 0.5 * (lo + hi)
        u_mid, rep_mid = solve_at(mid)
        f_mid = rep_mid.deficit - deficit_target
        if abs(f_mid) < best[0]:
            best = (abs(f_mid), u_mid, rep_mid)
        if f_mid < 0:
            lo, f_lo = mid, f_mid
            if side == -1:
                f_hi *= 0.5  # Illinois: halve the stale endpoint
            side = -1
        else:
            hi, f_hi = mid, f_mid
            if side == 1:
                f_lo *= 0.5
            side = 1
    _, u_best, rep_best = best
    rep_best.bisection_steps = evals
    return u_best, rep_best


def obstacle_comparison(result_low, result_high, tol: float = 0.0) -> dict:
    """Monotonicity audit between two solved obstacle instances.

    If the second dominates on the boundary and its coincidence set is no
    smaller, its height and values must dominate too.
    """
    u1, r1 = result_low
    u2, r2 = result_high
    if u1.nodes.shape != u2.nodes.shape or not np.allclose(u1.nodes, u2.nodes):
        raise ValueError("comparison requires identical node sets")
    b = u1.boundary
    premise_boundary = bool((u2.values[b] - u1.values[b]).min() >= -1e-12)
    premise_volume = r2.coincidence.volume >= r1.coincidence.volume - 1e-12
    return {
        "premise_boundary": premise_boundary,
        "premise_volume": bool(premise_volume),
        "height_ordered": bool(r2.height >= r1.height - tol),
        "values_ordered": bool((u2.values - u1.values).min() >= -tol),
        "max_value_violation": float(max(0.0, (u1.values - u2.values).max())),
    }


# -- radial path --------------------------------------------------------


@dataclass
class RadialObstacleResult:
    profile: RadialProfile
    height: float
    deficit: float
    contact_count: int
    contact_radius: float
    volume: float                 # shell-summed coincidence volume
    half_cell_correction: float
    endpoint_capped: bool = False

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "deficit": self.deficit,
            "contact_count": self.contact_count,
            "contact_radius": self.contact_radius,
            "volume": self.volume,
            "half_cell_correction": self.half_cell_correction,
            "endpoint_capped": self.endpoint_capped,
        }


def _radial_masses(g: np.ndarray, h: float, n: int, omega: float) -> np.ndarray:
    s = np.diff(g) / h
    s = np.maximum(s, 0.0)
    out = np.empty(len(g) - 1)
    out[0] = omega * s[0] ** n
    out[1:] = omega * (s[1:] ** n - s[:-1] ** n)
    return out


def _radial_targets(K: int, h: float, n: int, omega: float) -> np.ndarray:
    r = np.arange(K) * h
    lo = np.maximum(r - h / 2, 0.0)
    hi = r + h / 2
    return omega * (hi ** n - lo ** n)


def _radial_fixed_height(c, g_outer, K, h, n, omega, tol):
    """Active-set Newton for the radial chain at plane height value c."""
    r = np.arange(K + 1) * h
    g = np.maximum(0.5 * r ** 2 + (g_outer - 0.5 * (K * h) ** 2), c)
    g[K] = g_outer
    m = _radial_targets(K, h, n, omega)
    contact = np.zeros(K, dtype=bool)
    contact[:] = g[:K] <= c + tol
    for _ in range(200):
        free = np.flatnonzero(~contact)
        for _newton in range(80):
            s = np.maximum(np.diff(g) / h, 0.0)
            mass = _radial_masses(g, h, n, omega)
            F = mass[free] - m[free]
            if len(F) == 0 or np.abs(F).max() <= tol:
                break
            dsp = omega * n * s ** (n - 1) / h     # d mass_k / d g_{k+1} pieces
            main = np.empty(K)
            main[0] = -dsp[0]
            main[1:] = -(dsp[1:] + dsp[:-1])
            upper = dsp.copy()                      # coupling to g_{k+1}
            lower = dsp[:-1]                        # coupling to g_{k-1}
            idx = np.full(K, -1)
            idx[free] = np.arange(len(free))
            rows, cols, vals = [list(free)], [list(free)], [main[free]]
            for k in free:
                if k + 1 < K and idx[k + 1] >= 0:
                    rows.append([k]); cols.append([k + 1]); vals.append([upper[k]])
                if k - 1 >= 0 and idx[k - 1] >= 0:
                    rows.append([k]); cols.append([k - 1]); vals.append([lower[k - 1]])
            rows = idx[np.concatenate(rows)]
            cols = idx[np.concatenate(cols)]
            vals = np.concatenate(vals)
            J = sp.coo_matrix((vals, (rows, cols)), shape=(len(free),) * 2).tocsc()
            try:
                delta = spsolve(J, -F)
            except Exception:
                safe = np.where(main[free] == 0.0, -1.0, main[free])
                delta = -F / safe
            t = 1.0
            norm0 = np.linalg.norm(F)
            for _ls in range(30):
                trial = g.copy()
                trial[free] += t * delta
                tm = _radial_masses(trial, h, n, omega)
                if np.all(np.diff(trial) > -1e-15) and np.linalg.norm(
                    tm[free] - m[free]
                ) <= (1 - 0.25 * t) * norm0:
                    g = trial
                    break
                t *= 0.7
            else:
                g[free] += 0.2 * delta
        viol = (~contact) & (g[:K] < c - tol)
        mass = _radial_masses(g, h, n, omega)
        release = contact & (mass > m + max(tol, 1e-14))
        if not viol.any() and not release.any():
            break
        g[:K][viol] = c
        contact |= viol
        contact &= ~release
    mass = _radial_masses(g, h, n, omega)
    deficit = float((m - mass).sum())
    return g, contact, deficit


def solve_radial_obstacle(
    n: int,
    a: float,
    r_max: float,
    K: int = 256,
    deficit_target: float | None = None,
    tol: float | None = None,
    max_bisect: int = 60,
) -> RadialObstacleResult:
    """Rotationally symmetric obstacle solve on spherical shells.

    Boundary value is the standard paraboloid at ``r_max``; the obstacle
    is a horizontal plane whose value is bisected until the removed mass
    equals the ball-volume budget for radius ``a`` (or ``deficit_target``).
    The shell discretization is exact in the angular variables, so cells
    are true gradient-image shells and the only error is the radial step.
    """
    omega = unit_ball_volume(n).value
    if deficit_target is None:
        deficit_target = omega * a ** n
    h = r_max / K
    if tol is None:
        tol = 1e-12 * omega * r_max ** n
    g_outer = 0.5 * r_max ** 2
    lo, hi = 0.0, g_outer
    # plane at the boundary value removes everything; plane at 0 removes ~nothing
    best = None
    steps = 0
    for steps in range(1, max_bisect + 1):
        c = 0.5 * (lo + hi)
        g, contact, deficit = _radial_fixed_height(c, g_outer, K, h, n, omega, tol)
        gap = abs(deficit - deficit_target)
        if best is None or gap < best[0]:
            best = (gap, c, g, contact, deficit)
        if gap <= max(tol * K, 1e-12) or (hi - lo) < 1e-15 * g_outer:
            break
        if deficit < deficit_target:
            lo = c
        else:
            hi = c
    _, c, g, contact, deficit = best
    r = np.arange(K + 1) * h
    secants = np.maximum.accumulate(np.maximum(np.diff(g) / h, 0.0))
    slopes = np.concatenate([[0.0], secants])
    kc = int(np.flatnonzero(contact).max()) if contact.any() else -1
    contact_radius = (kc + 0.5) * h if kc >= 0 else 0.0
    volume = omega * contact_radius ** n if kc >= 0 else 0.0
    correction = 0.5 * omega * ((contact_radius + h / 2) ** n - max(contact_radius - h / 2, 0.0) ** n)
    profile = RadialProfile(n=n, grid=r, values=g - g[0], slopes=slopes)
    return RadialObstacleResult(
        profile=profile,
        height=c,
        deficit=deficit,
        contact_count=int(contact.sum()),
        contact_radius=contact_radius,
        volume=volume,
        half_cell_correction=correction,
        endpoint_capped=bool(abs(deficit - deficit_target) > max(tol * K, 1e-12)),
    )
