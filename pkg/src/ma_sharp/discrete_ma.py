"""Node-based Alexandrov cells for piecewise-linear convex functions.

A nodal function's subdifferential cell at node i is the polytope
{p : p . (x_j - x_i) <= u_j - u_i for all j}. Its volume is node i's
discrete Monge-Ampere mass. Everything here runs off one geometric
object, the lower convex hull of the lifted points (x_i, u_i):

  * envelope values come from the max over lower-facet planes,
  * cells of hull-vertex nodes are the convex hulls of their incident
    facet gradients (power-diagram duality),
  * cell volumes and the volume derivative come from the dual facets
    shared with each hull neighbor, assembled edge by edge.

The divergence-theorem assembly is exact for polytopes, so the only error
floor is floating-point roundoff in the hull equations; the test suite
pins it against an independent halfspace-intersection oracle.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .specialfn import check_dimension

logger = logging.getLogger(__name__)

__all__ = [
    "Lattice",
    "ConvexNodalFunction",
    "MAReport",
    "UnboundedCellError",
    "convexify",
    "ma_measure",
    "section",
    "detect_flat_segments",
]


class UnboundedCellError(RuntimeError):
    pass


@dataclass(frozen=True)
class Lattice:
    """Rasterized ellipsoid: interior lattice nodes plus a ghost ring.

    Ghosts are the lattice points outside the ellipsoid within Chebyshev
    distance one of an interior node; they carry prescribed boundary data
    and make every interior node an interior point of the node hull.
    """

    n: int
    origin: np.ndarray
    spacing: float
    points: np.ndarray          # (m, n), interior nodes first
    interior: np.ndarray        # (m,) bool
    index: np.ndarray           # (m, n) integer lattice coordinates

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.n

    def interior_points(self) -> np.ndarray:
        return self.points[self.interior]

    @classmethod
    def rasterize(cls, domain, spacing: float) -> "Lattice":
        n = domain.n
        check_dimension(n)
        if n not in (2, 3):
            raise ValueError("grid path supports n in {2, 3}; use the radial path above")
        lo, hi = domain.bounding_box()
        lo_idx = np.floor(lo / spacing).astype(int) - 2
        hi_idx = np.ceil(hi / spacing).astype(int) + 2
        axes = [np.arange(lo_idx[k], hi_idx[k] + 1) for k in range(n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        idx = np.stack([m.ravel() for m in mesh], axis=1)
        pts = idx * spacing
        inside = domain.contains(pts)
        inside_grid = inside.reshape(mesh[0].shape)
        # ghost ring: Chebyshev-1 dilation of the interior minus the interior
        ring = np.zeros_like(inside_grid)
        shifts = [s for s in np.ndindex(*(3,) * n)]
        for s in shifts:
            sl_src = tuple(slice(1, -1) for _ in range(n))
            sl_dst = tuple(slice(s[k], inside_grid.shape[k] - 2 + s[k]) for k in range(n))
            ring[sl_dst] |= inside_grid[sl_src]
        ring &= ~inside_grid
        keep = inside | ring.ravel()
        pts, idx, inside = pts[keep], idx[keep], inside[keep]
        order = np.argsort(~inside, kind="stable")  # interior first, stable
        return cls(
            n=n,
            origin=np.zeros(n),
            spacing=float(spacing),
            points=pts[order],
            interior=inside[order],
            index=idx[order],
        )


@dataclass
class ConvexNodalFunction:
    n: int
    nodes: np.ndarray
    values: np.ndarray
    boundary: np.ndarray
    gradient_box: np.ndarray | None = None
    lattice: Lattice | None = None
    convexified: bool = False
    _hull: object = field(default=None, repr=False, compare=False)
    _asm: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        check_dimension(self.n)
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.boundary = np.asarray(self.boundary, dtype=bool)
        m = len(self.nodes)
        if self.nodes.shape != (m, self.n) or self.values.shape != (m,) or self.boundary.shape != (m,):
            raise ValueError("inconsistent nodal arrays")

    @property
    def interior(self) -> np.ndarray:
        return ~self.boundary

    def with_values(self, values: np.ndarray) -> "ConvexNodalFunction":
        return ConvexNodalFunction(
            n=self.n,
            nodes=self.nodes,
            values=np.asarray(values, dtype=float),
            boundary=self.boundary,
            gradient_box=self.gradient_box,
            lattice=self.lattice,
        )

    def hull_data(self) -> "_HullData":
        if self._hull is None:
            self._hull = _lower_hull(self.nodes, self.values)
        return self._hull

    def envelope_at(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the convex envelope at arbitrary points."""
        hd = self.hull_data()
        return _max_planes(np.atleast_2d(np.asarray(x, dtype=float)), hd.gradients, hd.intercepts)

    def subgradient_at_node(self, i: int) -> np.ndarray:
        """A deterministic subgradient: mean of the incident facet gradients."""
        hd = self.hull_data()
        mask = (hd.simplices == i).any(axis=1)
        if not mask.any():
            # node above the envelope or facet-interior: use the active plane
            k = int(np.argmax(_plane_values(self.nodes[i], hd.gradients, hd.intercepts)))
            return hd.gradients[k]
        return hd.gradients[mask].mean(axis=0)

    def to_json(self) -> str:
        doc = {
            "n": self.n,
            "values": self.values.tolist(),
            "boundary": self.boundary.astype(int).tolist(),
        }
        if self.lattice is not None:
            doc["lattice"] = {
                "spacing": self.lattice.spacing,
                "index": self.lattice.index.tolist(),
            }
        else:
            doc["nodes"] = self.nodes.tolist()
        if self.gradient_box is not None:
            doc["gradient_box"] = self.gradient_box.tolist()
        return json.dumps(doc)


@dataclass(frozen=True)
class _HullData:
    simplices: np.ndarray    # (S, n+1) node indices of lower facets
    gradients: np.ndarray    # (S, n)
    intercepts: np.ndarray   # (S,) plane z = g . x + c
    vertex_mask: np.ndarray  # (m,) node is a vertex of some lower facet
    affine: bool = False


def _plane_values(x, gradients, intercepts):
    return x @ gradients.T + intercepts


def _max_planes(x, gradients, intercepts, chunk: int = 4096):
    best = np.full(len(x), -np.inf)
    for k in range(0, len(gradients), chunk):
        vals = x @ gradients[k:k + chunk].T + intercepts[k:k + chunk]
        best = np.maximum(best, vals.max(axis=1))
    return best


def _lower_hull(nodes: np.ndarray, values: np.ndarray) -> _HullData:
    m, n = nodes.shape
    # affine data has a degenerate lift; short-circuit it
    A = np.column_stack([nodes, np.ones(m)])
    coef, res, *_ = np.linalg.lstsq(A, values, rcond=None)
    fit = A @ coef
    scale = max(1.0, float(np.abs(values).max()))
    if np.abs(values - fit).max() <= 1e-13 * scale:
        return _HullData(
            simplices=np.empty((0, n + 1), dtype=int),
            gradients=coef[:n][None, :],
            intercepts=np.array([coef[n]]),
            vertex_mask=np.zeros(m, dtype=bool),
            affine=True,
        )
    lift = np.column_stack([nodes, values])
    try:
        hull = ConvexHull(lift, qhull_options="Qt")
    except QhullError:
        hull = ConvexHull(lift, qhull_options="Qt QJ1e-11")
    eq = hull.equations
    lower = eq[:, n] < -1e-10
    simplices = hull.simplices[lower]
    neq = eq[lower]
    grads = -neq[:, :n] / neq[:, n:n + 1]
    intercepts = -neq[:, n + 1] / neq[:, n]
    vertex_mask = np.zeros(m, dtype=bool)
    vertex_mask[np.unique(simplices)] = True
    return _HullData(
        simplices=simplices,
        gradients=grads,
        intercepts=intercepts,
        vertex_mask=vertex_mask,
    )


def convexify(f: ConvexNodalFunction | np.ndarray, nodes=None, boundary=None, **kw) -> ConvexNodalFunction:
    """Replace values by the lower convex envelope restricted to the nodes.

    Hull-vertex nodes keep their values exactly; the rest drop onto the
    envelope. Idempotent by construction.
    """
    if not isinstance(f, ConvexNodalFunction):
        f = ConvexNodalFunction(
            n=nodes.shape[1], nodes=nodes, values=f,
            boundary=np.zeros(len(nodes), bool) if boundary is None else boundary, **kw,
        )
    hd = f.hull_data()
    if hd.affine:
        out = f.with_values(f.values)
        out.convexified = True
        out._hull = hd
        return out
    env = f.values.copy()
    drop = ~hd.vertex_mask
    if drop.any():
        env[drop] = np.minimum(
            env[drop], _max_planes(f.nodes[drop], hd.gradients, hd.intercepts)
        )
    out = f.with_values(env)
    out.convexified = True
    if not drop.any():
        out._hull = hd  # values unchanged, hull still valid
    return out


# -- dual-cell assembly -------------------------------------------------


@dataclass(frozen=True)
class _Assembly:
    volumes: np.ndarray       # (m,) cell volumes; only trustworthy where closed
    closed: np.ndarray        # (m,) facet normals sum to ~0 (bounded cell)
    edge_i: np.ndarray        # (E,)
    edge_j: np.ndarray
    edge_weight: np.ndarray   # (E,) dual facet area / |x_j - x_i|


def _dual_assembly(u: ConvexNodalFunction) -> _Assembly:
    if u._asm is not None:
        return u._asm
    u._asm = _dual_assembly_impl(u)
    return u._asm


def _dual_assembly_impl(u: ConvexNodalFunction) -> _Assembly:
    hd = u.hull_data()
    m = len(u.nodes)
    n = u.n
    if hd.affine or len(hd.simplices) == 0:
        z = np.zeros(m)
        return _Assembly(z, np.ones(m, bool), np.empty(0, int), np.empty(0, int), np.empty(0))
    simp = hd.simplices
    grads = hd.gradients
    S = len(simp)
    # every edge of every lower simplex, canonicalized i < j
    pairs = [(a, b) for a in range(n + 1) for b in range(a + 1, n + 1)]
    ei = np.concatenate([simp[:, a] for a, b in pairs])
    ej = np.concatenate([simp[:, b] for a, b in pairs])
    gs = np.tile(np.arange(S), len(pairs))
    swap = ei > ej
    ei[swap], ej[swap] = ej[swap], ei[swap]
    key = ei.astype(np.int64) * m + ej
    order = np.argsort(key, kind="stable")
    ei, ej, gs, key = ei[order], ej[order], gs[order], key[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(key)) + 1])
    counts = np.diff(np.concatenate([starts, [len(key)]]))
    P = grads[gs]                       # dual polygon vertices per entry

    ui, uj = ei[starts], ej[starts]     # unique edge endpoints
    d = u.nodes[uj] - u.nodes[ui]
    dist = np.linalg.norm(d, axis=1)
    axis = d / dist[:, None]

    if n == 2:
        # dual facet is a segment along the direction perpendicular to d
        perp = np.stack([-axis[:, 1], axis[:, 0]], axis=1)
        t = np.einsum("ij,ij->i", P, perp[np.repeat(np.arange(len(ui)), counts)])
        t_max = np.maximum.reduceat(t, starts)
        t_min = np.minimum.reduceat(t, starts)
        area = t_max - t_min
    else:
        # in-plane orthonormal frame per edge
        pick = np.argmin(np.abs(axis), axis=1)
        helper = np.zeros_like(axis)
        helper[np.arange(len(ui)), pick] = 1.0
        b1 = np.cross(axis, helper)
        b1 /= np.linalg.norm(b1, axis=1)[:, None]
        b2 = np.cross(axis, b1)
        rep = np.repeat(np.arange(len(ui)), counts)
        pu = np.einsum("ij,ij->i", P, b1[rep])
        pv = np.einsum("ij,ij->i", P, b2[rep])
        cu = np.add.reduceat(pu, starts) / counts
        cv = np.add.reduceat(pv, starts) / counts
        ang = np.arctan2(pv - cv[rep], pu - cu[rep])
        ordr = np.lexsort((ang, rep))
        pu, pv = pu[ordr], pv[ordr]
        # shoelace with wraparound inside each group
        nxt = np.arange(len(pu)) + 1
        ends = starts + counts - 1
        nxt[ends] = starts
        cross = pu * pv[nxt] - pu[nxt] * pv
        area = 0.5 * np.abs(np.add.reduceat(cross, starts))

    # cell ui sees the facet plane at signed offset (u_j - u_i)/dist along
    # its outward normal; cell uj sees the negated offset along the negated
    # normal. V = (1/n) sum area * offset over the closed facet fan.
    support = (u.values[uj] - u.values[ui]) / dist
    volumes = np.zeros(m)
    np.add.at(volumes, ui, area * support)
    np.add.at(volumes, uj, area * -support)
    volumes /= n

    # closure check: facet normal vectors of each cell must cancel
    normal_sum = np.zeros((m, n))
    np.add.at(normal_sum, ui, area[:, None] * axis)
    np.add.at(normal_sum, uj, -area[:, None] * axis)
    span = np.abs(normal_sum).max(axis=1)
    closed = span <= 1e-9 * max(1.0, float(area.max()) if len(area) else 1.0)

    weight = area / dist
    return _Assembly(volumes, closed, ui, uj, weight)


@dataclass
class MAReport:
    masses: np.ndarray          # per-node cell mass, zero where not computed
    computed: np.ndarray        # bool, which nodes carry a trusted mass
    total: float
    target: np.ndarray | None = None

    @property
    def residual(self) -> np.ndarray | None:
        if self.target is None:
            return None
        return self.masses - self.target

    def to_json(self) -> str:
        doc = {
            "masses": self.masses.tolist(),
            "computed": self.computed.astype(int).tolist(),
            "total": self.total,
        }
        if self.target is not None:
            doc["max_residual"] = float(np.abs(self.residual[self.computed]).max())
        return json.dumps(doc)

    def write_csv(self, path, nodes: np.ndarray) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", *[f"x{k}" for k in range(nodes.shape[1])], "cell_mass"])
            for i in np.flatnonzero(self.computed):
                w.writerow([int(i), *map(repr, nodes[i]), repr(self.masses[i])])


def ma_measure(u: ConvexNodalFunction, target: np.ndarray | None = None) -> MAReport:
    """Per-interior-node Alexandrov cell volumes.

    Interior cells come from the dual assembly. A cell that fails the
    closure test is recomputed by halfspace intersection clipped to the
    gradient box; without a box that is an error, since the cell really
    is unbounded.
    """
    asm = _dual_assembly(u)
    interior = u.interior
    masses = np.where(interior, asm.volumes, 0.0)
    computed = interior.copy()
    bad = interior & ~asm.closed
    if bad.any():
        if u.gradient_box is None:
            raise UnboundedCellError(
                f"{int(bad.sum())} interior cells are unbounded; set gradient_box "
                "from the boundary data so they can be clipped"
            )
        for i in np.flatnonzero(bad):
            masses[i] = cell_volume_clipped(u, int(i))
    total = float(masses[interior].sum())
    return MAReport(
        masses=masses,
        computed=computed,
        total=total,
        target=target,
    )


def cell_volume_clipped(u: ConvexNodalFunction, i: int) -> float:
    """Cell volume by direct halfspace intersection, clipped to the box.

    Slow path: used for boundary cells and the odd unbounded interior one.
    """
    from scipy.optimize import linprog
    from scipy.spatial import HalfspaceIntersection

    if u.gradient_box is None:
        raise UnboundedCellError("gradient_box required to clip cell polytopes")
    x = u.nodes
    v = u.values
    d = np.delete(x, i, axis=0) - x[i]
    rhs = np.delete(v, i) - v[i]
    lo, hi = u.gradient_box
    n = u.n
    A = np.vstack([d, -np.eye(n), np.eye(n)])
    b = np.concatenate([rhs, -lo, hi])
    # Chebyshev center gives a strictly interior point for the intersection
    norms = np.linalg.norm(A, axis=1)
    res = linprog(
        c=np.concatenate([np.zeros(n), [-1.0]]),
        A_ub=np.column_stack([A, norms]),
        b_ub=b,
        bounds=[(None, None)] * n + [(0, None)],
        method="highs",
    )
    if not res.success or res.x[n] <= 1e-14:
        return 0.0
    hs = HalfspaceIntersection(np.column_stack([A, -b]), res.x[:n])
    return float(ConvexHull(hs.intersections).volume)


def ma_jacobian_weights(u: ConvexNodalFunction):
    """Edge list (i, j, dVol_i/du_j) of the cell-volume map at u.

    The derivative of a polytope volume in a facet offset is the facet
    area, so the weight is area / |x_j - x_i|, symmetric in (i, j).
    """
    asm = _dual_assembly(u)
    return asm.edge_i, asm.edge_j, asm.edge_weight, asm


def section(u: ConvexNodalFunction, x0: int, h: float, p: np.ndarray | None = None):
    """Nodes below the supporting plane at node x0 raised by h, plus volume.

    Returns (indices, volume). Volume is the node count times the lattice
    cell volume; without a lattice it is a bare count.
    """
    if h <= 0:
        raise ValueError("section height must be positive")
    if p is None:
        p = u.subgradient_at_node(x0)
    lift = u.values[x0] + (u.nodes - u.nodes[x0]) @ p + h
    idx = np.flatnonzero(u.values < lift - 1e-12)
    vol = float(len(idx)) * (u.lattice.cell_volume if u.lattice is not None else 1.0)
    return idx, vol


def detect_flat_segments(
    u: ConvexNodalFunction,
    tol: float,
    directions: list | None = None,
    min_run: int = 1,
):
    """Maximal runs of vanishing second differences.

    Lattice functions are scanned along every axis line; ``directions`` adds
    pairs (y_start, y_end) probed through the envelope, for segments that are
    not lattice-aligned (e.g. between two atom locations).
    """
    out = []
    if u.lattice is not None:
        lat = u.lattice
        h = lat.spacing
        idx = lat.index
        pos = {tuple(ix): k for k, ix in enumerate(idx)}
        for axis in range(u.n):
            seen = set()
            for k, ix in enumerate(idx):
                line_key = tuple(np.delete(ix, axis)) + (axis,)
                if line_key in seen:
                    continue
                seen.add(line_key)
                # walk the full lattice line through this node
                base = np.array(ix)
                ks = []
                step = base.copy()
                while tuple(step) in pos:
                    step[axis] -= 1
                step[axis] += 1
                while tuple(step) in pos:
                    ks.append(pos[tuple(step)])
                    step[axis] += 1
                if len(ks) < 3:
                    continue
                vals = u.values[ks]
                second = (vals[:-2] + vals[2:] - 2 * vals[1:-1]) / h ** 2
                flat = second <= tol
                run_start = None
                for t in range(len(flat) + 1):
                    if t < len(flat) and flat[t]:
                        if run_start is None:
                            run_start = t
                    elif run_start is not None:
                        if t - run_start >= min_run:
                            out.append(
                                {
                                    "axis": axis,
                                    "start": int(ks[run_start]),
                                    "end": int(ks[t + 1]),
                                    "max_second_diff": float(second[run_start:t].max()),
                                }
                            )
                        run_start = None
    for pair in directions or []:
        y0, y1 = (np.asarray(p, dtype=float) for p in pair)
        length = np.linalg.norm(y1 - y0)
        if length == 0:
            continue
        step = u.lattice.spacing if u.lattice is not None else length / 32
        num = max(int(np.ceil(length / step)) + 1, 5)
        ts = np.linspace(0.0, 1.0, num)
        pts = y0[None, :] + ts[:, None] * (y1 - y0)[None, :]
        vals = u.envelope_at(pts)
        dt = length / (num - 1)
        second = (vals[:-2] + vals[2:] - 2 * vals[1:-1]) / dt ** 2
        if np.all(second <= tol):
            out.append(
                {
                    "axis": None,
                    "start": y0.tolist(),
                    "end": y1.tolist(),
                    "max_second_diff": float(second.max()),
                }
            )
    return out
