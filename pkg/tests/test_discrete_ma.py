"""Alexandrov cell machinery: hulls, dual assembly, sections, flat detection.

The cone tests are the load-bearing ones. A cone over a ball carries its
whole mass at the apex, with an exactly known value, so the assembly can
be checked against a closed form and against an independent slow route.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ma_sharp.discrete_ma import (
    ConvexNodalFunction,
    Lattice,
    UnboundedCellError,
    cell_volume_clipped,
    convexify,
    detect_flat_segments,
    ma_measure,
    section,
)
from ma_sharp.measure_model import EllipsoidDomain
from ma_sharp.specialfn import unit_ball_volume


def ball(n, radius, center=None):
    return EllipsoidDomain(
        A=np.eye(n), center=center if center is not None else np.zeros(n), radius=radius
    )


def cone_function(lat: Lattice, a: float) -> ConvexNodalFunction:
    """u(x) = a max(|x| - a, stub) style cone: here plain u = a |x|.

    Its subdifferential at the apex is the ball of radius a; every other
    point maps to a sphere of measure zero. Apex cell volume = w_n a^n.
    """
    r = np.linalg.norm(lat.points, axis=1)
    box = np.stack([-np.full(lat.n, a), np.full(lat.n, a)])
    return ConvexNodalFunction(
        n=lat.n,
        nodes=lat.points,
        values=a * r,
        boundary=~lat.interior,
        gradient_box=box,
        lattice=lat,
    )


class TestLattice:
    def test_interior_first_ordering(self):
        lat = Lattice.rasterize(ball(2, 1.0), spacing=0.3)
        flips = np.flatnonzero(np.diff(lat.interior.astype(int)) > 0)
        assert len(flips) == 0  # once boundary starts, no interior follows

    def test_origin_is_a_node(self):
        lat = Lattice.rasterize(ball(3, 1.0), spacing=0.25)
        d = np.linalg.norm(lat.points, axis=1)
        assert d.min() < 1e-12

    def test_ghost_ring_is_chebyshev_one(self):
        lat = Lattice.rasterize(ball(2, 1.0), spacing=0.3)
        ghosts = lat.index[~lat.interior]
        interior = {tuple(ix) for ix in lat.index[lat.interior]}
        for g in ghosts:
            neigh = [
                (g[0] + dx, g[1] + dy)
                for dx in (-1, 0, 1)
                for dy in (-1, 0, 1)
                if (dx, dy) != (0, 0)
            ]
            assert any(t in interior for t in neigh)

    def test_interior_count_tracks_volume(self):
        lat = Lattice.rasterize(ball(3, 1.0), spacing=0.1)
        est = lat.interior.sum() * lat.cell_volume
        assert est == pytest.approx(unit_ball_volume(3).value, rel=5e-2)

    def test_rejects_unsupported_dimension(self):
        semi = np.ones(4)
        with pytest.raises(ValueError, match="radial"):
            Lattice.rasterize(ball(4, 1.0), spacing=0.3)


class TestConvexify:
    def test_idempotent(self):
        rng = np.random.default_rng(0)
        lat = Lattice.rasterize(ball(2, 1.0), spacing=0.2)
        vals = 0.5 * np.sum(lat.points ** 2, axis=1) + 0.05 * rng.normal(size=len(lat.points))
        u = ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat)
        once = convexify(u)
        twice = convexify(once)
        # second pass re-hulls points lying exactly on facets; one ulp of
        # plane-evaluation roundoff is the only admissible drift
        assert np.allclose(once.values, twice.values, atol=1e-14)
        assert once.convexified and twice.convexified

    def test_convex_input_unchanged(self):
        lat = Lattice.rasterize(ball(2, 1.0), spacing=0.2)
        vals = 0.5 * np.sum(lat.points ** 2, axis=1)
        u = ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat)
        out = convexify(u)
        assert np.allclose(out.values, vals, atol=1e-12)

    def test_envelope_below_values(self):
        rng = np.random.default_rng(3)
        lat = Lattice.rasterize(ball(2, 1.0), spacing=0.25)
        vals = np.abs(lat.points[:, 0]) + 0.3 * rng.uniform(size=len(lat.points))
        u = ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat)
        out = convexify(u)
        assert np.all(out.values <= vals + 1e-12)

    def test_affine_short_circuit(self):
        lat = Lattice.rasterize(ball(2, 1.0), spacing=0.3)
        vals = lat.points @ np.array([0.3, -0.7]) + 2.0
        u = ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat)
        out = convexify(u)
        assert np.array_equal(out.values, vals)
        assert out.hull_data().affine

    def test_envelope_at_matches_nodes_for_convex_data(self):
        lat = Lattice.rasterize(ball(2, 1.0), spacing=0.2)
        vals = 0.5 * np.sum(lat.points ** 2, axis=1)
        u = convexify(ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat))
        probes = lat.points[lat.interior][::7]
        assert np.allclose(u.envelope_at(probes), 0.5 * np.sum(probes ** 2, axis=1), atol=1e-10)


class TestConeMass:
    def test_apex_cell_volume_band_3d(self):
        # the apex cell circumscribes the radius-a ball with tangent cuts in
        # every node direction: strictly above w_n a^n, and close at this mesh
        a = 1.0
        lat = Lattice.rasterize(ball(3, 2.0), spacing=0.25)
        u = cone_function(lat, a)
        report = ma_measure(u)
        apex = int(np.argmin(np.linalg.norm(lat.points, axis=1)))
        w = unit_ball_volume(3).value * a ** 3
        assert w < report.masses[apex] < w * 1.01

    def test_apex_cell_volume_band_2d(self):
        a = 0.7
        lat = Lattice.rasterize(ball(2, 2.0), spacing=0.2)
        u = cone_function(lat, a)
        report = ma_measure(u)
        apex = int(np.argmin(np.linalg.norm(lat.points, axis=1)))
        w = math.pi * a ** 2
        assert w < report.masses[apex] < w * 1.001

    def test_apex_two_routes_agree(self):
        # dual assembly vs direct halfspace intersection of the same cell
        a = 1.0
        lat = Lattice.rasterize(ball(3, 2.0), spacing=0.4)
        u = cone_function(lat, a)
        report = ma_measure(u)
        apex = int(np.argmin(np.linalg.norm(lat.points, axis=1)))
        direct = cell_volume_clipped(u, apex)
        assert report.masses[apex] == pytest.approx(direct, abs=1e-10)

    def test_apex_circumscribes_ball(self):
        # the apex cell is a polytope circumscribing the radius-a ball, so
        # any finite mesh strictly exceeds w_n a^n; refinement shrinks the gap
        a = 1.0
        w = unit_ball_volume(3).value
        gaps = []
        for h in (0.5, 0.25):
            lat = Lattice.rasterize(ball(3, 2.0), spacing=h)
            u = cone_function(lat, a)
            apex = int(np.argmin(np.linalg.norm(lat.points, axis=1)))
            gaps.append(ma_measure(u).masses[apex] - w * a ** 3)
        assert gaps[0] > 0 and gaps[1] > 0
        assert gaps[1] < gaps[0]

    def test_affine_addition_invariance(self):
        # adding l(x) = p.x + c translates every subdifferential by p:
        # cell volumes are exactly invariant
        a = 0.8
        p = np.array([0.3, -0.2, 0.1])
        lat = Lattice.rasterize(ball(3, 2.0), spacing=0.4)
        u = cone_function(lat, a)
        shift_box = u.gradient_box + p[None, :]
        v = ConvexNodalFunction(
            n=3,
            nodes=lat.points,
            values=u.values + lat.points @ p + 1.3,
            boundary=u.boundary,
            gradient_box=shift_box,
            lattice=lat,
        )
        mu_u = ma_measure(u).masses
        mu_v = ma_measure(v).masses
        assert np.abs(mu_u - mu_v).max() < 1e-12

    def test_total_mass_two_route_identity(self):
        # route one: sum of assembled interior cells. route two: the cells
        # tile the gradient image of the interior, whose volume is computed
        # by clipping each cell independently. identical partitions, so the
        # totals must agree to assembly accuracy.
        a = 0.9
        lat = Lattice.rasterize(ball(3, 1.5), spacing=0.3)
        u = cone_function(lat, a)
        report = ma_measure(u)
        direct = sum(
            cell_volume_clipped(u, int(i)) for i in np.flatnonzero(u.interior)
        )
        assert report.total == pytest.approx(direct, abs=1e-6)


class TestMaMeasure:
    def test_quadratic_cells_equal_cell_volume(self):
        # det D^2(|x|^2/2) = 1: every interior Alexandrov cell is the image
        # of a lattice cell under the identity, volume h^n
        lat = Lattice.rasterize(ball(2, 1.0), spacing=0.2)
        vals = 0.5 * np.sum(lat.points ** 2, axis=1)
        u = ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat)
        report = ma_measure(u)
        inner = u.interior & (np.linalg.norm(lat.points, axis=1) < 0.5)
        assert np.allclose(report.masses[inner], lat.cell_volume, atol=1e-10)

    def test_unbounded_cell_raises_without_box(self):
        nodes = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        vals = np.array([0.0, 1.0, 1.0, 1.0, 1.0])
        # mark everything interior: the outer cells are genuinely unbounded
        u = ConvexNodalFunction(2, nodes, vals, np.zeros(5, bool))
        with pytest.raises(UnboundedCellError, match="gradient_box"):
            ma_measure(u)

    def test_residual_against_target(self):
        lat = Lattice.rasterize(ball(2, 1.0), spacing=0.25)
        vals = 0.5 * np.sum(lat.points ** 2, axis=1)
        u = ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat)
        target = np.full(len(lat.points), lat.cell_volume)
        report = ma_measure(u, target=target)
        inner = u.interior & (np.linalg.norm(lat.points, axis=1) < 0.5)
        assert np.abs(report.residual[inner]).max() < 1e-10

    def test_masses_nonnegative(self):
        rng = np.random.default_rng(11)
        lat = Lattice.rasterize(ball(2, 1.0), spacing=0.2)
        vals = 0.5 * np.sum(lat.points ** 2, axis=1) + 0.02 * rng.normal(size=len(lat.points))
        u = convexify(ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat))
        report = ma_measure(u)
        assert report.masses[u.interior].min() >= -1e-12


class TestSection:
    def test_ball_section_of_paraboloid(self):
        # {x : |x|^2/2 < h} has volume w_n (2h)^{n/2}; node counting sees it to O(h)
        lat = Lattice.rasterize(ball(3, 1.5), spacing=0.1)
        vals = 0.5 * np.sum(lat.points ** 2, axis=1)
        u = ConvexNodalFunction(3, lat.points, vals, ~lat.interior, lattice=lat)
        apex = int(np.argmin(np.linalg.norm(lat.points, axis=1)))
        h = 0.3
        idx, vol = section(u, apex, h)
        exact = unit_ball_volume(3).value * (2 * h) ** 1.5
        assert vol == pytest.approx(exact, rel=0.1)
        r = np.linalg.norm(lat.points[idx], axis=1)
        assert r.max() <= math.sqrt(2 * h) + 2 * lat.spacing

    def test_monotone_in_height(self):
        lat = Lattice.rasterize(ball(2, 1.5), spacing=0.1)
        vals = 0.5 * np.sum(lat.points ** 2, axis=1)
        u = ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat)
        apex = int(np.argmin(np.linalg.norm(lat.points, axis=1)))
        vols = [section(u, apex, h)[1] for h in (0.1, 0.2, 0.4)]
        assert vols[0] < vols[1] < vols[2]

    def test_rejects_nonpositive_height(self):
        lat = Lattice.rasterize(ball(2, 1.0), spacing=0.3)
        vals = 0.5 * np.sum(lat.points ** 2, axis=1)
        u = ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat)
        with pytest.raises(ValueError):
            section(u, 0, 0.0)


class TestFlatDetection:
    def test_finds_lattice_aligned_flat(self):
        lat = Lattice.rasterize(ball(2, 1.5), spacing=0.25)
        # flat trough along x in [-0.5, 0.5]: u = max(|x| - 0.5, 0) + y^2/2
        x, y = lat.points[:, 0], lat.points[:, 1]
        vals = np.maximum(np.abs(x) - 0.5, 0.0) + 0.5 * y ** 2
        u = ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat)
        hits = detect_flat_segments(u, tol=1e-10, min_run=2)
        assert any(h["axis"] == 0 for h in hits)

    def test_strictly_convex_has_none(self):
        lat = Lattice.rasterize(ball(2, 1.5), spacing=0.25)
        vals = 0.5 * np.sum(lat.points ** 2, axis=1)
        u = ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat)
        assert detect_flat_segments(u, tol=1e-10, min_run=1) == []

    def test_directional_probe(self):
        lat = Lattice.rasterize(ball(2, 1.5), spacing=0.25)
        x, y = lat.points[:, 0], lat.points[:, 1]
        vals = np.maximum(np.abs(x) - 0.5, 0.0) + 0.5 * y ** 2
        u = convexify(ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat))
        hits = detect_flat_segments(
            u, tol=1e-8, directions=[(np.array([-0.4, 0.0]), np.array([0.4, 0.0]))]
        )
        assert any(h["axis"] is None for h in hits)


class TestSubgradient:
    def test_paraboloid_gradient(self):
        lat = Lattice.rasterize(ball(2, 1.0), spacing=0.2)
        vals = 0.5 * np.sum(lat.points ** 2, axis=1)
        u = ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat)
        i = int(np.argmin(np.linalg.norm(lat.points - np.array([0.4, 0.2]), axis=1)))
        g = u.subgradient_at_node(i)
        assert np.allclose(g, lat.points[i], atol=0.25)

    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    @settings(max_examples=10, deadline=None)
    def test_subgradient_supports_function(self, seed):
        rng = np.random.default_rng(seed)
        nodes = rng.uniform(-1, 1, size=(40, 2))
        vals = 0.5 * np.sum(nodes ** 2, axis=1) + 0.1 * rng.normal(size=40)
        u = convexify(ConvexNodalFunction(2, nodes, vals, np.zeros(40, bool)))
        hd = u.hull_data()
        i = int(np.flatnonzero(hd.vertex_mask)[0])
        g = u.subgradient_at_node(i)
        slack = u.values - (u.values[i] + (nodes - nodes[i]) @ g)
        assert slack.min() >= -1e-8


class TestJsonRoundtrip:
    def test_to_json_carries_lattice(self):
        import json

        lat = Lattice.rasterize(ball(2, 1.0), spacing=0.5)
        vals = 0.5 * np.sum(lat.points ** 2, axis=1)
        u = ConvexNodalFunction(2, lat.points, vals, ~lat.interior, lattice=lat)
        doc = json.loads(u.to_json())
        assert doc["lattice"]["spacing"] == 0.5
        assert len(doc["values"]) == len(lat.points)
