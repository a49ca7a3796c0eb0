"""Measure containers: total variation bookkeeping and the separation criterion."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ma_sharp.discrete_ma import Lattice
from ma_sharp.measure_model import (
    Atom,
    EllipsoidDomain,
    MeasureData,
    QuadraticAsymptote,
    restrict,
    strict_convexity_criterion,
    total_variation,
    tv_radius,
)
from ma_sharp.specialfn import sharp_constant, unit_ball_volume


def ball(n, radius, center=None):
    return EllipsoidDomain(A=np.eye(n), center=center if center is not None else np.zeros(n), radius=radius)


class TestAtom:
    def test_radius_inverts_mass(self):
        w3 = unit_ball_volume(3).value
        a = Atom(np.zeros(3), w3 * 0.7 ** 3)
        assert a.radius(3) == pytest.approx(0.7, rel=1e-14)

    def test_rejects_nonpositive_mass(self):
        with pytest.raises(ValueError):
            Atom(np.zeros(3), 0.0)
        with pytest.raises(ValueError):
            Atom(np.zeros(3), -1.0)

    def test_location_coerced_to_float_array(self):
        a = Atom([1, 2, 3], 1.0)
        assert a.location.dtype == float
        assert a.location.shape == (3,)


class TestMeasureData:
    def test_atom_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            MeasureData(n=3, atoms=((np.zeros(2), 1.0),))

    def test_scalar_density_broadcasts(self):
        mu = MeasureData(n=3, density=1.5)
        pts = np.zeros((4, 3))
        assert np.allclose(mu.density_at(pts), 1.5)

    def test_density_below_lebesgue_rejected(self):
        mu = MeasureData(n=3, density=0.5)
        with pytest.raises(ValueError, match="dominate"):
            mu.density_at(np.zeros((1, 3)))

    def test_negative_part_range_enforced(self):
        mu = MeasureData(n=3, negative_part=1.5)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            mu.negative_at(np.zeros((1, 3)))

    def test_disjoint_support_enforced(self):
        # both fields active at the origin: the target density is ambiguous
        mu = MeasureData(n=3, density=2.0, negative_part=0.5)
        with pytest.raises(ValueError, match="disjoint"):
            mu.target_density_at(np.zeros((1, 3)))

    def test_disjoint_supports_combine(self):
        def dens(x):
            return np.where(x[..., 0] > 0, 2.0, 1.0)

        def neg(x):
            return np.where(x[..., 0] < 0, 0.25, 0.0)

        mu = MeasureData(n=3, density=dens, negative_part=neg)
        pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0.0, 0, 0]])
        assert np.allclose(mu.target_density_at(pts), [2.0, 0.75, 1.0])

    def test_trivial_ac_flag(self):
        assert MeasureData(n=3).is_trivial_ac()
        assert not MeasureData(n=3, density=1.0).is_trivial_ac()


class TestTotalVariation:
    def test_atoms_only_no_lattice_needed(self):
        mu = MeasureData(n=3, atoms=((np.zeros(3), 0.4), (np.ones(3), 0.6)))
        assert total_variation(mu) == pytest.approx(1.0, abs=1e-15)

    def test_region_filters_atoms(self):
        mu = MeasureData(n=3, atoms=((np.zeros(3), 0.4), (np.full(3, 5.0), 0.6)))
        assert total_variation(mu, region=ball(3, 1.0)) == pytest.approx(0.4)

    def test_nontrivial_density_requires_lattice(self):
        mu = MeasureData(n=2, density=2.0)
        with pytest.raises(ValueError, match="lattice"):
            total_variation(mu)

    def test_cell_rule_integral_matches_area(self):
        # density 1 + 1_{|x|<r0}: TV over the lattice is ~ the disc area
        r0 = 0.8

        def dens(x):
            return 1.0 + (np.linalg.norm(x, axis=-1) < r0)

        mu = MeasureData(n=2, density=dens)
        lat = Lattice.rasterize(ball(2, 2.0), spacing=0.02)
        tv = total_variation(mu, lattice=lat)
        assert tv == pytest.approx(math.pi * r0 ** 2, rel=2e-2)

    def test_additive_over_atom_and_density(self):
        def dens(x):
            return 1.0 + (np.abs(x[..., 0]) < 0.5)

        mu_both = MeasureData(n=2, atoms=((np.zeros(2), 0.3),), density=dens)
        mu_ac = MeasureData(n=2, density=dens)
        lat = Lattice.rasterize(ball(2, 1.5), spacing=0.05)
        assert total_variation(mu_both, lattice=lat) == pytest.approx(
            0.3 + total_variation(mu_ac, lattice=lat), abs=1e-12
        )

    def test_negative_part_counts_toward_tv(self):
        def neg(x):
            return 0.5 * (np.linalg.norm(x, axis=-1) < 0.5)

        mu = MeasureData(n=2, negative_part=neg)
        lat = Lattice.rasterize(ball(2, 1.0), spacing=0.02)
        assert total_variation(mu, lattice=lat) == pytest.approx(
            0.5 * math.pi * 0.25, rel=3e-2
        )

    def test_tv_radius_of_single_atom(self):
        w3 = unit_ball_volume(3).value
        mu = MeasureData(n=3, atoms=((np.zeros(3), w3 * 0.5 ** 3),))
        assert tv_radius(mu) == pytest.approx(0.5, rel=1e-14)


class TestRestrict:
    def test_atoms_outside_dropped(self):
        mu = MeasureData(n=3, atoms=((np.zeros(3), 0.4), (np.full(3, 5.0), 0.6)))
        cut = restrict(mu, ball(3, 1.0))
        assert len(cut.atoms) == 1
        assert cut.atoms[0].mass == pytest.approx(0.4)

    def test_density_reverts_to_lebesgue_outside(self):
        mu = MeasureData(n=3, density=2.0)
        cut = restrict(mu, ball(3, 1.0))
        pts = np.array([[0.0, 0, 0], [3.0, 0, 0]])
        assert np.allclose(cut.density_at(pts), [2.0, 1.0])

    def test_negative_part_vanishes_outside(self):
        mu = MeasureData(n=3, negative_part=0.5)
        cut = restrict(mu, ball(3, 1.0))
        pts = np.array([[0.0, 0, 0], [3.0, 0, 0]])
        assert np.allclose(cut.negative_at(pts), [0.5, 0.0])

    def test_restrict_shrinks_tv(self):
        mu = MeasureData(n=3, atoms=((np.zeros(3), 0.4), (np.full(3, 5.0), 0.6)))
        dom = ball(3, 1.0)
        assert total_variation(restrict(mu, dom)) <= total_variation(mu)


class TestEllipsoidDomain:
    def test_det_normalized(self):
        dom = EllipsoidDomain(A=4.0 * np.eye(2), center=np.zeros(2), radius=1.0)
        assert np.linalg.det(dom.A) == pytest.approx(1.0, abs=1e-12)

    def test_contains_strict(self):
        dom = ball(2, 1.0)
        assert bool(dom.contains(np.array([0.5, 0.0])))
        assert not bool(dom.contains(np.array([1.0, 0.0])))

    def test_volume(self):
        assert ball(3, 2.0).volume() == pytest.approx(
            unit_ball_volume(3).value * 8.0, rel=1e-14
        )

    def test_bounding_box_contains_surface_points(self):
        A = np.array([[2.0, 0.3], [0.3, 0.7]])
        A = A / np.linalg.det(A) ** 0.5
        dom = EllipsoidDomain(A=A, center=np.array([1.0, -2.0]), radius=1.3)
        lo, hi = dom.bounding_box()
        # sample the boundary through the unit circle preimage
        L = np.linalg.cholesky(np.linalg.inv(dom.A))
        th = np.linspace(0, 2 * math.pi, 400)
        circle = np.stack([np.cos(th), np.sin(th)], axis=1)
        surface = dom.center + dom.radius * circle @ L.T
        assert np.all(surface >= lo - 1e-12) and np.all(surface <= hi + 1e-12)

    def test_rejects_bad_matrices(self):
        with pytest.raises(ValueError):
            EllipsoidDomain(A=np.array([[1.0, 0.5], [0.0, 1.0]]), center=np.zeros(2), radius=1.0)
        with pytest.raises(ValueError):
            EllipsoidDomain(A=-np.eye(2), center=np.zeros(2), radius=1.0)
        with pytest.raises(ValueError):
            ball(2, -1.0)


class TestQuadraticAsymptote:
    def test_standard_matches_half_norm(self):
        q = QuadraticAsymptote.standard(3)
        x = np.array([1.0, 2.0, 2.0])
        assert q(x) == pytest.approx(4.5)
        assert np.allclose(q.gradient(x), x)

    def test_gradient_box_covers_gradient_image(self):
        rng = np.random.default_rng(5)
        M = rng.normal(size=(3, 3))
        A = M @ M.T + 3 * np.eye(3)
        A = A / np.linalg.det(A) ** (1 / 3)
        q = QuadraticAsymptote(A=A, b=np.array([0.2, -0.1, 0.3]))
        dom = ball(3, 1.7, center=np.array([0.5, 0.0, -0.5]))
        lo, hi = q.gradient_box(dom)
        pts = rng.normal(size=(4000, 3))
        pts = dom.center + 0.999 * dom.radius * pts / np.linalg.norm(pts, axis=1, keepdims=True)
        grads = q.gradient(pts)
        assert np.all(grads >= lo) and np.all(grads <= hi)


class TestStrictConvexityCriterion:
    def test_small_masses_satisfy(self):
        atoms = [(np.zeros(3), 1e-3), (np.array([1.0, 0, 0]), 1e-3)]
        out = strict_convexity_criterion(atoms, np.eye(3))
        assert out["satisfied"] and out["margin"] < 1

    def test_large_masses_fail(self):
        w3 = unit_ball_volume(3).value
        atoms = [(np.zeros(3), 50 * w3), (np.array([0.1, 0, 0]), 50 * w3)]
        out = strict_convexity_criterion(atoms, np.eye(3))
        assert not out["satisfied"] and out["margin"] > 1

    def test_margin_formula(self):
        # two unit-radius atoms at separation s: margin = 2 / (8 d s^2)^{n/2}
        w3 = unit_ball_volume(3).value
        d = sharp_constant(3).value
        s = 1.7
        atoms = [(np.zeros(3), w3), (np.array([s, 0, 0]), w3)]
        out = strict_convexity_criterion(atoms, np.eye(3))
        assert out["margin"] == pytest.approx(2.0 / (8 * d * s ** 2) ** 1.5, rel=1e-12)

    def test_needs_two_atoms(self):
        with pytest.raises(ValueError, match="two atoms"):
            strict_convexity_criterion([(np.zeros(3), 1.0)], np.eye(3))

    def test_coincident_atoms_rejected(self):
        atoms = [(np.zeros(3), 1.0), (np.zeros(3), 1.0)]
        with pytest.raises(ValueError, match="coincident"):
            strict_convexity_criterion(atoms, np.eye(3))

    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_unimodular_invariance(self, seed):
        # (y, A) -> (M y, M^{-T} A M^{-1}) leaves every pair form y^T A y fixed,
        # so the margin is exactly invariant up to roundoff
        rng = np.random.default_rng(seed)
        locs = rng.normal(size=(3, 3)) * 2.0
        masses = rng.uniform(0.1, 2.0, size=3)
        if min(
            np.linalg.norm(locs[i] - locs[j])
            for i in range(3)
            for j in range(i + 1, 3)
        ) < 1e-3:
            return
        M = np.eye(3) + 0.4 * rng.normal(size=(3, 3))
        if abs(np.linalg.det(M)) < 0.2:
            return
        M = M / abs(np.linalg.det(M)) ** (1 / 3)
        S = rng.normal(size=(3, 3))
        A = S @ S.T + np.eye(3)
        A = A / np.linalg.det(A) ** (1 / 3)
        atoms = [(locs[i], masses[i]) for i in range(3)]
        base = strict_convexity_criterion(atoms, A)
        Minv = np.linalg.inv(M)
        moved = [(M @ locs[i], masses[i]) for i in range(3)]
        A_moved = Minv.T @ A @ Minv
        out = strict_convexity_criterion(moved, A_moved)
        assert out["margin"] == pytest.approx(base["margin"], rel=1e-10)
        assert out["satisfied"] == base["satisfied"]
