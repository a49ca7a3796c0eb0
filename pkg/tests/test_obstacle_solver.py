"""Plane-obstacle solves: complementarity, mass matching, coincidence sets."""

import numpy as np
import pytest

from ma_sharp.dirichlet_solver import DirichletProblem, solve
from ma_sharp.measure_model import EllipsoidDomain, MeasureData, QuadraticAsymptote
from ma_sharp.obstacle_solver import (
    ObstacleProblem,
    obstacle_comparison,
    solve_fixed_height,
    solve_mass_matched,
    solve_radial_obstacle,
)
from ma_sharp.radial_core import eval_W_star
from ma_sharp.specialfn import unit_ball_volume


def ball(n, radius):
    return EllipsoidDomain(A=np.eye(n), center=np.zeros(n), radius=radius)


def flat_obstacle_problem(n=2, radius=1.2, spacing=0.2, measure=None):
    return ObstacleProblem(
        domain=ball(n, radius),
        boundary=QuadraticAsymptote.standard(n),
        measure=measure if measure is not None else MeasureData(n=n),
        spacing=spacing,
        slope=np.zeros(n),
    )


class TestFixedHeight:
    def test_inactive_plane_reduces_to_dirichlet(self):
        prob = flat_obstacle_problem()
        u_obs, rep = solve_fixed_height(prob, height=-5.0)
        assert rep.coincidence.count == 0
        assert abs(rep.deficit) < 1e-6
        dprob = DirichletProblem(
            domain=prob.domain, boundary=prob.boundary,
            measure=prob.measure, spacing=prob.spacing,
        )
        u_dir, _ = solve(dprob)
        assert np.abs(u_obs.values - u_dir.values).max() < 1e-7

    def test_plane_above_boundary_rejected(self):
        prob = flat_obstacle_problem()
        with pytest.raises(ValueError, match="above the boundary"):
            solve_fixed_height(prob, height=100.0)

    def test_complementarity(self):
        # contact cells are mass-deficient, free nodes clear the plane
        prob = flat_obstacle_problem(radius=1.4, spacing=0.2)
        u, rep = solve_fixed_height(prob, height=0.35)
        assert rep.coincidence.count > 0
        assert rep.max_contact_excess <= rep.solver.tol_mass
        assert rep.max_free_penetration <= 1e-9
        assert rep.deficit > 0

    def test_higher_plane_removes_more(self):
        prob = flat_obstacle_problem(radius=1.4, spacing=0.2)
        _, r1 = solve_fixed_height(prob, height=0.2)
        _, r2 = solve_fixed_height(prob, height=0.45)
        assert r2.deficit > r1.deficit
        assert r2.coincidence.count >= r1.coincidence.count

    def test_contact_values_sit_on_plane(self):
        prob = flat_obstacle_problem(radius=1.4, spacing=0.2)
        u, rep = solve_fixed_height(prob, height=0.35)
        ell = prob.plane_values(u, 0.35)
        on = rep.coincidence.indices
        assert np.abs(u.values[on] - ell[on]).max() < 1e-12


class TestMassMatched:
    def test_deficit_hits_target(self):
        prob = flat_obstacle_problem(n=3, radius=1.5, spacing=0.3)
        a = 0.6
        u, rep = solve_mass_matched(prob, a)
        target = unit_ball_volume(3).value * a ** 3
        tol_match = 1e-8 * 0.3 ** 3 * int(u.interior.sum())
        assert abs(rep.deficit - target) <= tol_match
        assert not rep.endpoint_capped

    def test_solve_count_stays_small(self):
        # bracketed secant: the whole match, cold retries included, should
        # take about a dozen solves
        prob = flat_obstacle_problem(n=2, radius=1.4, spacing=0.15)
        _, rep = solve_mass_matched(prob, 0.5)
        assert rep.bisection_steps <= 20

    def test_coincidence_volume_within_surface_layer(self):
        # node counting bulges by up to a full surface layer at this coarse
        # spacing; the half-cell claim belongs to the radial path below
        prob = flat_obstacle_problem(n=3, radius=1.5, spacing=0.3)
        a = 0.6
        _, rep = solve_mass_matched(prob, a)
        target = unit_ball_volume(3).value * a ** 3
        slack = rep.coincidence.surface_count * 0.3 ** 3
        assert abs(rep.coincidence.volume - target) <= slack

    def test_endpoint_capped_on_impossible_budget(self):
        prob = flat_obstacle_problem(n=2, radius=1.0, spacing=0.25)
        # demand more removal than the interior holds
        _, rep = solve_mass_matched(prob, a=1.0, deficit_target=50.0)
        assert rep.endpoint_capped

    def test_comparison_monotonicity(self):
        # larger removal budget: higher plane, larger coincidence set,
        # nodewise larger solution
        prob = flat_obstacle_problem(n=2, radius=1.4, spacing=0.15)
        low = solve_mass_matched(prob, 0.35)
        high = solve_mass_matched(prob, 0.65)
        out = obstacle_comparison(low, high, tol=1e-8)
        assert out["premise_boundary"] and out["premise_volume"]
        assert out["height_ordered"] and out["values_ordered"], out


class TestRadialObstacle:
    def test_profile_matches_closed_form(self):
        res = solve_radial_obstacle(3, 1.0, 4.0, K=128)
        exact = np.array([eval_W_star(3, 1.0, float(r)) for r in res.profile.grid])
        assert np.abs(res.profile.values - exact).max() < 2e-3
        assert not res.endpoint_capped

    def test_coincidence_volume_one_cell_layer(self):
        # |{solution = plane}| vs w_n a^n, within the half-cell surface band
        w = unit_ball_volume(3).value
        for K in (64, 128):
            res = solve_radial_obstacle(3, 1.0, 4.0, K=K)
            assert abs(res.volume - w) <= res.half_cell_correction, K

    def test_refinement_shrinks_profile_error(self):
        errs = []
        for K in (64, 128):
            res = solve_radial_obstacle(3, 1.0, 4.0, K=K)
            exact = np.array([eval_W_star(3, 1.0, float(r)) for r in res.profile.grid])
            errs.append(np.abs(res.profile.values - exact).max())
        assert errs[1] < 0.6 * errs[0]

    def test_contact_radius_brackets_a(self):
        res = solve_radial_obstacle(3, 1.0, 4.0, K=128)
        h = 4.0 / 128
        assert 1.0 - 2 * h <= res.contact_radius <= 1.0 + 2 * h

    def test_deficit_equals_budget(self):
        w = unit_ball_volume(3).value
        res = solve_radial_obstacle(3, 1.0, 4.0, K=64)
        assert res.deficit == pytest.approx(w, abs=1e-7)

    def test_two_dimensional_chain(self):
        res = solve_radial_obstacle(2, 0.8, 3.0, K=96)
        exact = np.array([eval_W_star(2, 0.8, float(r)) for r in res.profile.grid])
        assert np.abs(res.profile.values - exact).max() < 3e-3
        assert not res.endpoint_capped
