"""Expanding-domain scheme: deviation, decay audit, sandwich, experiments."""

import numpy as np
import pytest

from ma_sharp.entire_scheme import (
    DeviationReport,
    ExpansionSchedule,
    decay_profile,
    deviation,
    deviation_bound,
    entire_approximate,
    extremal_sandwich,
    load_calibration,
    normalize_frame,
    radial_section_volume,
    spheroid_domain,
    strict_convexity_audit,
)
from ma_sharp.measure_model import EllipsoidDomain, MeasureData, QuadraticAsymptote
from ma_sharp.radial_core import profile_W
from ma_sharp.specialfn import sharp_constant, unit_ball_volume


class TestDeviationBound:
    def test_single_atom_scale(self):
        # tv = w_n a^n gives 2^{-2/n} d a^2
        n, a = 3, 0.7
        tv = unit_ball_volume(n).value * a ** n
        d = sharp_constant(n).value
        assert deviation_bound(n, tv) == pytest.approx(
            2.0 ** (-2.0 / 3.0) * d * a ** 2, rel=1e-13
        )

    def test_monotone_in_tv(self):
        assert deviation_bound(3, 2.0) > deviation_bound(3, 1.0)

    def test_dimension_floor(self):
        with pytest.raises(ValueError):
            deviation_bound(2, 1.0)


class TestFrames:
    def test_spheroid_det_one(self):
        dom = spheroid_domain([2.5, 2.5, 4.0], center=[0.0, 0.0, 1.0])
        assert np.linalg.det(dom.A) == pytest.approx(1.0, abs=1e-12)
        # semi-axis points lie on the boundary
        for k, s in enumerate([2.5, 2.5, 4.0]):
            x = np.array(dom.center)
            x[k] += s
            d = x - dom.center
            assert float(d @ dom.A @ d) == pytest.approx(dom.radius ** 2, rel=1e-12)

    def test_normalize_frame_identity(self):
        rng = np.random.default_rng(2)
        S = rng.normal(size=(3, 3))
        A = S @ S.T + 2 * np.eye(3)
        A = A / np.linalg.det(A) ** (1 / 3)
        q = QuadraticAsymptote(A=A, b=np.array([0.4, -0.2, 0.1]), c=0.7)
        L, x_star, offset = normalize_frame(q)
        assert abs(np.linalg.det(L)) == pytest.approx(1.0, rel=1e-12)
        xs = rng.normal(size=(50, 3))
        ys = (xs - x_star) @ L.T
        assert np.allclose(q(xs), 0.5 * np.sum(ys ** 2, axis=1) + offset, atol=1e-10)


class TestExpansionSchedule:
    def test_rejects_nonincreasing_radii(self):
        with pytest.raises(ValueError, match="increasing"):
            ExpansionSchedule(radii=(2.0, 2.0))

    def test_rejects_spacing_mismatch(self):
        with pytest.raises(ValueError, match="spacing"):
            ExpansionSchedule(radii=(1.0, 2.0), spacing=(0.1, 0.1, 0.1))

    def test_support_validation(self):
        sched = ExpansionSchedule(radii=(4.0, 8.0))
        mu = MeasureData(n=3, atoms=((np.array([1.0, 0.0, 0.0]), 0.5),))
        with pytest.raises(ValueError, match="inner core"):
            sched.validate_support(mu)


class TestRadialDeviation:
    def test_single_atom_exact_half(self):
        # radial route: deviation is exactly d a^2 / 2 and the ratio is the
        # fixed constant 2^{2/n - 1}, independent of a
        n = 3
        d = sharp_constant(n).value
        w = unit_ball_volume(n).value
        sched = ExpansionSchedule(radii=(150.0, 300.0))
        for a in (0.5, 1.0):
            mu = MeasureData(n=n, atoms=((np.zeros(n), w * a ** n),))
            res = entire_approximate(mu, QuadraticAsymptote.standard(n), sched)
            assert res.kind == "radial"
            dev = deviation(res)
            assert dev.deviation == pytest.approx(0.5 * d * a ** 2, abs=1e-6)
            assert dev.ratio == pytest.approx(2.0 ** (2.0 / 3.0 - 1.0), abs=1e-5)
            assert dev.ratio < 1.0

    def test_profile_route_agrees(self):
        prof = profile_W(3, 0.8, K=4000, r_max=300.0)
        dev = deviation(prof, 0.8)
        d = sharp_constant(3).value
        assert dev.deviation == pytest.approx(0.5 * d * 0.64, abs=1e-6)

    def test_missing_scale_rejected(self):
        prof = profile_W(3, 0.8, K=200, r_max=20.0)
        with pytest.raises(ValueError, match="scale"):
            deviation(prof)


class TestGridDeviation:
    def test_atom_ratio_under_ceiling(self):
        # lattice route on the default schedule: the ratio must clear the
        # radial value only by the calibrated lattice allowance
        cal = load_calibration()
        n, a = 3, 0.5
        w = unit_ball_volume(n).value
        mu = MeasureData(n=n, atoms=((np.zeros(n), w * a ** n),))
        sched = ExpansionSchedule(radii=(2.1, 4.2), spacing=0.5)
        res = entire_approximate(mu, QuadraticAsymptote.standard(n), sched, force_grid=True)
        assert res.kind == "grid"
        dev = deviation(res)
        assert dev.ratio <= 1.0 + cal["eps_h"]
        assert 0.3 < dev.ratio < 1.0

    def test_off_center_atom_takes_grid_path(self):
        n = 3
        mu = MeasureData(n=n, atoms=((np.array([0.1, 0.0, 0.0]), 0.4),))
        sched = ExpansionSchedule(radii=(2.1, 4.2), spacing=0.5)
        res = entire_approximate(mu, QuadraticAsymptote.standard(n), sched)
        assert res.kind == "grid"

    def test_dimension_mismatch(self):
        mu = MeasureData(n=3, atoms=((np.zeros(3), 0.5),))
        with pytest.raises(ValueError, match="dimensions"):
            entire_approximate(mu, QuadraticAsymptote.standard(2), ExpansionSchedule(radii=(2.0,)))


class TestDecayProfile:
    def test_radial_tail_slope(self):
        n, a = 3, 1.0
        w = unit_ball_volume(n).value
        cal = load_calibration()
        mu = MeasureData(n=n, atoms=((np.zeros(n), w),))
        sched = ExpansionSchedule(radii=(50.0, 100.0))
        res = entire_approximate(mu, QuadraticAsymptote.standard(n), sched)
        probes = [(np.array([r, 0.0, 0.0]), 0.8 * r) for r in (8.0, 12.0, 18.0, 27.0)]
        out = decay_profile(res, QuadraticAsymptote.standard(n), probes, mu, cal["C_hat"])
        assert out["all_ok"], out["rows"]
        # |u - q - c| ~ a^n/(3 r): log-log slope -1, loosened for the
        # short probe ladder
        assert out["slope"] == pytest.approx(-1.0, abs=0.1)

    def test_rows_carry_local_tv(self):
        n = 3
        w = unit_ball_volume(n).value
        cal = load_calibration()
        mu = MeasureData(n=n, atoms=((np.zeros(n), w),))
        sched = ExpansionSchedule(radii=(30.0, 60.0))
        res = entire_approximate(mu, QuadraticAsymptote.standard(n), sched)
        probes = [(np.array([10.0, 0.0, 0.0]), 5.0), (np.array([10.0, 0.0, 0.0]), 15.0)]
        out = decay_profile(res, QuadraticAsymptote.standard(n), probes, mu, cal["C_hat"])
        r0, r1 = out["rows"]
        assert r0["local_tv"] == pytest.approx(0.0, abs=1e-12)   # ball misses the atom
        assert r1["local_tv"] == pytest.approx(w, rel=1e-12)     # ball holds the atom


class TestRadialSections:
    def test_volume_growth_exponent(self):
        # |S_h| ~ w_n (2h)^{n/2} once the window clears the cone region,
        # so fit high in the profile, as the report path does
        prof = profile_W(3, 1.0, K=2000, r_max=40.0)
        s_hi = 0.8 * float(prof.values[-1])
        hs = np.geomspace(0.1 * s_hi, s_hi, 12)
        vols = radial_section_volume(prof, hs)
        slope = np.polyfit(np.log(hs), np.log(vols), 1)[0]
        assert slope == pytest.approx(1.5, abs=0.05)

    def test_monotone(self):
        prof = profile_W(3, 1.0, K=500, r_max=20.0)
        v = radial_section_volume(prof, [1.0, 2.0, 3.0])
        assert v[0] < v[1] < v[2]

    def test_height_validation(self):
        prof = profile_W(3, 1.0, K=200, r_max=10.0)
        with pytest.raises(ValueError, match="positive"):
            radial_section_volume(prof, [0.0])
        with pytest.raises(ValueError, match="range"):
            radial_section_volume(prof, [1e9])


class TestSandwich:
    def test_small_ensemble_inside(self):
        dom = EllipsoidDomain(A=np.eye(2), center=np.zeros(2), radius=1.2)
        q = QuadraticAsymptote.standard(2)
        out = extremal_sandwich(
            dom, q, a=0.3, y=np.array([0.3, 0.2]), spacing=0.25, seed=42, count=6
        )
        assert out["lower"] <= out["upper"] + out["tol"]
        assert out["all_inside"], out["samples"]

    def test_seeded_determinism(self):
        dom = EllipsoidDomain(A=np.eye(2), center=np.zeros(2), radius=1.2)
        q = QuadraticAsymptote.standard(2)
        kw = dict(a=0.3, y=np.array([0.3, 0.2]), spacing=0.25, seed=42, count=3)
        v1 = [s["value"] for s in extremal_sandwich(dom, q, **kw)["samples"]]
        v2 = [s["value"] for s in extremal_sandwich(dom, q, **kw)["samples"]]
        assert v1 == v2


class TestStrictConvexityAudit:
    def test_radial_fast_path(self):
        mu = MeasureData(n=3, atoms=((np.zeros(3), 0.5),))
        sched = ExpansionSchedule(radii=(20.0, 40.0))
        out = strict_convexity_audit(mu, QuadraticAsymptote.standard(3), sched)
        assert out["kind"] == "radial"
        assert out["consistent"]

    def test_two_atoms_no_flat_when_criterion_holds(self):
        # well-separated small atoms: criterion satisfied, no flat between
        w = unit_ball_volume(3).value
        mu = MeasureData(
            n=3,
            atoms=(
                (np.array([-0.05, 0.0, 0.0]), w * 0.2 ** 3),
                (np.array([0.05, 0.0, 0.0]), w * 0.2 ** 3),
            ),
        )
        sched = ExpansionSchedule(radii=(2.1, 4.2), spacing=0.5, inner_fraction=0.05)
        out = strict_convexity_audit(mu, QuadraticAsymptote.standard(3), sched)
        assert out["kind"] == "grid"
        assert out["criterion"]["satisfied"]
        assert not out["inter_atom_flat"]
        assert out["consistent"]
        assert out["verdict"] == "no_flats"

    def test_needs_atoms(self):
        with pytest.raises(ValueError, match="atom"):
            strict_convexity_audit(
                MeasureData(n=3), QuadraticAsymptote.standard(3),
                ExpansionSchedule(radii=(2.0,)),
            )


class TestCalibration:
    def test_frozen_values(self):
        cal = load_calibration()
        assert cal["n"] == 3
        assert cal["C_hat"] == pytest.approx(0.30, abs=1e-12)
        assert cal["eps_h"] == pytest.approx(0.07091, abs=1e-5)
        assert cal["sharp_constant"] == pytest.approx(
            sharp_constant(3).value, rel=1e-12
        )

    def test_channels_compose(self):
        # the headline constant is the binding channel times its margin
        cal = load_calibration()
        anchor = cal["channels"]["anchor"]["requirement"]
        assert cal["C_hat"] == pytest.approx(anchor * cal["margins"]["C_hat"], rel=1e-4)
        # and it dominates every other channel with room to spare
        assert cal["C_hat"] > cal["channels"]["kernel"]["requirement"]
        for v in cal["channels"]["grid"]["per_probe"]:
            assert cal["C_hat"] > v
        assert cal["eps_h"] == pytest.approx(
            cal["channels"]["eps"]["raw"] * cal["margins"]["eps_h"], rel=1e-3
        )
