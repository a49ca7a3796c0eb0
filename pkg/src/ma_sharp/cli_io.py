"""Command-line entry point and report writing.

Every command writes one run directory: ``report.json`` plus ``tables/``
with the CSV behind each figure, and ``figures/`` with rendered PNGs
(suppressed by ``--no-figures``). The report splits into ``payload`` and
``meta``: the payload is canonicalized (sorted keys, plain floats) and
must be byte-identical across runs with the same seed; wall times and
timestamps live in meta, which also records the payload's sha256 so
reproducibility is checkable without re-parsing.

Headline scalars in payloads are written as {value, tol, provenance}
triples. Provenance is one of ``closed-form`` (evaluated from an exact
formula), ``oracle`` (independently recomputed, e.g. quadrature or a
brute-force geometric route), or ``calibrated`` (a frozen constant fit
offline and shipped with the package).

Exit codes: 0 success; 2 unusable configuration; 3 a solve failed to
converge; 4 a mathematical invariant the run was asked to certify does
not hold (the report is still written in both failure modes).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._rng import generator
from .discrete_ma import cell_volume_clipped, ma_measure
from .dirichlet_solver import DirichletProblem, Infeasible, comparison_check, solve
from .entire_scheme import (
    ExpansionSchedule,
    decay_profile,
    deviation,
    deviation_bound,
    entire_approximate,
    extremal_sandwich,
    load_calibration,
    radial_section_volume,
    sharpness_experiment,
    strict_convexity_audit,
)
from .measure_model import EllipsoidDomain, MeasureData, QuadraticAsymptote
from .obstacle_solver import ObstacleProblem, solve_mass_matched, solve_radial_obstacle
from .radial_core import (
    asymptote_value,
    legendre_transform,
    profile_W,
    profile_W_star,
)
from .specialfn import sharp_constant, sharp_constant_integral, unit_ball_volume

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGENCE = 3
EXIT_INVARIANT = 4

DEFAULT_SEED = 1299721


class ConfigError(Exception):
    pass


def qty(value, tol, provenance):
    if provenance not in ("closed-form", "oracle", "calibrated"):
        raise ValueError(f"unknown provenance {provenance!r}")
    return {"value": float(value), "tol": float(tol), "provenance": provenance}


def _plain(x):
    """Canonicalize for the payload: plain python types, no NaN/inf."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


class RunContext:
    def __init__(self, out: Path, seed: int, profile: str, jobs: int, figures_on: bool):
        self.out = Path(out)
        self.seed = int(seed)
        self.profile = profile
        self.jobs = int(jobs)
        self.figures_on = figures_on
        self.figure_paths: list = []
        self.table_paths: list = []

    def table(self, name: str, header, rows):
        path = self.out / "tables" / f"{name}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        self.table_paths.append(str(path))
        return path

    def figure(self, name: str, render):
        """render: callable taking the target path; skipped by --no-figures."""
        if not self.figures_on:
            return None
        path = self.out / "figures" / f"{name}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        render(path)
        self.figure_paths.append(str(path))
        return path

    def write_report(self, payload: dict, wall: float) -> Path:
        payload = _plain(payload)
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        meta = {
            "written_at": datetime.now(timezone.utc).isoformat(),
            "wall_seconds": wall,
            "payload_sha256": hashlib.sha256(blob).hexdigest(),
            "version": __version__,
            "profile": self.profile,
            "seed": self.seed,
            "figures": sorted(self.figure_paths),
            "tables": sorted(self.table_paths),
        }
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / "report.json"
        path.write_text(json.dumps({"payload": payload, "meta": meta}, sort_keys=True, indent=2) + "\n")
        return path


# -- configuration -------------------------------------------------------


PROFILES = ("smoke", "desk", "deep")

DEFAULTS = {
    "constants": {
        "smoke": {"dims": [3, 4, 5]},
        "desk": {"dims": [3, 4, 5, 6, 7, 8]},
        "deep": {"dims": list(range(3, 13))},
    },
    "radial": {
        "smoke": {"n": 3, "a": 1.0, "r_max": 20.0, "k": 400},
        "desk": {"n": 3, "a": 1.0, "r_max": 60.0, "k": 3000},
        "deep": {"n": 3, "a": 1.0, "r_max": 120.0, "k": 12000},
    },
    "solve": {
        "smoke": {"n": 3, "radius": 1.0, "spacing": 0.25, "a": 0.5},
        "desk": {"n": 3, "radius": 1.5, "spacing": 0.125, "a": 0.5},
        "deep": {"n": 3, "radius": 2.0, "spacing": 0.1, "a": 0.5},
    },
    "obstacle": {
        "smoke": {"n": 3, "radius": 1.6, "spacing": 1 / 3, "a": 0.6,
                  "radial_r_max": 4.0, "radial_k": 64},
        "desk": {"n": 3, "radius": 2.2, "spacing": 0.2, "a": 0.8,
                 "radial_r_max": 4.0, "radial_k": 64},
        "deep": {"n": 3, "radius": 2.6, "spacing": 0.15, "a": 0.8,
                 "radial_r_max": 4.0, "radial_k": 128},
    },
    "entire": {
        "smoke": {"n": 3, "a": 1.0, "force_grid": False,
                  "schedule": {"radii": [8.0, 16.0], "spacing": 0.5},
                  "probe_radii": [2.0, 3.0, 4.0, 6.0]},
        "desk": {"n": 3, "a": 1.0, "force_grid": True,
                 "schedule": {"radii": [3.0, 6.0], "spacing": 0.5},
                 "probe_radii": [1.5, 2.0, 2.5]},
        "deep": {"n": 3, "a": 1.0, "force_grid": True,
                 "schedule": {"radii": [4.0, 8.0], "spacing": 0.4},
                 "probe_radii": [1.6, 2.4, 3.2, 4.0]},
    },
    "sandwich": {
        "smoke": {"n": 3, "radius": 1.2, "spacing": 0.3, "a": 0.3,
                  "y": [0.3, 0.0, 0.0], "count": 6},
        "desk": {"n": 3, "radius": 1.3, "spacing": 0.2, "a": 0.3,
                 "y": [0.2, 0.0, 0.0], "count": 50},
        "deep": {"n": 3, "radius": 1.5, "spacing": 0.15, "a": 0.3,
                 "y": [0.3, 0.0, 0.0], "count": 100},
    },
    "sharpness": {
        # anchor slack scales with a^n while the lattice bias on u(0) scales
        # with h^2, so the coarse smoke lattice needs the larger atom
        "smoke": {"n": 3, "a": 0.8, "rho_list": [1.0], "spacing": [0.4]},
        "desk": {"n": 3, "a": 0.5, "rho_list": [1.0, 1.5, 2.0],
                 "spacing": [0.2, 0.2, 0.2]},
        "deep": {"n": 3, "a": 0.5, "rho_list": [1.0, 1.5, 2.0, 2.5],
                 "spacing": [0.15, 0.15, 0.15, 0.15]},
    },
    "audit": {
        "smoke": {"n": 3, "separation": 1.2, "atom_a": 0.4,
                  "schedule": {"radii": [2.5], "spacing": 0.5}},
        "desk": {"n": 3, "separation": 1.2, "atom_a": 0.4,
                 "schedule": {"radii": [2.5, 5.0], "spacing": 0.45}},
        "deep": {"n": 3, "separation": 1.0, "atom_a": 0.5,
                 "schedule": {"radii": [3.0, 6.0], "spacing": 0.4}},
    },
    "verify-all": {
        "smoke": {"dims": [3, 4, 5], "radial_k": 400, "radial_r_max": 20.0},
        "desk": {"dims": [3, 4, 5, 6], "radial_k": 2000, "radial_r_max": 40.0},
        "deep": {"dims": [3, 4, 5, 6, 7, 8], "radial_k": 6000, "radial_r_max": 80.0},
    },
}

_ALLOWED_KEYS = {
    "constants": {"dims"},
    "radial": {"n", "a", "r_max", "k"},
    "solve": {"n", "radius", "spacing", "a", "atoms"},
    "obstacle": {"n", "radius", "spacing", "a", "slope", "radial_r_max", "radial_k"},
    "entire": {"n", "a", "atoms", "force_grid", "schedule", "probe_radii", "probes"},
    "sandwich": {"n", "radius", "spacing", "a", "y", "count"},
    "sharpness": {"n", "a", "rho_list", "spacing"},
    "audit": {"n", "separation", "atom_a", "atoms", "schedule", "flat_tol"},
    "verify-all": {"dims", "radial_k", "radial_r_max"},
}


def _load_config(command: str, path: str | None, profile: str) -> dict:
    cfg = dict(DEFAULTS[command][profile])
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        exp = user.pop("experiment", None)
        if exp is not None and exp != command:
            raise ConfigError(f"config is for experiment {exp!r}, not {command!r}")
        seed = user.pop("seed", None)
        if seed is not None:
            cfg["seed"] = int(seed)
        unknown = set(user) - _ALLOWED_KEYS[command]
        if unknown:
            raise ConfigError(
                f"unknown config keys for {command}: {sorted(unknown)}; "
                f"allowed: {sorted(_ALLOWED_KEYS[command])}"
            )
        cfg.update(user)
    return cfg


def _max_nodes() -> int:
    return int(os.environ.get("MA_SHARP_MAX_NODES", "400000"))


def _check_node_budget(domain, spacing: float) -> None:
    est = domain.volume() / spacing ** domain.n
    cap = _max_nodes()
    if est > cap:
        raise ConfigError(
            f"lattice of about {est:.3g} nodes exceeds the cap {cap} "
            "(raise MA_SHARP_MAX_NODES to override)"
        )


def _parse_atoms(raw, n: int):
    atoms = []
    for item in raw:
        if not isinstance(item, dict) or "y" not in item or "mass" not in item:
            raise ConfigError("each atom needs {'y': [...], 'mass': m}")
        y = np.asarray(item["y"], dtype=float)
        if y.shape != (n,):
            raise ConfigError(f"atom location {item['y']} is not {n}-dimensional")
        atoms.append((y, float(item["mass"])))
    return tuple(atoms)


# -- commands ------------------------------------------------------------


def run_constants(cfg: dict, ctx: RunContext):
    rows = []
    table = []
    worst = 0.0
    for n in cfg["dims"]:
        d = sharp_constant(n).value
        d_quad = sharp_constant_integral(n)
        w = unit_ball_volume(n).value
        gap = abs(d - d_quad)
        worst = max(worst, gap)
        rows.append(
            {
                "n": int(n),
                "sharp_constant": qty(d, 5e-13, "closed-form"),
                "sharp_constant_quadrature": qty(d_quad, 1e-10, "oracle"),
                "agreement_gap": qty(gap, 1e-10, "oracle"),
                "unit_ball_volume": qty(w, 5e-13, "closed-form"),
                "ceiling_unit_defect": qty(deviation_bound(n, w), 1e-12, "closed-form"),
            }
        )
        table.append([int(n), d, d_quad, gap, w])
    ctx.table("constants", ["n", "sharp_constant", "quadrature", "gap", "unit_ball_volume"], table)

    def render(path):
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        ns = [r[0] for r in table]
        ax.plot(ns, [r[1] for r in table], "o-", label="sharp constant")
        ax.set_xlabel("dimension")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, dpi=130)
        plt.close(fig)

    ctx.figure("constants", render)
    ok = worst <= 1e-10
    payload = {"experiment": "constants", "rows": rows, "all_ok": bool(ok)}
    return payload, EXIT_OK if ok else EXIT_INVARIANT


def run_radial(cfg: dict, ctx: RunContext):
    from . import figures as figs

    n, a = int(cfg["n"]), float(cfg["a"])
    r_max, K = float(cfg["r_max"]), int(cfg["k"])
    W = profile_W(n, a, K, r_max)
    Ws = profile_W_star(n, a, K, r_max)
    lim = asymptote_value(n, a)
    h = r_max / K

    dev_W = deviation(W, a)
    dev_Ws = deviation(Ws, a)
    # the exact half-oscillation is d a^2 / 2 for both extremal profiles
    target_dev = 0.5 * lim

    conj = legendre_transform(W)
    splat = conj.grid[conj.values <= 1e-12]
    plateau = float(splat.max()) if len(splat) else 0.0
    ws_on = np.interp(conj.grid, Ws.grid, Ws.values)
    keep = conj.grid <= 0.9 * conj.grid[-1]
    dual_gap = float(np.max(np.abs(conj.values - ws_on)[keep]))
    dual_tol = max(1e-3, 20.0 * h * h) * max(1.0, lim)

    tail = a ** n / max((n - 2) * r_max ** (n - 2), 1e-300)
    approach = abs((W.values[-1] - 0.5 * r_max ** 2) - lim)

    payload = {
        "experiment": "radial",
        "n": n,
        "a": a,
        "asymptote_value": qty(lim, 1e-12, "closed-form"),
        "deviation_cone": qty(dev_W.deviation, 2 * h * h, "oracle"),
        "deviation_plateau": qty(dev_Ws.deviation, 2 * h * h, "oracle"),
        "deviation_target": qty(target_dev, 1e-12, "closed-form"),
        "ratio_cone": qty(dev_W.ratio, 1e-6, "oracle"),
        "ratio_expected": qty(2.0 ** (2.0 / n - 1.0), 1e-15, "closed-form"),
        "conjugate_plateau_radius": qty(plateau, 2 * conj.grid[1], "oracle"),
        "conjugate_gap": qty(dual_gap, dual_tol, "oracle"),
        "asymptote_approach_gap": qty(approach, 2 * tail, "oracle"),
    }
    ok = (
        abs(dev_W.deviation - target_dev) <= 2 * h * h * max(1.0, lim)
        and abs(dev_Ws.deviation - target_dev) <= 2 * h * h * max(1.0, lim)
        and dual_gap <= dual_tol
        and abs(plateau - a) <= max(2 * float(conj.grid[1]), 2 * h)
        and approach <= 2 * tail
    )

    # far-field gap decays like r^{2-n}; fit only when the window is wide
    r_lo, r_hi = 10.0 * a, min(200.0 * a, 0.9 * r_max)
    if r_hi >= 3.0 * r_lo:
        rs = np.geomspace(r_lo, r_hi, 24)
        gap_tail = np.abs(np.interp(rs, W.grid, W.values) - 0.5 * rs ** 2 - lim)
        coef = np.polyfit(np.log(rs), np.log(np.maximum(gap_tail, 1e-300)), 1)
        slope = float(coef[0])
        payload["decay_slope"] = qty(slope, 0.02 * (n - 2), "oracle")
        payload["decay_slope_expected"] = qty(-(n - 2.0), 1e-15, "closed-form")
        ok = ok and abs(slope + (n - 2)) <= 0.02 * (n - 2)
        ctx.table(
            "decay_tail",
            ["r", "gap_to_limit"],
            [[float(r), float(g)] for r, g in zip(rs, gap_tail)],
        )

    # section growth |{u < u(0)+s}| = C s^{n/2}; C must agree across K/2, K
    s_hi = 0.8 * float(W.values[-1])
    heights = np.geomspace(0.1 * s_hi, s_hi, 12)
    fits = []
    for kk in (K // 2, K):
        prof_k = W if kk == K else profile_W(n, a, kk, r_max)
        vols = radial_section_volume(prof_k, heights)
        cf = np.polyfit(np.log(heights), np.log(vols), 1)
        fits.append({"k": kk, "exponent": float(cf[0]), "intercept": float(cf[1])})
    sec = fits[-1]
    c_vals = [math.exp(f["intercept"]) for f in fits]
    c_drift = abs(c_vals[1] - c_vals[0]) / c_vals[1]
    payload["section_exponent"] = qty(sec["exponent"], 0.03 * (n / 2.0), "oracle")
    payload["section_exponent_expected"] = qty(n / 2.0, 1e-15, "closed-form")
    payload["section_coefficient"] = qty(c_vals[1], 0.1 * c_vals[1], "oracle")
    payload["section_coefficient_drift"] = qty(c_drift, 0.1, "oracle")
    ok = (
        ok
        and abs(sec["exponent"] - n / 2.0) <= 0.03 * (n / 2.0)
        and c_drift <= 0.10
    )
    vols_fine = radial_section_volume(W, heights)
    ctx.table(
        "section_growth",
        ["height", "volume"],
        [[float(s), float(v)] for s, v in zip(heights, vols_fine)],
    )
    ctx.figure(
        "section_fit",
        lambda p: figs.plot_section_fit(
            heights, vols_fine, sec["exponent"], sec["intercept"], p
        ),
    )

    payload["all_ok"] = bool(ok)

    rows = [
        [float(r), float(vw), float(vw - 0.5 * r * r)]
        for r, vw in zip(W.grid, W.values)
    ]
    ctx.table("profile_cone", ["r", "value", "gap_to_asymptote"], rows)
    rows = [
        [float(r), float(v), float(v - 0.5 * r * r)]
        for r, v in zip(Ws.grid, Ws.values)
    ]
    ctx.table("profile_plateau", ["r", "value", "gap_to_asymptote"], rows)
    ctx.figure(
        "profiles",
        lambda p: figs.plot_profiles([W, Ws], ["cone defect", "plateau defect"], p),
    )
    ctx.figure(
        "gap",
        lambda p: figs.plot_gap([W, Ws], ["cone defect", "plateau defect"], p, limits=[lim, -lim]),
    )
    return payload, EXIT_OK if ok else EXIT_INVARIANT


def _ball_problem(cfg: dict, measure: MeasureData) -> DirichletProblem:
    n = int(cfg["n"])
    dom = EllipsoidDomain(A=np.eye(n), center=np.zeros(n), radius=float(cfg["radius"]))
    _check_node_budget(dom, float(cfg["spacing"]))
    return DirichletProblem(
        domain=dom,
        boundary=QuadraticAsymptote.standard(n),
        measure=measure,
        spacing=float(cfg["spacing"]),
    )


def run_solve(cfg: dict, ctx: RunContext):
    from . import figures as figs

    n = int(cfg["n"])
    w = unit_ball_volume(n).value
    d = sharp_constant(n).value
    if "atoms" in cfg:
        atoms = _parse_atoms(cfg["atoms"], n)
        a_eq = (sum(m for _, m in atoms) / w) ** (1.0 / n)
    else:
        a_eq = float(cfg["a"])
        atoms = ((np.zeros(n), w * a_eq ** n),)
    if a_eq >= float(cfg["radius"]):
        raise ConfigError("defect radius must sit inside the domain")
    measure = MeasureData(n=n, atoms=atoms)
    prob = _ball_problem(cfg, measure)
    _, targets = prob.build()
    u, rep = solve(prob)
    mass = ma_measure(u, target=targets)

    prob_plain = DirichletProblem(
        domain=prob.domain, boundary=prob.boundary,
        measure=MeasureData(n=n), spacing=prob.spacing,
    )
    u_plain, rep_plain = solve(prob_plain)
    cmp = comparison_check(u, u_plain, tol=1e-7)

    central = len(atoms) == 1 and float(np.linalg.norm(atoms[0][0])) <= 1e-12
    origin_ok = True
    u_origin = None
    if central:
        k = int(np.argmin((u.nodes ** 2).sum(axis=1)))
        u_origin = float(u.values[k])
        origin_ok = -d * a_eq ** 2 - 10 * rep.tol_mass <= u_origin <= 10 * rep.tol_mass

    r_nodes = np.linalg.norm(u.nodes[u.interior], axis=1)
    gaps = u.values[u.interior] - 0.5 * r_nodes ** 2
    order = np.argsort(r_nodes)
    ctx.table(
        "solution_gap",
        ["r", "gap_to_boundary_paraboloid"],
        [[float(r_nodes[i]), float(gaps[i])] for i in order],
    )

    def render(path):
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(r_nodes[order], gaps[order], ".", ms=2)
        ax.set_xlabel("|x|")
        ax.set_ylabel("u - |x|^2/2")
        fig.tight_layout()
        fig.savefig(path, dpi=130)
        plt.close(fig)

    ctx.figure("solution_gap", render)

    res = mass.residual
    max_res = float(np.abs(res[u.interior]).max()) if res is not None else float("nan")
    payload = {
        "experiment": "solve",
        "n": n,
        "defect_radius": qty(a_eq, 0.0, "closed-form"),
        "solver": rep.to_dict(),
        "plain_solver": rep_plain.to_dict(),
        "mass_residual": qty(max_res if math.isfinite(max_res) else 0.0, 10 * rep.tol_mass, "oracle"),
        "comparison_dominated": bool(cmp["ok"]),
        "all_ok": None,
    }
    if central:
        payload["u_origin"] = qty(u_origin, 10 * rep.tol_mass, "oracle")
        payload["u_origin_lower_bound"] = qty(-d * a_eq ** 2, 1e-12, "closed-form")
        payload["u_origin_in_bracket"] = bool(origin_ok)
    if not (rep.converged and rep_plain.converged):
        payload["all_ok"] = False
        return payload, EXIT_NONCONVERGENCE
    ok = cmp["ok"] and origin_ok and max_res <= 10 * rep.tol_mass
    payload["all_ok"] = bool(ok)
    return payload, EXIT_OK if ok else EXIT_INVARIANT


def run_obstacle(cfg: dict, ctx: RunContext):
    n = int(cfg["n"])
    w = unit_ball_volume(n).value
    a = float(cfg["a"])
    slope = np.asarray(cfg.get("slope", [0.0] * n), dtype=float)
    dom = EllipsoidDomain(A=np.eye(n), center=np.zeros(n), radius=float(cfg["radius"]))
    _check_node_budget(dom, float(cfg["spacing"]))
    prob = ObstacleProblem(
        domain=dom, boundary=QuadraticAsymptote.standard(n),
        measure=MeasureData(n=n), spacing=float(cfg["spacing"]), slope=slope,
    )
    u, rep = solve_mass_matched(prob, a)
    target = w * a ** n

    tol_comp = 10 * rep.solver.tol_mass
    complementarity_ok = (
        rep.max_contact_excess <= tol_comp and rep.max_free_penetration <= 1e-7
    )
    vol_band = rep.coincidence.half_cell_correction * 3 + 2 * rep.solver.tol_mass

    payload = {
        "experiment": "obstacle",
        "n": n,
        "a": a,
        "height": qty(rep.height, 2 * float(cfg["spacing"]) ** 2, "oracle"),
        "deficit": qty(rep.deficit, 10 * rep.solver.tol_mass, "oracle"),
        "deficit_target": qty(target, 1e-12, "closed-form"),
        "coincidence_volume": qty(rep.coincidence.volume, vol_band, "oracle"),
        "coincidence": rep.coincidence.to_dict(),
        "complementarity_ok": bool(complementarity_ok),
        "solver": rep.to_dict(),
    }

    radial_ok = None
    if float(np.linalg.norm(slope)) == 0.0:
        r_max, K = float(cfg["radial_r_max"]), int(cfg["radial_k"])
        rad = solve_radial_obstacle(n, a, r_max, K=K)
        h_shell = r_max / K
        band = w * ((rad.contact_radius + h_shell) ** n
                    - max(rad.contact_radius - h_shell, 0.0) ** n)
        radial_ok = abs(rad.volume - target) <= band
        payload["radial_cross_check"] = {
            "height": qty(rad.height, 2 * h_shell ** 2, "oracle"),
            "coincidence_volume": qty(rad.volume, band, "oracle"),
            "contact_radius": qty(rad.contact_radius, h_shell, "oracle"),
            "within_one_shell": bool(radial_ok),
            "height_agreement_gap": qty(
                abs(rad.height - rep.height),
                0.12 * max(rad.height, 1e-12) + 2 * float(cfg["spacing"]) ** 2,
                "oracle",
            ),
        }
        ctx.table(
            "radial_obstacle_profile",
            ["r", "value"],
            [[float(r), float(v)] for r, v in zip(rad.profile.grid, rad.profile.values)],
        )

    if rep.endpoint_capped or not rep.solver.converged:
        payload["all_ok"] = False
        return payload, EXIT_NONCONVERGENCE
    ok = complementarity_ok and (radial_ok is not False)
    payload["all_ok"] = bool(ok)
    return payload, EXIT_OK if ok else EXIT_INVARIANT


def run_entire(cfg: dict, ctx: RunContext):
    from . import figures as figs

    n = int(cfg["n"])
    w = unit_ball_volume(n).value
    cal = load_calibration()
    if "atoms" in cfg:
        atoms = _parse_atoms(cfg["atoms"], n)
    else:
        atoms = ((np.zeros(n), w * float(cfg["a"]) ** n),)
    mu = MeasureData(n=n, atoms=atoms)
    sched_cfg = cfg["schedule"]
    schedule = ExpansionSchedule(
        radii=tuple(sched_cfg["radii"]),
        spacing=sched_cfg.get("spacing", 0.5),
        inner_fraction=sched_cfg.get("inner_fraction", 1.0 / 32.0),
    )
    q = QuadraticAsymptote.standard(n)
    if "probes" in cfg:
        probe_pts = np.asarray(cfg["probes"], dtype=float)
    else:
        e1 = np.zeros(n)
        e1[0] = 1.0
        probe_pts = np.stack([r * e1 for r in cfg["probe_radii"]])
    _check_node_budget(
        EllipsoidDomain(A=np.eye(n), center=np.zeros(n), radius=schedule.radii[-1]),
        min(schedule.spacing),
    )

    result = entire_approximate(
        mu, q, schedule, probes=probe_pts, force_grid=bool(cfg.get("force_grid", False))
    )
    dev = deviation(result)
    probe_pairs = [(x, 0.5 * float(np.linalg.norm(x))) for x in probe_pts]
    decay = decay_profile(result, q, probe_pairs, mu, C_hat=cal["C_hat"])

    # successive-level stability on the inner half of the smaller level
    stability = None
    if len(result.levels) >= 2:
        tv = result.tv()
        R1 = result.levels[-2].R
        bound = 2.0 * cal["C_hat"] * tv * (0.5 * R1) ** (2 - n)
        if result.kind == "radial":
            p1, p2 = result.levels[-2].solution, result.levels[-1].solution
            rs = p1.grid[p1.grid <= 0.5 * R1]
            diff = float(max(abs(float(p2(r)) - float(p1(r))) for r in rs))
        else:
            u1, u2 = result.levels[-2].solution, result.levels[-1].solution
            look2 = {tuple(ix): k for k, ix in enumerate(u2.lattice.index)}
            diff = 0.0
            for k1, ix in enumerate(u1.lattice.index):
                if not u1.interior[k1]:
                    continue
                if float(np.linalg.norm(u1.nodes[k1])) > 0.5 * R1:
                    continue
                k2 = look2.get(tuple(ix))
                if k2 is not None:
                    diff = max(diff, abs(float(u1.values[k1]) - float(u2.values[k2])))
        stability = {
            "max_diff": qty(diff, 0.0, "oracle"),
            "bound": qty(bound, 0.0, "calibrated"),
            "ok": bool(diff <= bound),
        }

    eps_h = cal["eps_h"]
    ratio_ok = dev.ratio <= 1.0 + eps_h
    payload = {
        "experiment": "entire",
        "n": n,
        "kind": result.kind,
        "total_variation": qty(result.tv(), 1e-12, "closed-form"),
        "deviation": {
            "sup_plus": qty(dev.sup_plus, 0.0, "oracle"),
            "sup_minus": qty(dev.sup_minus, 0.0, "oracle"),
            "deviation": qty(dev.deviation, 0.0, "oracle"),
            "bound": qty(dev.bound, 1e-12, "closed-form"),
            "ratio": qty(dev.ratio, eps_h, "calibrated"),
        },
        "ratio_within_ceiling": bool(ratio_ok),
        "decay": {
            "C_hat": qty(cal["C_hat"], 0.0, "calibrated"),
            "all_ok": decay["all_ok"],
            "slope": qty(decay["slope"], 0.1, "oracle") if math.isfinite(decay["slope"]) else None,
        },
        "stability": stability,
        "levels": [
            {
                "R": lvl.R,
                "spacing": lvl.spacing,
                "converged": (lvl.report.converged if lvl.report is not None else True),
            }
            for lvl in result.levels
        ],
        "probes": result.probe_table,
    }
    ctx.table(
        "decay",
        ["r", "rho", "lhs", "rhs", "local_tv", "ok"],
        [[row["r"], row["rho"], row["lhs"], row["rhs"], row["local_tv"], row["ok"]]
         for row in decay["rows"]],
    )
    ctx.figure("decay", lambda p: figs.plot_decay(decay["rows"], p))
    if result.kind == "radial":
        profs = [lvl.solution for lvl in result.levels]
        labels = [f"R={lvl.R:g}" for lvl in result.levels]
        ctx.figure("gap", lambda p: figs.plot_gap(profs, labels, p))
        prof = result.final
        ctx.table(
            "levels",
            ["r", "value", "gap"],
            [[float(r), float(v), float(v - 0.5 * r * r)]
             for r, v in zip(prof.grid, prof.values)],
        )
    else:
        u2 = result.final
        rr = np.linalg.norm(u2.nodes[u2.interior], axis=1)
        gg = u2.values[u2.interior] - 0.5 * rr ** 2
        order = np.argsort(rr)
        ctx.table(
            "levels",
            ["r", "gap"],
            [[float(rr[i]), float(gg[i])] for i in order],
        )

        def render(path):
            import matplotlib.pyplot as plt

            fig, ax = plt.subplots(figsize=(6, 4))
            ax.plot(rr[order], gg[order], ".", ms=2)
            ax.set_xlabel("|y|")
            ax.set_ylabel("u - |y|^2/2")
            fig.tight_layout()
            fig.savefig(path, dpi=130)
            plt.close(fig)

        ctx.figure("gap", render)

    if any(not lvl["converged"] for lvl in payload["levels"]):
        payload["all_ok"] = False
        return payload, EXIT_NONCONVERGENCE
    ok = ratio_ok and decay["all_ok"] and (stability is None or stability["ok"])
    payload["all_ok"] = bool(ok)
    return payload, EXIT_OK if ok else EXIT_INVARIANT


def run_sandwich(cfg: dict, ctx: RunContext):
    from . import figures as figs

    n = int(cfg["n"])
    dom = EllipsoidDomain(A=np.eye(n), center=np.zeros(n), radius=float(cfg["radius"]))
    _check_node_budget(dom, float(cfg["spacing"]))
    result = extremal_sandwich(
        domain=dom,
        boundary=QuadraticAsymptote.standard(n),
        a=float(cfg["a"]),
        y=np.asarray(cfg["y"], dtype=float),
        spacing=float(cfg["spacing"]),
        seed=ctx.seed,
        count=int(cfg["count"]),
        jobs=ctx.jobs,
    )
    kinds: dict = {}
    for s in result["samples"]:
        kinds[s["kind"]] = kinds.get(s["kind"], 0) + 1
    payload = {
        "experiment": "sandwich",
        "n": n,
        "a": cfg["a"],
        "count": int(cfg["count"]),
        "lower_envelope": qty(result["lower"], result["tol"], "oracle"),
        "upper_envelope": qty(result["upper"], result["tol"], "oracle"),
        "ordered": bool(result["lower"] <= result["upper"] + result["tol"]),
        "all_inside": result["all_inside"],
        "kind_counts": dict(sorted(kinds.items())),
        "samples": result["samples"],
    }
    ctx.table(
        "samples",
        ["index", "kind", "value", "inside", "converged"],
        [[k, s["kind"], s["value"], s["inside"], s["converged"]]
         for k, s in enumerate(result["samples"])],
    )
    ctx.figure("sandwich", lambda p: figs.plot_sandwich(result, p))
    if not all(s["converged"] for s in result["samples"]):
        payload["all_ok"] = False
        return payload, EXIT_NONCONVERGENCE
    ok = result["all_inside"] and payload["ordered"]
    payload["all_ok"] = bool(ok)
    return payload, EXIT_OK if ok else EXIT_INVARIANT


def run_sharpness(cfg: dict, ctx: RunContext):
    from . import figures as figs

    cal = load_calibration()
    spacing = cfg["spacing"]
    spacing = float(spacing) if np.ndim(spacing) == 0 else [float(s) for s in spacing]
    result = sharpness_experiment(
        n=int(cfg["n"]), a=float(cfg["a"]),
        rho_list=[float(r) for r in cfg["rho_list"]],
        spacing=spacing,
        C_hat=cal["C_hat"],
    )
    eps_h = cal["eps_h"]
    ratios_ok = all(row["ratio"] <= 1.0 + eps_h for row in result["rows"])
    payload = {
        "experiment": "sharpness",
        "a": result["a"],
        "bound": qty(result["bound"], 1e-12, "closed-form"),
        "C_hat": qty(result["C_hat"], 0.0, "calibrated"),
        "rows": [
            {
                "rho": row["rho"],
                "ratio": qty(row["ratio"], eps_h, "calibrated"),
                "deviation": qty(row["deviation"], 0.0, "oracle"),
                "height": qty(row["height"], 0.0, "oracle"),
                "deficit": qty(row["deficit"], 0.0, "oracle"),
                "anchor_lower_ok": row["anchor_lower_ok"],
                "anchor_upper_ok": row["anchor_upper_ok"],
                "endpoint_capped": row["endpoint_capped"],
            }
            for row in result["rows"]
        ],
        "strictly_increasing": result["strictly_increasing"],
        "anchors_ok": result["anchors_ok"],
        "ratios_within_ceiling": bool(ratios_ok),
    }
    ctx.table(
        "sharpness",
        ["rho", "ratio", "deviation", "sup_plus", "sup_minus", "height", "deficit",
         "u_origin", "u_apex_gap"],
        [[r["rho"], r["ratio"], r["deviation"], r["sup_plus"], r["sup_minus"],
          r["height"], r["deficit"], r["u_origin"], r["u_apex_gap"]]
         for r in result["rows"]],
    )
    ctx.figure("ratios", lambda p: figs.plot_ratios(result["rows"], p))
    if any(r["endpoint_capped"] for r in result["rows"]):
        payload["all_ok"] = False
        return payload, EXIT_NONCONVERGENCE
    mono_required = len(result["rows"]) >= 2
    ok = result["anchors_ok"] and ratios_ok and (
        result["strictly_increasing"] or not mono_required
    )
    payload["all_ok"] = bool(ok)
    return payload, EXIT_OK if ok else EXIT_INVARIANT


def run_audit(cfg: dict, ctx: RunContext):
    n = int(cfg["n"])
    w = unit_ball_volume(n).value
    if "atoms" in cfg:
        atoms = _parse_atoms(cfg["atoms"], n)
    else:
        sep, aa = float(cfg["separation"]), float(cfg["atom_a"])
        e1 = np.zeros(n)
        e1[0] = 0.5 * sep
        atoms = ((e1, w * aa ** n), (-e1, w * aa ** n))
    mu = MeasureData(n=n, atoms=atoms)
    sched_cfg = cfg["schedule"]
    schedule = ExpansionSchedule(
        radii=tuple(sched_cfg["radii"]),
        spacing=sched_cfg.get("spacing", 0.5),
        inner_fraction=sched_cfg.get("inner_fraction", 1.0 / 32.0),
    )
    result = strict_convexity_audit(
        mu, QuadraticAsymptote.standard(n), schedule,
        flat_tol=cfg.get("flat_tol"),
    )
    crit = result["criterion"]
    payload = {
        "experiment": "audit",
        "n": n,
        "criterion_satisfied": None if crit is None else crit["satisfied"],
        "criterion_margin": None if crit is None else qty(crit["margin"], 1e-10, "closed-form"),
        "verdict": result.get("verdict", "no_flats"),
        "inter_atom_flat": result["inter_atom_flat"],
        "consistent": result["consistent"],
        "flat_count": len(result["flats"]),
    }
    ctx.table(
        "flats",
        ["axis", "start", "end", "max_second_diff"],
        [[f.get("axis"), str(f.get("start")), str(f.get("end")), f.get("max_second_diff")]
         for f in result["flats"]],
    )
    ok = result["consistent"]
    payload["all_ok"] = bool(ok)
    return payload, EXIT_OK if ok else EXIT_INVARIANT


def _star_cone(n: int, a: float, seed: int = 5):
    """Single interior vertex of a cone over a random direction star."""
    rng = generator(seed, "cone")
    dirs = rng.normal(size=(30 * n, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    nodes = np.vstack([np.zeros(n), dirs])
    values = a * np.linalg.norm(nodes, axis=1)
    boundary = np.ones(len(nodes), bool)
    boundary[0] = False
    box = np.stack([-2 * a * np.ones(n), 2 * a * np.ones(n)])
    from .discrete_ma import ConvexNodalFunction

    return ConvexNodalFunction(
        n=n, nodes=nodes, values=values, boundary=boundary, gradient_box=box
    )


def run_verify_all(cfg: dict, ctx: RunContext):
    checks = []

    def add(name, ok, detail):
        checks.append({"name": name, "ok": bool(ok), "detail": detail})

    # closed-form constants against the quadrature oracle
    worst = max(
        abs(sharp_constant(n).value - sharp_constant_integral(n)) for n in cfg["dims"]
    )
    add("constants_quadrature", worst <= 1e-10, {"worst_gap": worst})

    # radial profiles: conjugate plateau and deviation identity
    K, r_max = int(cfg["radial_k"]), float(cfg["radial_r_max"])
    W = profile_W(3, 1.0, K, r_max)
    Ws = profile_W_star(3, 1.0, K, r_max)
    lim = asymptote_value(3, 1.0)
    h = r_max / K
    dev = deviation(W, 1.0)
    add(
        "radial_deviation",
        abs(dev.deviation - 0.5 * lim) <= 2 * h * h * max(1.0, lim),
        {"deviation": dev.deviation, "target": 0.5 * lim},
    )
    conj = legendre_transform(W)
    plateau = float(conj.grid[conj.values <= 1e-12].max())
    add("conjugate_plateau", abs(plateau - 1.0) <= max(2 * float(conj.grid[1]), 2 * h),
        {"plateau": plateau})
    add("plateau_profile_zero", float(np.abs(Ws.values[Ws.grid <= 1.0]).max()) <= 1e-12,
        {"max_inside": float(np.abs(Ws.values[Ws.grid <= 1.0]).max())})

    # cone cell: assembly route against the brute-force halfspace oracle
    cone = _star_cone(3, 0.8)
    rep = ma_measure(cone)
    v_assembly = float(rep.masses[0])
    v_oracle = cell_volume_clipped(cone, 0)
    add(
        "cone_two_route",
        abs(v_assembly - v_oracle) <= 1e-10 * max(1.0, v_oracle),
        {"assembly": v_assembly, "oracle": v_oracle,
         "ball_volume": unit_ball_volume(3).value * 0.8 ** 3},
    )

    # tiny Dirichlet: default iteration against the relaxation sweep
    dom = EllipsoidDomain(A=np.eye(2), center=np.zeros(2), radius=1.2)
    prob = DirichletProblem(
        domain=dom, boundary=QuadraticAsymptote.standard(2),
        measure=MeasureData(n=2), spacing=0.3,
    )
    u_a, rep_a = solve(prob)
    u_b, rep_b = solve(prob, method="sweep")
    gap = float(np.abs(u_a.values - u_b.values).max())
    add(
        "newton_vs_sweep",
        rep_a.converged and rep_b.converged and gap <= 10 * rep_a.tol_mass ** 0.5,
        {"sup_gap": gap, "newton_iters": rep_a.iterations, "sweeps": rep_b.iterations},
    )

    # radial obstacle: coincidence volume within one shell of the target
    rad = solve_radial_obstacle(3, 1.0, 4.0, K=64)
    h_shell = 4.0 / 64
    w3 = unit_ball_volume(3).value
    band = w3 * ((rad.contact_radius + h_shell) ** 3
                 - max(rad.contact_radius - h_shell, 0.0) ** 3)
    add(
        "obstacle_coincidence_shell",
        abs(rad.volume - w3) <= band,
        {"volume": rad.volume, "target": w3, "band": band},
    )

    # two-defect midpoint inequality (power mean), numeric spot check
    rng = generator(ctx.seed, "midpoint")
    ok_mid = True
    worst_slack = math.inf
    for _ in range(200):
        am, ap = rng.uniform(0.25, 4.0, size=2)
        lhs = 0.5 * (am ** 2 + ap ** 2)
        rhs = 2.0 ** (-2.0 / 3.0) * (am ** 3 + ap ** 3) ** (2.0 / 3.0)
        worst_slack = min(worst_slack, rhs - lhs)
        ok_mid &= lhs <= rhs + 1e-12
    add("midpoint_inequality", ok_mid, {"min_slack": worst_slack})

    ctx.table(
        "checks",
        ["name", "ok"],
        [[c["name"], c["ok"]] for c in checks],
    )
    ok = all(c["ok"] for c in checks)
    payload = {"experiment": "verify-all", "checks": checks, "all_ok": bool(ok)}
    return payload, EXIT_OK if ok else EXIT_INVARIANT


COMMANDS = {
    "constants": run_constants,
    "radial": run_radial,
    "solve": run_solve,
    "obstacle": run_obstacle,
    "entire": run_entire,
    "sandwich": run_sandwich,
    "sharpness": run_sharpness,
    "audit": run_audit,
    "verify-all": run_verify_all,
}


def _env(name, cast, default):
    raw = os.environ.get(name)
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad {name}={raw!r}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ma-sharp",
        description="Alexandrov estimates at desk scale: solvers, audits, reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="JSON config overriding the profile defaults")
        p.add_argument("--out", help="run directory (default runs/<command>)")
        p.add_argument("--seed", type=int, help="stream seed for randomized parts")
        p.add_argument("--jobs", type=int, help="worker threads for sample loops")
        p.add_argument("--profile", choices=PROFILES, help="size preset (default desk)")
        p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
        p.add_argument("--verbose", action="store_true", help="log solver progress")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr)
    try:
        profile = args.profile or _env("MA_SHARP_PROFILE", str, "desk")
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        cfg = _load_config(args.command, args.config, profile)
        seed = (
            args.seed
            if args.seed is not None
            else cfg.get("seed", _env("MA_SHARP_SEED", int, DEFAULT_SEED))
        )
        out = args.out or _env("MA_SHARP_OUT", str, None) or f"runs/{args.command}"
        jobs = args.jobs if args.jobs is not None else _env("MA_SHARP_JOBS", int, 1)
        figures_on = not (args.no_figures or _env("MA_SHARP_NO_FIGURES", str, "") in ("1", "true"))
        ctx = RunContext(Path(out), seed, profile, jobs, figures_on)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    t0 = time.perf_counter()
    try:
        payload, code = COMMANDS[args.command](cfg, ctx)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Infeasible as exc:
        print(f"infeasible problem: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    path = ctx.write_report(payload, wall=time.perf_counter() - t0)
    status = {EXIT_OK: "ok", EXIT_NONCONVERGENCE: "non-convergence", EXIT_INVARIANT: "invariant violation"}
    print(f"{args.command}: {status[code]} ({path})")
    return code


if __name__ == "__main__":
    sys.exit(main())
