"""Generate the frozen calibration fixture (C_hat, eps_h).

Run offline, commit the JSON, never re-fit inside acceptance runs. All
measurements come from the exactly-known single-atom instance at a = 1
(quadrature for the continuum channels, desk-scale lattices for the
discrete ones); the experiment code then treats both constants as fixed.

C_hat must dominate every appearance of the generic dimensional constant
in the decay and anchor inequalities. Channels:

  kernel      sup_r tail(r) * r^{n-2} / |mu|  -- the far-field Newtonian
              kernel constant (1/(4 pi) in n = 3), which is also the
              worst decay-probe requirement over admissible ball radii
              (rho <= |x|; larger rho saturates the local term instead).
  grid        the same requirement read off Richardson-extrapolated
              lattice probes at desk resolution, so the frozen constant
              absorbs discretization on top of the continuum tail.
  anchor      kernel * (omega_n / 2) / rho_min: the two-structure
              configurations bound one structure's influence on the
              other by a monopole at separation rho^2, while the slack
              is normalized by rho^{n-2}; composing the measured kernel
              with that geometry at the smallest supported rho gives the
              requirement without ever fitting on those experiments.

eps_h is the measured discretization allowance for deviation ratios at
the default experiment treatment (two levels ending in a 17-node box at
h = 1/2, per-node Richardson across levels): the worst |ratio - exact|
over cone instances at two defect scales, with a safety factor. After
level extrapolation the residual is lattice error near the cone vertex,
so the allowance shrinks with h.
"""

from __future__ import annotations

import json
import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from ma_sharp.entire_scheme import (  # noqa: E402
    ExpansionSchedule,
    decay_profile,
    deviation,
    entire_approximate,
)
from ma_sharp.measure_model import MeasureData, QuadraticAsymptote  # noqa: E402
from ma_sharp.radial_core import asymptote_gap, asymptote_value  # noqa: E402
from ma_sharp.specialfn import sharp_constant, unit_ball_volume  # noqa: E402

N = 3
A = 1.0
# The C margin must absorb what the a^n functional form cannot represent:
# the lattice bias at a singular vertex grows like a_tilde h^2 (measured
# 0.14 h^2 .. 0.20 h^2 over a in [0.5, 0.8]), which at desk spacings eats
# 30-50% of the kernel-composed requirement. 1.8 covers that with room;
# nothing downstream tightens when C grows, so the allowance stays honest.
MARGIN_C = 1.8
MARGIN_EPS = 1.25
RHO_MIN = 1.0          # smallest separation parameter the package supports
OUT = pathlib.Path(__file__).resolve().parents[1] / "src" / "ma_sharp" / "data"


def kernel_channel():
    w = unit_ball_volume(N).value
    lim = asymptote_value(N, A)
    tv = w * A ** N
    best = 0.0
    best_r = None
    for r in np.geomspace(1.5 * A, 400.0 * A, 160):
        tail = lim - asymptote_gap(N, A, float(r))
        req = tail * r ** (N - 2) / tv
        if req > best:
            best, best_r = float(req), float(r)
    return best, best_r


def grid_channel():
    w = unit_ball_volume(N).value
    mu = MeasureData(n=N, atoms=((np.zeros(N), w * A ** N),))
    q = QuadraticAsymptote.standard(N)
    schedule = ExpansionSchedule(radii=(3.0, 6.0), spacing=0.5)
    probes = np.array([[r, 0.0, 0.0] for r in (1.5, 2.0, 2.5)])
    result = entire_approximate(mu, q, schedule, probes=probes, force_grid=True)
    pairs = [(x, float(np.linalg.norm(x))) for x in probes]   # worst rho = |x|
    audit = decay_profile(result, q, pairs, mu, C_hat=1.0)
    tv = w * A ** N
    reqs = [row["lhs"] * row["r"] ** (N - 2) / tv for row in audit["rows"]]
    return max(reqs), [round(r, 6) for r in reqs]


def eps_channel():
    w = unit_ball_volume(N).value
    q = QuadraticAsymptote.standard(N)
    exact = 2.0 ** (2.0 / N - 1.0)
    schedule = ExpansionSchedule(radii=(2.1, 4.2), spacing=0.5)
    errs = {}
    for a in (0.8, 1.0):
        mu = MeasureData(n=N, atoms=((np.zeros(N), w * a ** N),))
        result = entire_approximate(mu, q, schedule, force_grid=True)
        rep = deviation(result)
        errs[a] = abs(rep.ratio - exact)
    return max(errs.values()), {str(k): round(v, 6) for k, v in errs.items()}


def main():
    w = unit_ball_volume(N).value
    kernel, kernel_r = kernel_channel()
    grid_req, grid_rows = grid_channel()
    anchor_req = kernel * (w / 2.0) / RHO_MIN ** (N - 2)
    c_hat = MARGIN_C * max(kernel, grid_req, anchor_req)
    eps_raw, eps_rows = eps_channel()
    eps_h = MARGIN_EPS * eps_raw

    payload = {
        "n": N,
        "C_hat": round(c_hat, 6),
        "eps_h": round(eps_h, 6),
        "channels": {
            "kernel": {"requirement": round(kernel, 6), "argmax_r": kernel_r,
                       "closed_form_limit": round(1.0 / (4.0 * np.pi), 6)},
            "grid": {"requirement": round(grid_req, 6), "per_probe": grid_rows},
            "anchor": {"requirement": round(anchor_req, 6), "rho_min": RHO_MIN},
            "eps": {"raw": round(eps_raw, 6), "per_scale": eps_rows,
                    "lattice": {"level_radii": [2.1, 4.2], "spacing": 0.5}},
        },
        "margins": {"C_hat": MARGIN_C, "eps_h": MARGIN_EPS},
        "sharp_constant": sharp_constant(N).value,
    }
    OUT.mkdir(parents=True, exist_ok=True)
    path = OUT / "calibration.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(payload, indent=2, sort_keys=True))
    print(f"\nwrote {path}")


if __name__ == "__main__":
    main()
