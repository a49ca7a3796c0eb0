"""Figure rendering for report runs.

Every plotting function takes data already computed by an experiment and
a target path, renders without a display, and returns the path. Figures
are a side channel: nothing downstream reads them back, so styling stays
minimal and the data they show must also appear in the tables.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_profiles",
    "plot_gap",
    "plot_decay",
    "plot_ratios",
    "plot_section_fit",
    "plot_sandwich",
]


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def plot_profiles(profiles, labels, path, title="radial profiles"):
    fig, ax = plt.subplots(figsize=(6, 4))
    for prof, lab in zip(profiles, labels):
        ax.plot(prof.grid, prof.values, label=lab, lw=1.2)
    ax.set_xlabel("r")
    ax.set_ylabel("u(r)")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_gap(profiles, labels, path, limits=None, title="gap to the asymptote"):
    fig, ax = plt.subplots(figsize=(6, 4))
    for prof, lab in zip(profiles, labels):
        ax.plot(prof.grid, prof.values - 0.5 * prof.grid ** 2, label=lab, lw=1.2)
    if limits:
        for lim in limits:
            ax.axhline(lim, color="gray", ls="--", lw=0.8)
    ax.set_xlabel("r")
    ax.set_ylabel("u(r) - r^2/2")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_decay(rows, path, title="pointwise decay audit"):
    r = np.array([row["r"] for row in rows])
    lhs = np.array([row["lhs"] for row in rows])
    rhs = np.array([row["rhs"] for row in rows])
    order = np.argsort(r)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(r[order], np.maximum(lhs[order], 1e-300), "o-", label="|u - q|", ms=3)
    ax.loglog(r[order], rhs[order], "s--", label="envelope", ms=3)
    ax.set_xlabel("|x|")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_ratios(rows, path, bound_label="ceiling", title="deviation ratio"):
    x = np.array([row["rho"] for row in rows])
    y = np.array([row["ratio"] for row in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(x, y, "o-", ms=4)
    ax.axhline(1.0, color="gray", ls="--", lw=0.8, label=bound_label)
    ax.set_xlabel("separation rho")
    ax.set_ylabel("deviation / ceiling")
    ax.set_ylim(0, 1.1)
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_section_fit(heights, volumes, slope, intercept, path, title="section growth"):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(heights, volumes, "o", ms=4, label="|{u < u(0)+h}|")
    hh = np.array([min(heights), max(heights)])
    ax.loglog(hh, np.exp(intercept) * hh ** slope, "--", label=f"slope {slope:.3f}")
    ax.set_xlabel("h")
    ax.set_ylabel("volume")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_sandwich(result, path, title="extremal envelopes"):
    vals = [s["value"] for s in result["samples"]]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(range(len(vals)), vals, s=12, label="random defects")
    ax.axhline(result["lower"], color="C1", lw=1.2, label="lower envelope")
    ax.axhline(result["upper"], color="C2", lw=1.2, label="upper envelope")
    ax.set_xlabel("sample")
    ax.set_ylabel("value at the probe node")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)
