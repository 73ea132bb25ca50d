"""Figure rendering for run reports.

Every report path renders its figures to files next to the delimited
output; the CSVs stay the canonical machine-readable artifacts and the
figures are a human-readable companion (disable with --no-figures).
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_excess_figure(path, profiles, fits=None):
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for k, prof in enumerate(profiles):
        label = f"centre ({prof.center[0]:g}, {prof.center[1]:g})"
        mask = prof.phi_tilde > 0
        if not np.any(mask):
            continue
        ax.loglog(prof.radii[mask], prof.phi_tilde[mask], "o-", label=label)
        if fits and fits[k] is not None and not fits[k].short_circuit:
            r = prof.radii[mask]
            ax.loglog(
                r,
                np.exp(fits[k].intercept) * r ** fits[k].slope,
                "--",
                color="gray",
                linewidth=0.8,
            )
    ax.set_xlabel("radius r")
    ax.set_ylabel("normalised excess")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_poincare_figure(path, rows):
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    families = sorted({row["family"] for row in rows})
    for fam in families:
        pts = [(row["eps"] * row["L"], row["ratio"]) for row in rows
               if row["family"] == fam]
        pts.sort()
        x = [p[0] for p in pts]
        y = [p[1] for p in pts]
        ax.loglog(x, np.maximum(y, 1e-300), "o", ms=3, label=fam)
    ax.set_xlabel("L eps")
    ax.set_ylabel("normalised ratio")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_scaling_figure(path, rows):
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    idx = [row["ball"] for row in rows]
    ax.plot(idx, [row["ratio"] for row in rows], "s-")
    ax.set_xlabel("ball index")
    ax.set_ylabel("lhs / rhs")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_solver_figure(path, report):
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.4))
    js = [s.j for s in report.stages]
    axes[0].semilogx(js, [s.energy_plain for s in report.stages], "o-")
    axes[0].set_xlabel("stage j")
    axes[0].set_ylabel("energy")
    if report.cauchy_l1:
        axes[1].loglog(
            [c["j"] for c in report.cauchy_l1],
            [max(c["l1_diff"], 1e-300) for c in report.cauchy_l1],
            "o-",
        )
    axes[1].set_xlabel("stage j")
    axes[1].set_ylabel("L1 stage difference")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_ornstein_figure(path, trace):
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    cells = [np.prod(t["cells"]) for t in trace]
    ax.semilogx(cells, [t["ratio"] for t in trace], "o-")
    ax.axhline(1.0, color="gray", linewidth=0.8)
    ax.set_xlabel("cells")
    ax.set_ylabel("max |grad u| L1 / |eps(u)| L1")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
