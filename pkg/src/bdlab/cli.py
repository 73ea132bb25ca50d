"""Experiment orchestration.

Subcommands:

* ``run <config>``: solve the viscosity ladder, run the enabled
  diagnostics, write CSVs, report.json, manifest.json and figures under
  the configured output directory.  Exit code 0 when every inequality
  assertion passes, 2 when one fails, 1 on runtime errors.
* ``selftest``: the seeded inequality suites as a pass/fail table.
* ``poincare-sweep <config>``: just the convolution-Poincare sweep.
* ``ornstein <grid>``: the gradient-ratio ascent over refinements.

The worker count for diagnostics that parallelise over centres comes
from the BDLAB_THREADS environment variable; results are reduced in
input order, so outputs are byte-identical for any worker count.
"""

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import plots
from . import regularity as reg
from . import solver as solvermod
from .config import (
    ConfigError,
    build_datum,
    build_grid,
    build_integrand,
    load_config,
)
from .mesh import Grid, korn_probe, ornstein_probe
from .selftest import format_table, run_selftest

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_ASSERTION = 2

KORN_ZERO_BOUNDARY_BOUND = math.sqrt(2.0) + 1e-6


def worker_count():
    try:
        return max(1, int(os.environ.get("BDLAB_THREADS", "1")))
    except ValueError:
        return 1


def ordered_map(fn, items):
    """Map preserving input order; parallel when BDLAB_THREADS > 1."""
    workers = worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# diagnostics phases
# ---------------------------------------------------------------------------

def _standard_families(grid, datum, solution):
    """Field families for the Poincare sweep: a smooth bump, two rigid
    bodies welded along a line, and a concentrated shear layer."""
    x = grid.node_coords
    lo = np.array(grid.lo)
    hi = np.array(grid.hi)
    c = 0.5 * (lo + hi)
    span = hi - lo

    rho2 = np.sum(((x - c) / (0.35 * span)) ** 2, axis=1)
    prof = np.zeros(grid.n_nodes)
    inside = rho2 < 1.0
    prof[inside] = np.exp(-1.0 / (1.0 - rho2[inside]))
    smooth = np.stack([prof, -prof], axis=1)[:, : grid.dim]
    if grid.dim == 3:
        smooth = np.concatenate([smooth, np.zeros((grid.n_nodes, 1))], axis=1)

    from .symcalc import skew_from_params

    nrot = grid.dim * (grid.dim - 1) // 2
    A1 = skew_from_params(np.full(nrot, 0.4), grid.dim)
    A2 = skew_from_params(np.full(nrot, -0.3), grid.dim)
    left = (x - c) @ A1.T + 0.2
    right = (x - c) @ A2.T - 0.1
    pw = np.where((x[:, 0] < c[0])[:, None], left, right)

    layer = np.zeros_like(pw)
    width = 0.03 * span[0]
    layer[:, 1] = 0.5 * span[1] * np.tanh((x[:, 0] - c[0]) / width)

    return {"smooth": smooth, "piecewise_rigid": pw, "strain_layer": layer}


def _phase_excess(cfg, grid, values, checks):
    block = cfg.raw["diagnostics"]["excess"]
    centers = block.get("centers", [[0.5, 0.5]])
    radius = float(block.get("radius", 0.4))
    alpha_min = float(block.get("alpha_min", 0.25))
    smallness = block.get("smallness", 0.1)

    def one(center):
        prof = reg.excess(grid, values, np.asarray(center, float), radius)
        fit = reg.decay_fit(prof, alpha_min=alpha_min, smallness=smallness)
        return prof, fit

    results = ordered_map(one, centers)
    profiles = [r[0] for r in results]
    fits = [r[1] for r in results]
    for center, fit in zip(centers, fits):
        checks.append(
            {
                "name": f"excess decay at {center}",
                "passed": fit.passed,
                "detail": {
                    "slope": fit.slope,
                    "short_circuit": fit.short_circuit,
                    "alpha_min": alpha_min,
                },
            }
        )
    return profiles, fits


def _phase_poincare(cfg, grid, datum, solution):
    block = cfg.raw["diagnostics"]["poincare"]
    h = float(grid.h.max())
    eps_cells = block.get("eps_cells")
    if eps_cells is None:
        # dyadic scales from 2h up to an eighth of the domain span
        span = min(b - a for a, b in zip(grid.lo, grid.hi))
        eps_cells = []
        k = 2
        while k * h <= span / 8.0 + 1e-12:
            eps_cells.append(k)
            k *= 2
        eps_cells = eps_cells or [2]
    eps_list = [k * h for k in eps_cells]
    targets = block.get("load_eps", [1e-2, 1e-1, 1.0, 1e1, 1e2])
    lam = float(block.get("lambda_con", 1.001))
    families = _standard_families(grid, datum, solution)
    rows, fitted, stable, per_family = reg.poincare_sweep(
        grid, families, eps_list, targets, lam=lam
    )
    return rows, fitted, stable, per_family


def _phase_scaling(cfg, grid, values, f, checks):
    block = cfg.raw["diagnostics"]["scaling"]
    balls = [(np.asarray(c, float), float(r)) for c, r in block["balls"]]
    rows = reg.sobolev_scaling_check(
        grid, values, f.ellipticity_a, balls, branch=block.get("branch", "auto")
    )
    ratios = [row["ratio"] for row in rows]
    fitted = max(ratios)
    finite = all(np.isfinite(r) for r in ratios)
    stable = True
    if len(ratios) >= 3:
        stable = fitted <= 10.0 * sorted(ratios)[len(ratios) // 2]
    checks.append(
        {
            "name": "gradient-norm scaling ratios bounded",
            "passed": bool(finite and stable),
            "detail": {"fitted_constant": fitted, "balls": len(rows)},
        }
    )
    return rows


# ---------------------------------------------------------------------------
# run command
# ---------------------------------------------------------------------------

def command_run(args):
    cfg = load_config(args.config)
    out = Path(args.output_dir) if args.output_dir else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)

    t_start = time.perf_counter()
    wall = {}
    checks = []
    report = {"version": __version__, "config_hash": cfg.config_hash()}

    grid = build_grid(cfg)
    f = build_integrand(cfg)
    datum = build_datum(cfg, grid)

    solver_block = cfg.raw.get("solver", {})
    j_max = int(solver_block.get("j_max", 1))
    tol_scale = float(solver_block.get("tol_scale", 1.0))
    max_newton = int(solver_block.get("max_newton", 60))
    seed = int(solver_block.get("seed", cfg.seed))

    rng = np.random.default_rng(seed)
    warm = None
    if solver_block.get("random_warm_start", False):
        warm = datum.copy()
        interior = ~grid.boundary_node_mask
        warm[interior] += 0.1 * rng.standard_normal((int(interior.sum()), grid.dim))

    diag = cfg.raw.get("diagnostics", {})
    second_ball = None
    if "second_order" in diag:
        sb = diag["second_order"]
        second_ball = (np.asarray(sb["center"], float), float(sb["radius"]))

    t0 = time.perf_counter()
    ladder = solvermod.run_viscosity_ladder(
        f, grid, datum, j_max,
        tol_scale=tol_scale, warm_values=warm, max_newton=max_newton,
        second_order_ball=second_ball,
    )
    wall["solve"] = time.perf_counter() - t0
    report["solver"] = ladder.summary()

    energies = [s.energy_plain for s in ladder.stages]
    checks.append(
        {
            "name": "stage energies nonincreasing",
            "passed": all(
                b <= a + 1e-10 * max(1.0, abs(a))
                for a, b in zip(energies, energies[1:])
            ),
            "detail": {"energies": energies},
        }
    )
    if ladder.second_order:
        ratios = [s["ratio"] for s in ladder.second_order]
        base = ratios[0] if ratios else 0.0
        ok = all(
            np.isfinite(r) and (base == 0.0 or r <= 3.0 * base) for r in ratios
        )
        checks.append(
            {
                "name": "second-order energy ratio uniformly bounded in j",
                "passed": bool(ok),
                "detail": {"ratios": ratios},
            }
        )

    files = []
    t0 = time.perf_counter()
    if "excess" in diag:
        profiles, fits = _phase_excess(cfg, grid, ladder.values, checks)
        path = out / "excess_ladder.csv"
        reg.write_excess_csv(path, profiles)
        files.append(path)
        if not args.no_figures:
            fig = out / "excess_ladder.png"
            plots.save_excess_figure(fig, profiles, fits)
            files.append(fig)
    if "poincare" in diag:
        rows, fitted, stable, per_family = _phase_poincare(
            cfg, grid, datum, ladder.values
        )
        checks.append(
            {
                "name": "convolution-Poincare familywise stability",
                "passed": bool(stable),
                "detail": {"fitted_constant": fitted, "per_family": per_family},
            }
        )
        path = out / "poincare_sweep.csv"
        reg.write_poincare_csv(path, rows)
        files.append(path)
        if not args.no_figures:
            fig = out / "poincare_sweep.png"
            plots.save_poincare_figure(fig, rows)
            files.append(fig)
    if "scaling" in diag:
        rows = _phase_scaling(cfg, grid, ladder.values, f, checks)
        path = out / "scaling_check.csv"
        reg.write_scaling_csv(path, rows)
        files.append(path)
        if not args.no_figures:
            fig = out / "scaling_check.png"
            plots.save_scaling_figure(fig, rows)
            files.append(fig)
    if "korn" in diag:
        probe = korn_probe(
            grid, int(diag["korn"].get("trials", 100)), np.random.default_rng(seed)
        )
        checks.append(
            {
                "name": "zero-boundary gradient/strain ratio <= sqrt(2)",
                "passed": probe["zero_boundary_max_ratio"]
                <= KORN_ZERO_BOUNDARY_BOUND,
                "detail": probe,
            }
        )
    wall["diagnostics"] = time.perf_counter() - t0

    if not args.no_figures:
        fig = out / "solver_ladder.png"
        plots.save_solver_figure(fig, ladder)
        files.append(fig)

    report["checks"] = checks
    report["all_passed"] = all(c["passed"] for c in checks)
    wall["total"] = time.perf_counter() - t_start
    report["wall_clock"] = wall
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=1, sort_keys=True,
                                      default=float) + "\n")
    files.append(report_path)

    inventory = {
        p.name: {"sha256": _sha256(p), "bytes": p.stat().st_size}
        for p in files
    }
    digest_src = "".join(
        f"{name}:{inventory[name]['sha256']}"
        for name in sorted(n for n in inventory if n.endswith(".csv"))
    )
    manifest = {
        "version": __version__,
        "config_hash": cfg.config_hash(),
        "files": inventory,
        "outputs_digest": hashlib.sha256(digest_src.encode()).hexdigest(),
        "wall_clock": wall,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    )

    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}")
    return EXIT_OK if report["all_passed"] else EXIT_ASSERTION


def command_selftest(args):
    all_ok = True
    for seed in args.seed or [0]:
        results = run_selftest(seed)
        print(f"--- selftest (seed {seed}) ---")
        print(format_table(results))
        all_ok &= all(r.passed for r in results)
    return EXIT_OK if all_ok else EXIT_ASSERTION


def command_poincare_sweep(args):
    cfg = load_config(args.config)
    out = Path(args.output_dir) if args.output_dir else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    grid = build_grid(cfg)
    datum = build_datum(cfg, grid)
    if "poincare" not in cfg.raw.get("diagnostics", {}):
        cfg.raw.setdefault("diagnostics", {})["poincare"] = {}
    rows, fitted, stable, per_family = _phase_poincare(cfg, grid, datum, datum)
    reg.write_poincare_csv(out / "poincare_sweep.csv", rows)
    if not args.no_figures:
        plots.save_poincare_figure(out / "poincare_sweep.png", rows)
    print(f"fitted constant: {fitted:.6g}")
    for name, val in per_family.items():
        print(f"  {name}: {val:.6g}")
    print("familywise stability:", "PASS" if stable else "FAIL")
    return EXIT_OK if stable else EXIT_ASSERTION


def command_ornstein(args):
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = int(args.grid)
    grid = Grid(lo=(0.0, 0.0), hi=(1.0, 1.0), cells=(cells, cells))
    rng = np.random.default_rng(args.seed)
    trace = ornstein_probe(grid, args.iterations, rng, levels=args.levels)
    with open(out / "ornstein.csv", "w") as fh:
        fh.write("cells_per_axis,ratio\n")
        for t in trace:
            fh.write(f"{t['cells'][0]},{format(t['ratio'], '.17g')}\n")
    if not args.no_figures:
        plots.save_ornstein_figure(out / "ornstein.png", trace)
    for t in trace:
        print(f"{t['cells'][0]:>5} cells/axis: ratio {t['ratio']:.4f}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bdlab",
        description="numerical laboratory for linear-growth symmetric-"
        "gradient variational problems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="solve and diagnose one experiment")
    p_run.add_argument("config")
    p_run.add_argument("--output-dir", default=None)
    p_run.add_argument("--no-figures", action="store_true")
    p_run.set_defaults(fn=command_run)

    p_self = sub.add_parser("selftest", help="run the inequality suites")
    p_self.add_argument("--seed", type=int, action="append")
    p_self.set_defaults(fn=command_selftest)

    p_poin = sub.add_parser(
        "poincare-sweep", help="convolution-Poincare ratio sweep only"
    )
    p_poin.add_argument("config")
    p_poin.add_argument("--output-dir", default=None)
    p_poin.add_argument("--no-figures", action="store_true")
    p_poin.set_defaults(fn=command_poincare_sweep)

    p_orn = sub.add_parser("ornstein", help="gradient-ratio ascent probe")
    p_orn.add_argument("grid", type=int)
    p_orn.add_argument("--iterations", type=int, default=250)
    p_orn.add_argument("--levels", type=int, default=2)
    p_orn.add_argument("--seed", type=int, default=0)
    p_orn.add_argument("--output-dir", default="out")
    p_orn.add_argument("--no-figures", action="store_true")
    p_orn.set_defaults(fn=command_ornstein)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - contract: runtime errors exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
