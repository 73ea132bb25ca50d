"""Experiment configuration: a single JSON file, validated with
key-path attribution, plus builders for the grid, integrand and
boundary datum it describes."""

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import integrands as intg
from . import mesh as meshmod

BOUNDARY_PRESETS = ("shear", "stretch", "rigid", "bump", "custom-file")


class ConfigError(ValueError):
    """Invalid experiment configuration; message lists key paths."""


@dataclass
class ExperimentConfig:
    raw: dict
    path: Path | None = None

    @property
    def seed(self):
        return int(self.raw.get("seed", 0))

    @property
    def output_dir(self):
        return Path(self.raw.get("output_dir", "out"))

    def config_hash(self):
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    cfg = ExperimentConfig(raw=raw, path=path)
    errors = validate(cfg)
    if errors:
        raise ConfigError(
            f"{path}: invalid configuration:\n  " + "\n  ".join(errors)
        )
    return cfg


def _num(raw, *path, default=None):
    node = raw
    for key in path:
        if not isinstance(node, dict) or key not in node:
            return default
        node = node[key]
    return node


def validate(cfg):
    raw = cfg.raw
    errors = []

    domain = raw.get("domain", [[0.0, 0.0], [1.0, 1.0]])
    if (
        not isinstance(domain, list)
        or len(domain) != 2
        or len(domain[0]) != len(domain[1])
        or len(domain[0]) not in (2, 3)
    ):
        errors.append("domain: expected [[lo...],[hi...]] in dimension 2 or 3")
        return errors
    dim = len(domain[0])

    cells = _num(raw, "grid", "cells")
    if cells is None or len(cells) != dim:
        errors.append("grid.cells: expected one cell count per axis")
    else:
        for k, c in enumerate(cells):
            if int(c) < 8:
                errors.append(f"grid.cells[{k}]: resolution must be >= 8")

    kind = _num(raw, "integrand", "kind")
    param = _num(raw, "integrand", "param")
    a_claimed = None
    f = None
    if kind is None:
        errors.append("integrand.kind: required")
    else:
        try:
            f = intg.from_config(kind, param)
            a_claimed = f.ellipticity_a
        except intg.InvalidParameterError as exc:
            errors.append(f"integrand: {exc}")
    if f is not None and f.requires_nonvanishing_strain:
        if not _num(raw, "integrand", "nonvanishing_strain", default=False):
            errors.append(
                "integrand: this member degenerates at zero strain; set "
                "integrand.nonvanishing_strain = true to declare that the "
                "run keeps inf |eps(u)| > 0"
            )

    preset = _num(raw, "boundary", "preset")
    if preset not in BOUNDARY_PRESETS:
        errors.append(
            f"boundary.preset: expected one of {BOUNDARY_PRESETS}, got {preset!r}"
        )
    elif preset == "custom-file" and not _num(raw, "boundary", "path"):
        errors.append("boundary.path: required for the custom-file preset")

    j_max = _num(raw, "solver", "j_max", default=1)
    if int(j_max) < 1:
        errors.append("solver.j_max: must be >= 1")
    elif (int(j_max) & (int(j_max) - 1)) != 0:
        errors.append("solver.j_max: ladder is dyadic, use a power of two")

    excess_block = _num(raw, "diagnostics", "excess")
    if excess_block is not None and cells is not None and not errors:
        radius = float(excess_block.get("radius", 0.4))
        hmax = max(
            (domain[1][d] - domain[0][d]) / int(cells[d]) for d in range(dim)
        )
        n_ladder = 0
        r = radius
        while r >= 4.0 * hmax - 1e-12:
            n_ladder += 1
            r *= 0.5
        if n_ladder < 4:
            errors.append(
                "diagnostics.excess.radius: the dyadic ladder down to four "
                f"grid cells has only {n_ladder} points at this resolution; "
                "the decay fit needs at least 4"
            )

    scaling = _num(raw, "diagnostics", "scaling")
    if scaling is not None and f is not None:
        branch = scaling.get("branch", "auto")
        if branch == "auto":
            branch = "luxemburg" if dim == 2 else "sobolev"
        if a_claimed is None:
            errors.append(
                "diagnostics.scaling: integrand has no ellipticity exponent"
            )
        elif branch == "sobolev":
            if dim < 3:
                errors.append(
                    "diagnostics.scaling.branch: the Lebesgue-exponent "
                    "branch needs a 3d grid (predictor-invalid)"
                )
            elif a_claimed >= 1.0 + 2.0 / dim:
                errors.append(
                    f"diagnostics.scaling: a = {a_claimed:g} is outside "
                    f"a < 1 + 2/n = {1 + 2 / dim:g} (predictor-invalid)"
                )
        elif branch == "luxemburg":
            if a_claimed >= 2.0:
                errors.append(
                    f"diagnostics.scaling: a = {a_claimed:g} is outside "
                    "a < 2 for the exponential branch (predictor-invalid)"
                )
        else:
            errors.append(
                f"diagnostics.scaling.branch: unknown branch {branch!r}"
            )
    return errors


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_grid(cfg):
    domain = cfg.raw.get("domain", [[0.0, 0.0], [1.0, 1.0]])
    cells = cfg.raw["grid"]["cells"]
    return meshmod.Grid(lo=tuple(domain[0]), hi=tuple(domain[1]),
                        cells=tuple(int(c) for c in cells))


def build_integrand(cfg):
    return intg.from_config(
        cfg.raw["integrand"]["kind"], cfg.raw["integrand"].get("param")
    )


def boundary_datum(grid, preset, amplitude=0.5, path=None, base=None):
    """Nodal extension field realising a boundary-datum preset.

    shear bends linearly-plus-quadratically along the second axis (a
    plain affine shear is exactly minimised by its own extension, which
    would make every downstream diagnostic vacuous), stretch is a
    volume-preserving diagonal deformation, rigid is a rotation plus
    translation, bump vanishes on the boundary.
    """
    x = grid.node_coords
    n = grid.dim
    lo = np.array(grid.lo)
    hi = np.array(grid.hi)
    span = hi - lo
    values = np.zeros((grid.n_nodes, n))
    if preset == "shear":
        y = (x[:, 1] - lo[1]) / span[1]
        values[:, 0] = amplitude * (y + 0.5 * y * y) * span[1]
    elif preset == "stretch":
        values[:, 0] = amplitude * (x[:, 0] - lo[0])
        values[:, 1] = -amplitude * (x[:, 1] - lo[1])
    elif preset == "rigid":
        from .symcalc import skew_from_params

        c = 0.5 * (lo + hi)
        nrot = n * (n - 1) // 2
        A = skew_from_params(np.full(nrot, amplitude), n)
        values = (x - c) @ A.T + 0.1 * amplitude
    elif preset == "bump":
        c = 0.5 * (lo + hi)
        rho2 = np.sum(((x - c) / (0.5 * span)) ** 2, axis=1)
        prof = np.zeros(grid.n_nodes)
        inside = rho2 < 1.0
        prof[inside] = np.exp(-1.0 / (1.0 - rho2[inside]))
        values[:, 0] = amplitude * prof / math.exp(-1.0)
    elif preset == "custom-file":
        fgrid, vals = meshmod.load_field(path if base is None else base / path)
        if fgrid.cells != grid.cells or fgrid.lo != grid.lo:
            raise ConfigError(
                "boundary.path: field geometry does not match the grid"
            )
        values = vals
    else:
        raise ConfigError(f"unknown boundary preset {preset!r}")
    return values


def build_datum(cfg, grid):
    b = cfg.raw["boundary"]
    return boundary_datum(
        grid,
        b["preset"],
        amplitude=float(b.get("amplitude", 0.5)),
        path=b.get("path"),
        base=cfg.path.parent if cfg.path else None,
    )
