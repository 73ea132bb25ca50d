"""Stage-wise viscosity minimisation of linear-growth energies.

Each stage j minimises the strongly convex functional

    E_j(w) = int f(eps(w)) + (1 + |eps(w)|^2) / (2 A_j j^2)

over the discrete Dirichlet class by damped Newton with Armijo
backtracking; A_j is recomputed from the previous stage's minimiser so
the regularisation weight normalises itself along the ladder.  In the
discrete setting every stage attains its minimum, so stages are solved
exactly (to the stage tolerance) instead of via an almost-minimiser
construction; the perturbation parameter of that construction plays no
role here.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg as sparse_cg
from scipy.sparse.linalg import LinearOperator, splu

from . import mesh as meshmod
from .integrands import sym_dim
from .mesh import (
    DomainError,
    boundary_penalty,
    integrate_qp,
    symmetric_gradient,
    values_at_quad_points,
)


class StagnationError(RuntimeError):
    """Line search or Newton iteration failed to make progress."""


class EnergyOverflowError(ArithmeticError):
    """Energy became non-finite during minimisation."""


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _strain_data(grid, values, cells=None):
    cell_nodes = grid.cell_nodes if cells is None else grid.cell_nodes[cells]
    u_cells = values[cell_nodes]
    J = np.einsum("cam,qad->cqmd", u_cells, grid.shape_grads)
    eps = 0.5 * (J + np.swapaxes(J, -1, -2))
    r = np.sqrt(np.sum(eps * eps, axis=(-2, -1)))
    return cell_nodes, eps, r


def energy(grid, f, values, reg=0.0, cells=None):
    """int f(eps(u)) + reg * int (1 + |eps(u)|^2) over the (sub)domain.

    Non-finite fields yield a non-finite energy (callers check and map
    it to an overflow error) rather than a warning storm.
    """
    with np.errstate(invalid="ignore", over="ignore"):
        _, _, r = _strain_data(grid, values, cells)
        dens = f.value_r(r)
        if reg:
            dens = dens + reg * (1.0 + r * r)
        return integrate_qp(grid, dens)


def gradient_vector(grid, f, values, reg=0.0, cells=None):
    """Nodal gradient of the energy (ndof vector, boundary rows included)."""
    cell_nodes, eps, r = _strain_data(grid, values, cells)
    psi = f.d1_over_r(r) + 2.0 * reg
    sigma = psi[..., None, None] * eps
    contrib = grid.quad_weight * np.einsum(
        "cqmd,qad->cam", sigma, grid.shape_grads
    )
    out = np.zeros((grid.n_nodes, grid.dim))
    np.add.at(out, cell_nodes, contrib)
    return out.reshape(-1)


def hessian_blocks(grid, f, values, reg=0.0, cells=None):
    """Sparse Hessian plus the per-node diagonal blocks used by the
    block-Jacobi preconditioner."""
    n = grid.dim
    s = sym_dim(n)
    cell_nodes, eps, r = _strain_data(grid, values, cells)
    ncell, nq = r.shape

    tan = f.d1_over_r(r) + 2.0 * reg
    rad = f.d2_safe(r) + 2.0 * reg
    safe_r = np.where(r > 1e-14, r, 1.0)
    vhat = np.empty((ncell, nq, s))
    k = 0
    for i in range(n):
        vhat[..., k] = eps[..., i, i] / safe_r
        k += 1
    for i in range(n):
        for j in range(i + 1, n):
            vhat[..., k] = math.sqrt(2.0) * eps[..., i, j] / safe_r
            k += 1
    vhat[r <= 1e-14] = 0.0

    D = (rad - tan)[..., None, None] * (vhat[..., :, None] * vhat[..., None, :])
    D += tan[..., None, None] * np.eye(s)

    B = grid.strain_basis  # (nq, s, nloc)
    K_loc = grid.quad_weight * np.einsum("qka,cqkl,qlb->cab", B, D, B)

    nloc = B.shape[2]
    ncorner = nloc // n
    dof = (cell_nodes[:, :, None] * n + np.arange(n)[None, None, :]).reshape(
        ncell, nloc
    )
    rows = np.repeat(dof, nloc, axis=1).reshape(-1)
    cols = np.tile(dof, (1, nloc)).reshape(-1)
    ndof = grid.n_nodes * n
    H = sparse.coo_matrix(
        (K_loc.reshape(-1), (rows, cols)), shape=(ndof, ndof)
    ).tocsr()

    blocks = np.zeros((grid.n_nodes, n, n))
    loc_blocks = K_loc.reshape(ncell, ncorner, n, ncorner, n)
    diag_contrib = np.einsum("caiaj->caij", loc_blocks)
    np.add.at(blocks, cell_nodes, diag_contrib)
    return H, blocks


def _block_jacobi(blocks, free_nodes, n):
    inv = np.linalg.inv(blocks[free_nodes])
    nf = inv.shape[0]

    def apply(x):
        return np.einsum("kij,kj->ki", inv, x.reshape(nf, n)).reshape(-1)

    return LinearOperator((nf * n, nf * n), matvec=apply)


def el_residual(grid, f, values, reg=0.0, free_dof_mask=None):
    """Dual norm of the energy gradient over unit-L2 test fields that
    vanish on the boundary: the l2 norm of the residual vector in the
    mass-orthonormalised basis."""
    g = gradient_vector(grid, f, values, reg)
    if free_dof_mask is None:
        free_dof_mask = np.repeat(~grid.boundary_node_mask, grid.dim)
    r = g[free_dof_mask]
    z = grid._mass_free_lu.solve(r)
    return float(math.sqrt(max(r @ z, 0.0)))


# ---------------------------------------------------------------------------
# Newton on a (sub)domain
# ---------------------------------------------------------------------------

def minimize_energy(
    grid,
    f,
    start_values,
    reg=0.0,
    tol=1e-8,
    max_newton=60,
    cells=None,
    free_node_mask=None,
    cg_maxiter=4000,
):
    """Damped Newton minimisation of the (regularised) energy over the
    degrees of freedom selected by ``free_node_mask``.

    Returns (values, info dict).  Raises StagnationError when the Armijo
    search exhausts 60 halvings or the iteration cap is hit, and
    EnergyOverflowError on non-finite energies.
    """
    n = grid.dim
    if free_node_mask is None:
        free_node_mask = ~grid.boundary_node_mask
    free_dofs = np.repeat(free_node_mask, n)
    values = start_values.copy()

    if cells is None:
        mass_solve = grid._mass_free_lu.solve if np.array_equal(
            free_node_mask, ~grid.boundary_node_mask
        ) else None
    else:
        mass_solve = None
    if mass_solve is None:
        M = meshmod.assemble_mass(grid)
        dofs = np.where(free_dofs)[0]
        mass_solve = splu(M[dofs][:, dofs].tocsc()).solve

    def dual_norm(gvec):
        r = gvec[free_dofs]
        z = mass_solve(r)
        return float(math.sqrt(max(r @ z, 0.0)))

    e = energy(grid, f, values, reg, cells)
    if not np.isfinite(e):
        raise EnergyOverflowError("non-finite energy at the starting point")
    energies = [e]
    residual = None
    for it in range(max_newton + 1):
        g = gradient_vector(grid, f, values, reg, cells)
        residual = dual_norm(g)
        if residual <= tol:
            return values, {
                "iterations": it,
                "residual": residual,
                "energy": e,
                "energy_trace": energies,
            }
        if it == max_newton:
            break
        H, blocks = hessian_blocks(grid, f, values, reg, cells)
        free_nodes = np.where(free_node_mask)[0]
        # Levenberg guard against loss of positive definiteness
        eigs = np.linalg.eigvalsh(blocks[free_nodes])
        min_eig = float(eigs.min())
        if min_eig < 1e-12:
            shift = 1e-12 - min_eig
            H = H + shift * sparse.identity(H.shape[0], format="csr")
            blocks = blocks + shift * np.eye(n)
        Hff = H[free_dofs][:, free_dofs]
        prec = _block_jacobi(blocks, free_nodes, n)
        rhs = -g[free_dofs]
        cg_tol = min(0.1, 0.1 * residual / max(tol, 1e-300)) * 1e-3
        cg_tol = max(min(cg_tol, 1e-4), 1e-14)
        d, info = sparse_cg(
            Hff, rhs, M=prec, rtol=cg_tol, atol=0.0, maxiter=cg_maxiter
        )
        if info != 0:
            d = splu(Hff.tocsc()).solve(rhs)
        slope = float(rhs @ d)
        if slope <= 0.0:
            d = splu(Hff.tocsc()).solve(rhs)
            slope = float(rhs @ d)
        step = np.zeros_like(values)
        step.reshape(-1)[free_dofs] = d
        t = 1.0
        accepted = False
        for _ in range(60):
            trial = values + t * step
            et = energy(grid, f, trial, reg, cells)
            if not np.isfinite(et):
                raise EnergyOverflowError("non-finite energy in line search")
            if et <= e - 1e-4 * t * slope + 1e-15 * abs(e):
                values = trial
                e = et
                energies.append(e)
                accepted = True
                break
            t *= 0.5
        if not accepted:
            raise StagnationError(
                f"line search failed after 60 halvings at Newton step {it}"
            )
    raise StagnationError(
        f"Newton did not reach residual {tol:.1e} in {max_newton} steps "
        f"(last residual {residual:.1e})"
    )


# ---------------------------------------------------------------------------
# viscosity stages
# ---------------------------------------------------------------------------

def stage_tolerance(j, tol_scale=1.0):
    return tol_scale * min(1e-8, 1.0 / (10.0 * j * j))


def stage_weight(grid, f, reference_values, j):
    """A_j = 1 + int (1 + |eps(reference)|^2) from the previous iterate."""
    eps = symmetric_gradient(grid, reference_values)
    A_j = 1.0 + integrate_qp(grid, 1.0 + eps.norms**2)
    return A_j, 1.0 / (2.0 * A_j * j * j)


@dataclass
class ViscosityStage:
    """One viscosity level: its weight, minimiser and solve diagnostics."""

    j: int
    A_j: float
    reg: float
    values: np.ndarray
    energy_reg: float
    energy_plain: float
    residual: float
    newton_iters: int
    energy_trace: list = field(default_factory=list)


def solve_stage(
    f,
    grid,
    u0_values,
    j,
    warm_values=None,
    A_j=None,
    tol_scale=1.0,
    max_newton=60,
):
    """Minimise the stage functional over the discrete Dirichlet class."""
    if j < 1:
        raise ValueError("stage index must be >= 1")
    if f.requires_nonvanishing_strain:
        raise ValueError(
            f"{f.name} degenerates at zero strain; declare nonvanishing "
            "strain intent to use it in the solver"
        )
    if warm_values is None:
        warm_values = u0_values.copy()
    else:
        bnd = grid.boundary_node_mask
        if not np.allclose(warm_values[bnd], u0_values[bnd], atol=1e-12):
            raise ValueError("warm start must respect the boundary data")
    if A_j is None:
        A_j, reg = stage_weight(grid, f, warm_values, j)
    else:
        reg = 1.0 / (2.0 * A_j * j * j)
    tol = stage_tolerance(j, tol_scale)
    values, info = minimize_energy(
        grid, f, warm_values, reg=reg, tol=tol, max_newton=max_newton
    )
    return ViscosityStage(
        j=j,
        A_j=A_j,
        reg=reg,
        values=values,
        energy_reg=info["energy"],
        energy_plain=energy(grid, f, values),
        residual=info["residual"],
        newton_iters=info["iterations"],
        energy_trace=info["energy_trace"],
    )


def relaxed_energy(grid, f, values, u0_values):
    """Bulk energy plus the recession-weighted boundary mismatch."""
    return energy(grid, f, values) + boundary_penalty(grid, values, u0_values, f)


def l1_distance(grid, a_values, b_values):
    diff = values_at_quad_points(grid, a_values - b_values)
    return integrate_qp(grid, np.sqrt(np.sum(diff * diff, axis=-1)))


@dataclass
class SolverReport:
    """Ladder summary: stages, final field, energies and monitors."""

    stages: list
    values: np.ndarray
    relaxed: float
    cauchy_l1: list
    energy_gaps: list
    coercivity: list
    second_order: list = field(default_factory=list)

    def summary(self):
        return {
            "stages": [
                {
                    "j": s.j,
                    "A_j": s.A_j,
                    "reg": s.reg,
                    "energy_reg": s.energy_reg,
                    "energy_plain": s.energy_plain,
                    "residual": s.residual,
                    "newton_iters": s.newton_iters,
                }
                for s in self.stages
            ],
            "relaxed_energy": self.relaxed,
            "cauchy_l1": self.cauchy_l1,
            "energy_gaps": self.energy_gaps,
            "coercivity": self.coercivity,
            "second_order": self.second_order,
        }


def dyadic_ladder(j_max):
    js = []
    j = 1
    while j <= j_max:
        js.append(j)
        j *= 2
    return js


def run_viscosity_ladder(
    f,
    grid,
    u0_values,
    j_max,
    tol_scale=1.0,
    warm_values=None,
    max_newton=60,
    second_order_ball=None,
):
    """Dyadic stage ladder j = 1, 2, 4, ..., each warm-started from the
    previous minimiser; reports Cauchy L1 differences and the coercivity
    monitor (strain mass and weighted quadratic term per stage)."""
    if j_max < 1:
        raise ValueError("j_max must be >= 1")
    stages = []
    cauchy = []
    coercivity = []
    second = []
    warm = u0_values.copy() if warm_values is None else warm_values
    prev_values = None
    for j in dyadic_ladder(j_max):
        stage = solve_stage(
            f, grid, u0_values, j,
            warm_values=warm, tol_scale=tol_scale, max_newton=max_newton,
        )
        stages.append(stage)
        eps = symmetric_gradient(grid, stage.values)
        strain_mass = integrate_qp(grid, eps.norms)
        quad_term = integrate_qp(grid, 1.0 + eps.norms**2) / (
            stage.A_j * j * j
        )
        coercivity.append(
            {"j": j, "strain_l1": strain_mass, "weighted_quadratic": quad_term}
        )
        if prev_values is not None:
            cauchy.append(
                {"j": j, "l1_diff": l1_distance(grid, stage.values, prev_values)}
            )
        if second_order_ball is not None:
            x0, r = second_order_ball
            second.append(
                second_order_energy(
                    grid, f, stage.values, stage.reg, stage.A_j, j, x0, r
                )
            )
        prev_values = stage.values
        warm = stage.values
    final = stages[-1].values
    return SolverReport(
        stages=stages,
        values=final,
        relaxed=relaxed_energy(grid, f, final, u0_values),
        cauchy_l1=cauchy,
        energy_gaps=[
            {"j": s.j, "energy_plain": s.energy_plain, "energy_reg": s.energy_reg}
            for s in stages
        ],
        coercivity=coercivity,
        second_order=second,
    )


# ---------------------------------------------------------------------------
# second order energy
# ---------------------------------------------------------------------------

def second_order_energy(grid, f, values, reg, A_j, j, x0, r):
    """Weighted second-order energy over B(x0, r) via cell-difference
    quotients of the quadrature-mean strain, together with the two-term
    right-hand side it is expected to be controlled by:
    (1/r^2) int_{B(x0,2r)} |eps| + (1/(A_j j^2 r^3)) int_{B(x0,2r)} (1+|eps|^2).
    Stages are exact minimisers here, so no residual-slack term enters.
    """
    x0 = np.asarray(x0, dtype=float)
    for d in range(grid.dim):
        if x0[d] - 2 * r < grid.lo[d] - 1e-12 or x0[d] + 2 * r > grid.hi[d] + 1e-12:
            raise DomainError("second-order energy needs B(x0, 2r) inside the domain")

    eps = symmetric_gradient(grid, values)
    cell_mean = eps.data.mean(axis=1)  # (ncells, n, n)
    centers = grid.cell_origins + 0.5 * grid.h
    n = grid.dim
    shape = tuple(reversed(grid.cells))
    mean_grid = cell_mean.reshape(shape + (n, n))
    centers_grid = centers.reshape(shape + (n,))

    in_ball = np.sum((centers - x0) ** 2, axis=1) <= r * r
    in_ball_grid = in_ball.reshape(shape)
    cellvol = float(np.prod(grid.h))

    lhs = 0.0
    for d in range(grid.dim):
        axis = grid.dim - 1 - d  # array axes are (…, y, x)
        diff = (np.roll(mean_grid, -1, axis=axis) - mean_grid) / grid.h[d]
        valid = in_ball_grid & np.roll(in_ball_grid, -1, axis=axis)
        # exclude wrap-around pairs
        sl = [slice(None)] * grid.dim
        sl[axis] = slice(-1, None)
        valid[tuple(sl)] = False
        dmat = diff[valid]
        if dmat.size == 0:
            continue
        base = mean_grid[valid]
        rr = np.sqrt(np.sum(base * base, axis=(-2, -1)))
        tan = f.d1_over_r(rr) + 2.0 * reg
        rad = f.d2_safe(rr) + 2.0 * reg
        safe = np.where(rr > 1e-14, rr, 1.0)
        proj = np.einsum("kij,kij->k", base, dmat) / safe
        proj[rr <= 1e-14] = 0.0
        d2 = np.sum(dmat * dmat, axis=(-2, -1))
        quad = rad * proj**2 + tan * (d2 - proj**2)
        lhs += cellvol * float(quad.sum())

    in_big = np.sum((centers - x0) ** 2, axis=1) <= 4.0 * r * r
    norms = np.sqrt(np.sum(cell_mean[in_big] ** 2, axis=(-2, -1)))
    int_eps = cellvol * float(norms.sum())
    int_quad = cellvol * float((1.0 + norms**2).sum())
    rhs_raw = int_eps / r**2 + int_quad / (A_j * j * j * r**3)
    return {
        "j": j,
        "lhs": lhs,
        "rhs_raw": rhs_raw,
        "ratio": lhs / rhs_raw if rhs_raw > 0 else math.inf,
    }


# ---------------------------------------------------------------------------
# quadratic oracle and subdomain solve
# ---------------------------------------------------------------------------

def direct_quadratic_solve(grid, u0_values, coeff=2.0, reg=0.0):
    """One sparse solve of the constant-Hessian problem minimising
    (coeff/2 + reg) related quadratic energy int coeff/2 |eps|^2 ... ;
    the stationarity system is assembled directly and factorised, giving
    an independent oracle for the Newton path."""
    n = grid.dim
    s = sym_dim(n)
    B = grid.strain_basis
    D = (coeff + 2.0 * reg) * np.eye(s)
    K_loc = grid.quad_weight * np.einsum("qka,kl,qlb->ab", B, D, B)
    cells = grid.cell_nodes
    nloc = B.shape[2]
    dof = (cells[:, :, None] * n + np.arange(n)[None, None, :]).reshape(
        grid.n_cells, nloc
    )
    rows = np.repeat(dof, nloc, axis=1).reshape(-1)
    cols = np.tile(dof, (1, nloc)).reshape(-1)
    vals = np.tile(K_loc.reshape(1, -1), (grid.n_cells, 1)).reshape(-1)
    ndof = grid.n_nodes * n
    K = sparse.coo_matrix((vals, (rows, cols)), shape=(ndof, ndof)).tocsr()

    free = np.repeat(~grid.boundary_node_mask, n)
    u = u0_values.copy().reshape(-1)
    rhs = -(K @ u)[free] + (K[free][:, free] @ u[free])
    u[free] = splu(K[free][:, free].tocsc()).solve(rhs)
    return u.reshape(grid.n_nodes, n)


def solve_dirichlet_on_cells(grid, f, cells, boundary_values, tol=1e-9,
                             max_newton=60, reg=0.0):
    """Minimise int f(eps(w)) over the cells subset with w pinned to
    ``boundary_values`` outside the subset interior.

    Interior degrees of freedom are the nodes all of whose adjacent grid
    cells belong to the subset.
    """
    active = np.zeros(grid.n_cells, dtype=bool)
    active[cells] = True
    touched = np.zeros(grid.n_nodes, dtype=int)
    counts = np.zeros(grid.n_nodes, dtype=int)
    np.add.at(counts, grid.cell_nodes.reshape(-1), 1)
    np.add.at(touched, grid.cell_nodes[active].reshape(-1), 1)
    free_nodes = (touched == counts) & (touched > 0) & ~grid.boundary_node_mask
    values, info = minimize_energy(
        grid,
        f,
        boundary_values,
        reg=reg,
        tol=tol,
        max_newton=max_newton,
        cells=np.where(active)[0],
        free_node_mask=free_nodes,
    )
    return values, info
