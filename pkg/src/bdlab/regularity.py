"""Post-hoc regularity diagnostics.

Excess quantities over dyadic radius ladders with decay-exponent fits,
gradient-norm scaling checks (Lebesgue and exponential-Orlicz branches),
the convolution-type Poincare ratio, mollification-parameter selection
for comparison maps, and the minimality deviation of smooth fields.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import solver as solvermod
from .mesh import (
    DomainError,
    ball_quad_selection,
    ball_volume,
    jacobian,
    mollifier_kernel,
    mollify,
    mollify_twice,
    symmetric_gradient,
    values_at_quad_points,
)
from .symcalc import v_of_norm


class PredictorInvalidError(ValueError):
    """Ellipticity exponent outside the validity range of a prediction."""


class GridTooCoarseError(ValueError):
    """Selected mollification scale is below the grid spacing."""


class ExcessPreconditionError(ValueError):
    """Normalised excess is not below one."""


class InequalityViolationError(AssertionError):
    """A structurally guaranteed inequality failed numerically."""


# above the V-image of strain roundoff dust (~1e-15 squared), far below
# any genuine excess
_MACHINE_FLOOR = 1e-22


# ---------------------------------------------------------------------------
# excess ladder and decay fit
# ---------------------------------------------------------------------------

@dataclass
class ExcessProfile:
    """Excess over a dyadic radius ladder at one centre.

    Phi integrates V of the mean-subtracted strain over the discrete
    ball; PhiTilde divides by the continuum ball volume."""

    center: np.ndarray
    radii: np.ndarray
    phi: np.ndarray
    phi_tilde: np.ndarray


def excess_at_radius(grid, strain, x0, r):
    mask = ball_quad_selection(grid, x0, r)
    if not np.any(mask):
        raise DomainError(f"no quadrature points inside ball of radius {r:g}")
    eps = strain.data[mask]
    w = grid.quad_weight
    mean = eps.mean(axis=0)
    dev = np.sqrt(np.sum((eps - mean) ** 2, axis=(-2, -1)))
    phi = w * float(v_of_norm(dev).sum())
    return phi, phi / ball_volume(r, grid.dim)


def excess(grid, values, x0, R, min_radius_cells=4):
    """Excess profile over the ladder r_k = R 2^-k down to 4 grid cells."""
    x0 = np.asarray(x0, dtype=float)
    strain = symmetric_gradient(grid, values)
    hmax = float(grid.h.max())
    radii = []
    r = float(R)
    while r >= min_radius_cells * hmax - 1e-12:
        radii.append(r)
        r *= 0.5
    if not radii:
        raise GridTooCoarseError("radius ladder is empty at this resolution")
    phi = np.empty(len(radii))
    phit = np.empty(len(radii))
    for k, rk in enumerate(radii):
        phi[k], phit[k] = excess_at_radius(grid, strain, x0, rk)
    return ExcessProfile(
        center=x0, radii=np.array(radii), phi=phi, phi_tilde=phit
    )


@dataclass
class DecayFit:
    slope: float
    intercept: float
    n_points: int
    passed: bool
    short_circuit: bool


def decay_fit(profile, alpha_min=0.25, smallness=None):
    """Least-squares slope of log PhiTilde against log r.

    Passes when the fitted slope is at least 2 alpha_min; when a
    smallness threshold is supplied the pass verdict only applies if
    the top-radius excess is below it.  A ladder at machine zero short
    circuits to a pass (exact regularity).
    """
    phit = profile.phi_tilde
    floor = max(_MACHINE_FLOOR, 1e-14 * float(phit.max(initial=0.0)))
    usable = phit > floor
    if not np.any(usable):
        return DecayFit(
            slope=math.inf, intercept=-math.inf, n_points=0,
            passed=True, short_circuit=True,
        )
    if usable.sum() < 4:
        raise ValueError("need at least 4 ladder points above machine zero")
    x = np.log(profile.radii[usable])
    y = np.log(phit[usable])
    slope, intercept = np.polyfit(x, y, 1)
    passed = slope >= 2.0 * alpha_min
    if smallness is not None and phit[0] >= smallness:
        passed = False
    return DecayFit(
        slope=float(slope), intercept=float(intercept),
        n_points=int(usable.sum()), passed=bool(passed), short_circuit=False,
    )


# ---------------------------------------------------------------------------
# regularity predictor
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegularityPredictor:
    """Predicted integrability exponents at ellipticity a in dimension n."""

    n: int
    a: float

    def __post_init__(self):
        if self.a <= 1.0:
            raise PredictorInvalidError("predictor needs a > 1")

    @property
    def sobolev_q(self):
        """Gradient integrability exponent n(2-a)/(n-2), n >= 3 only."""
        if self.n < 3:
            raise PredictorInvalidError(
                "the Lebesgue-exponent branch needs n >= 3"
            )
        if self.a >= 1.0 + 2.0 / self.n:
            raise PredictorInvalidError("needs a < 1 + 2/n")
        return self.n * (2.0 - self.a) / (self.n - 2.0)

    @property
    def exp_luxemburg_exponent(self):
        """Exponential-integrability exponent (2-a)/(3-a) for n = 2."""
        if self.n != 2:
            raise PredictorInvalidError("the exponential branch is for n = 2")
        if self.a >= 2.0:
            raise PredictorInvalidError("needs a < 2")
        return (2.0 - self.a) / (3.0 - self.a)

    @property
    def second_order_q(self):
        """Upper bound n(2-a)/(n-a) for second-derivative integrability."""
        return self.n * (2.0 - self.a) / (self.n - self.a)

    @property
    def singular_set_dim(self):
        """Upper bound n(n-2)/(n-a) for the singular-set dimension."""
        return self.n * (self.n - 2.0) / (self.n - self.a)


# ---------------------------------------------------------------------------
# Luxemburg norm
# ---------------------------------------------------------------------------

def luxemburg_norm(values, weights, beta, tol=1e-10, max_iter=200):
    """Luxemburg norm inf{lam > 0 : sum w (exp((v/lam)^beta) - 1) <= 1}
    computed by bisection to relative width ``tol``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if np.any(values < 0):
        raise ValueError("samples must be nonnegative")
    vmax = float(values.max(initial=0.0))
    if vmax == 0.0:
        return 0.0

    def orlicz(lam):
        expo = (values / lam) ** beta
        with np.errstate(over="ignore"):
            return float(np.sum(weights * np.expm1(np.minimum(expo, 700.0))))

    lo = hi = vmax
    if orlicz(hi) > 1.0:
        for _ in range(max_iter):
            hi *= 2.0
            if orlicz(hi) <= 1.0:
                break
        else:
            raise RuntimeError("failed to bracket the Luxemburg norm")
    else:
        for _ in range(max_iter):
            lo *= 0.5
            if orlicz(lo) > 1.0:
                break
        else:
            return 0.0
    lo = min(lo, hi / 2.0)
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if orlicz(mid) > 1.0:
            lo = mid
        else:
            hi = mid
    return float(hi)


# ---------------------------------------------------------------------------
# gradient-norm scaling check
# ---------------------------------------------------------------------------

def sobolev_scaling_check(grid, values, a, balls, branch="auto"):
    """Per-ball ratio of the gradient-norm left side against
    (1 + mean_{B(x0,5r)} |eps(u)|)^(1/(2-a)) + (1/r) mean_{B(x0,r)} |u|.

    In dimension 2 the left side is the Luxemburg norm of |grad u| with
    the exponent (2-a)/(3-a); in dimension >= 3 it is the predicted
    Lebesgue mean.  Centres must satisfy B(x0, 5r) inside the domain.
    """
    n = grid.dim
    if branch == "auto":
        branch = "luxemburg" if n == 2 else "sobolev"
    pred = RegularityPredictor(n=n, a=a)
    if branch == "sobolev":
        q = pred.sobolev_q  # raises outside the validity range
    else:
        beta = pred.exp_luxemburg_exponent

    J = jacobian(grid, values)
    gnorm = np.sqrt(np.sum(J * J, axis=(-2, -1)))
    strain = symmetric_gradient(grid, values)
    uq = values_at_quad_points(grid, values)
    unorm = np.sqrt(np.sum(uq * uq, axis=-1))
    w = grid.quad_weight

    rows = []
    for idx, (x0, r) in enumerate(balls):
        x0 = np.asarray(x0, dtype=float)
        inner = ball_quad_selection(grid, x0, r)
        outer = ball_quad_selection(grid, x0, 5.0 * r)  # raises if outside
        if branch == "sobolev":
            lhs = float(np.mean(gnorm[inner] ** q) ** (1.0 / q))
        else:
            lhs = luxemburg_norm(
                gnorm[inner], np.full(int(inner.sum()), w), beta
            )
        mean_strain = float(np.mean(strain.norms[outer]))
        mean_u = float(np.mean(unorm[inner]))
        rhs = (1.0 + mean_strain) ** (1.0 / (2.0 - a)) + mean_u / r
        rows.append(
            {"ball": idx, "lhs": lhs, "rhs": rhs, "ratio": lhs / rhs}
        )
    return rows


# ---------------------------------------------------------------------------
# convolution-type Poincare ratio
# ---------------------------------------------------------------------------

def convolution_poincare_check(grid, values, eps_scale, load, lam=1.001,
                               kernel_kind="bump"):
    """Ratio of int V(L(u - rho_eps * u)) over the inner region against
    max{L eps, (L eps)^2} times int V(|eps(u)|) over its neighbourhood.

    The inner region keeps a margin of max(lam sqrt(n) eps, eps) + 2h to
    the boundary, so clipped mollification stencils never contaminate it
    and rigid (or symmetric-affine) inputs give an exactly vanishing
    left side.  Its eps-neighbourhood is then the whole domain, which is
    where the right side is integrated.
    """
    if lam <= 1.0:
        raise ValueError("lam must exceed 1")
    n = grid.dim
    kernel = mollifier_kernel(grid, kernel_kind, eps_scale)
    smoothed = mollify(grid, values, kernel)
    margin = max(lam * math.sqrt(n) * eps_scale, eps_scale) + 2.0 * float(
        grid.h.max()
    )
    qp = grid.quad_points
    inner = np.ones(qp.shape[:2], dtype=bool)
    for d in range(n):
        inner &= (qp[..., d] >= grid.lo[d] + margin) & (
            qp[..., d] <= grid.hi[d] - margin
        )
    if not np.any(inner):
        raise DomainError("neighbourhood margin leaves no interior points")

    diff = values_at_quad_points(grid, values - smoothed)
    dnorm = np.sqrt(np.sum(diff * diff, axis=-1))
    w = grid.quad_weight
    lhs = w * float(v_of_norm(load * dnorm[inner]).sum())
    strain = symmetric_gradient(grid, values)
    rhs = w * float(v_of_norm(strain.norms).sum())
    factor = max(load * eps_scale, (load * eps_scale) ** 2)
    if rhs <= _MACHINE_FLOOR:
        if lhs > 1e-12:
            raise InequalityViolationError(
                "vanishing strain must force a vanishing left side"
            )
        ratio = 0.0
    else:
        ratio = lhs / (factor * rhs)
    return {"lhs": lhs, "rhs": rhs, "factor": factor, "ratio": ratio}


def poincare_sweep(grid, families, eps_list, load_eps_targets, lam=1.001):
    """Sweep of the convolution Poincare ratio over scales, loads and
    field families.

    Returns (rows, fitted constant, familywise stability flag): the
    fitted constant is the max ratio over the pooled sweep; stability
    requires the per-family maxima to lie within a factor 10 of their
    median.
    """
    rows = []
    per_family_max = {}
    for name, values in families.items():
        fam_max = 0.0
        for eps_scale in eps_list:
            for target in load_eps_targets:
                load = target / eps_scale
                res = convolution_poincare_check(
                    grid, values, eps_scale, load, lam=lam
                )
                rows.append(
                    {
                        "eps": eps_scale,
                        "L": load,
                        "ratio": res["ratio"],
                        "family": name,
                    }
                )
                fam_max = max(fam_max, res["ratio"])
        per_family_max[name] = fam_max
    maxima = sorted(per_family_max.values())
    median = maxima[len(maxima) // 2]
    fitted = max(maxima)
    stable = fitted <= 10.0 * median if median > 0 else fitted == 0.0
    return rows, fitted, bool(stable), per_family_max


# ---------------------------------------------------------------------------
# mollification parameters and the comparison-map scale
# ---------------------------------------------------------------------------

@dataclass
class ComparisonDiagnostics:
    """Comparison-map data at one centre: the mollification scale chosen
    from the normalised excess, and the Hoelder-type smallness measure of
    the doubly mollified field."""

    center: np.ndarray
    radius: float
    alpha: float
    lam: float
    xi0: np.ndarray
    phi_tilde: float
    eps: float
    t_value: float
    bound_power: float


def mollification_scale(R, phi_tilde, alpha, n, lam=1.001):
    """Scale (R / (48 sqrt(n) lam)) PhiTilde^(1/(n+4alpha))."""
    return R * phi_tilde ** (1.0 / (n + 4.0 * alpha)) / (
        48.0 * math.sqrt(n) * lam
    )


def _gauss_sublattice(grid):
    """Quadrature points with local index 0, a uniform lattice of cell
    spacing used for the dyadic-shell Hoelder seminorm."""
    return grid.quad_points[:, 0, :]


def holder_seminorm_dyadic(grid, strain, x0, r, alpha):
    """Discrete C^0,alpha seminorm of the strain over B(x0, r): max of
    |g(x) - g(y)| / |x - y|^alpha over sample pairs at dyadic distances.

    Pairs are taken on the uniform sublattice of first Gauss points at
    axis and diagonal offsets of dyadically growing size; restricting to
    dyadic shells keeps the cost linear while changing the seminorm by
    at most a bounded factor.
    """
    n = grid.dim
    pts = _gauss_sublattice(grid)
    vals = strain.data[:, 0, :, :]
    shape = tuple(reversed(grid.cells))
    pts_g = pts.reshape(shape + (n,))
    vals_g = vals.reshape(shape + (n, n))
    in_ball = (np.sum((pts - x0) ** 2, axis=1) <= r * r).reshape(shape)

    best = 0.0
    max_cells = int(min(grid.cells))
    m = 1
    offsets2d = [(1, 0), (0, 1), (1, 1), (1, -1)]
    while m < max_cells:
        for off in offsets2d if n == 2 else [(1, 0, 0), (0, 1, 0), (0, 0, 1),
                                             (1, 1, 0), (1, 0, 1), (0, 1, 1)]:
            shift = tuple(-m * o for o in reversed(off))
            rolled = np.roll(vals_g, shift, axis=tuple(range(n)))
            rolled_mask = np.roll(in_ball, shift, axis=tuple(range(n)))
            valid = in_ball & rolled_mask
            # drop wrap-around slabs
            for ax, o in enumerate(reversed(off)):
                if o == 0:
                    continue
                sl = [slice(None)] * n
                sl[ax] = slice(-m, None) if o > 0 else slice(None, m)
                valid[tuple(sl)] = False
            if not np.any(valid):
                continue
            dist = m * math.sqrt(
                sum((o * grid.h[d]) ** 2 for d, o in enumerate(off))
            )
            diff = np.sqrt(
                np.sum((vals_g - rolled) ** 2, axis=(-2, -1))
            )[valid]
            best = max(best, float(diff.max()) / dist**alpha)
        m *= 2
    return best


def mollification_parameters(grid, values, x0, R, alpha, lam=1.001):
    """Choose the mollification scale from the normalised excess and
    measure the comparison smallness of the doubly mollified field.

    Requires PhiTilde(u; x0, R) < 1 and a representable scale (at least
    one grid spacing); an exactly vanishing excess short-circuits with a
    zero scale and zero smallness measure.
    """
    x0 = np.asarray(x0, dtype=float)
    strain = symmetric_gradient(grid, values)
    _, phi_tilde = excess_at_radius(grid, strain, x0, R)
    mask = ball_quad_selection(grid, x0, R)
    xi0 = strain.data[mask].mean(axis=0)
    n = grid.dim
    if phi_tilde >= 1.0:
        raise ExcessPreconditionError(
            f"normalised excess {phi_tilde:g} is not below 1"
        )
    power = phi_tilde ** (alpha / (n + 4.0 * alpha))
    if phi_tilde <= _MACHINE_FLOOR:
        return ComparisonDiagnostics(
            center=x0, radius=R, alpha=alpha, lam=lam, xi0=xi0,
            phi_tilde=phi_tilde, eps=0.0, t_value=0.0, bound_power=0.0,
        )
    eps_scale = mollification_scale(R, phi_tilde, alpha, n, lam)
    if eps_scale < float(grid.h.max()):
        raise GridTooCoarseError(
            f"selected scale {eps_scale:g} is below the grid spacing "
            f"{float(grid.h.max()):g}"
        )
    smooth = mollify_twice(grid, values, eps_scale)
    sstrain = symmetric_gradient(grid, smooth)
    half = 0.5 * R
    mask_half = ball_quad_selection(grid, x0, half)
    dev = np.sqrt(
        np.sum((sstrain.data[mask_half] - xi0) ** 2, axis=(-2, -1))
    )
    sup_term = float(dev.max())
    semi = holder_seminorm_dyadic(grid, sstrain, x0, half, alpha)
    t_value = sup_term + (2.0 * half) ** alpha * semi
    return ComparisonDiagnostics(
        center=x0, radius=R, alpha=alpha, lam=lam, xi0=xi0,
        phi_tilde=phi_tilde, eps=eps_scale, t_value=t_value,
        bound_power=power,
    )


# ---------------------------------------------------------------------------
# minimality deviation of a smooth field
# ---------------------------------------------------------------------------

def dev_alpha(grid, values, f, x0, r, tol=1e-9):
    """Energy of the field on the discrete ball minus the minimum over
    fields with the same boundary values there (solved with the same
    integrand); nonnegative up to the inner solver tolerance."""
    x0 = np.asarray(x0, dtype=float)
    centers = grid.cell_origins + 0.5 * grid.h
    in_ball = np.where(
        np.sum((centers - x0) ** 2, axis=1) <= r * r
    )[0]
    if in_ball.size == 0:
        raise DomainError("ball contains no cells")
    e_v = solvermod.energy(grid, f, values, cells=in_ball)
    minimised, info = solvermod.solve_dirichlet_on_cells(
        grid, f, in_ball, values, tol=tol
    )
    e_min = solvermod.energy(grid, f, minimised, cells=in_ball)
    return e_v - e_min


# ---------------------------------------------------------------------------
# CSV writers (fixed formatting so outputs are byte-reproducible)
# ---------------------------------------------------------------------------

def _fmt(x):
    return format(float(x), ".17g")


def write_excess_csv(path, profiles):
    with open(path, "w") as fh:
        fh.write("center_x,center_y,r,Phi,PhiTilde\n")
        for prof in profiles:
            cx, cy = float(prof.center[0]), float(prof.center[1])
            for r, p, pt in zip(prof.radii, prof.phi, prof.phi_tilde):
                fh.write(
                    f"{_fmt(cx)},{_fmt(cy)},{_fmt(r)},{_fmt(p)},{_fmt(pt)}\n"
                )


def write_poincare_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("eps,L,ratio,family\n")
        for row in rows:
            fh.write(
                f"{_fmt(row['eps'])},{_fmt(row['L'])},"
                f"{_fmt(row['ratio'])},{row['family']}\n"
            )


def write_scaling_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("ball,lhs,rhs,ratio\n")
        for row in rows:
            fh.write(
                f"{row['ball']},{_fmt(row['lhs'])},{_fmt(row['rhs'])},"
                f"{_fmt(row['ratio'])}\n"
            )
