"""Convex integrands of linear growth on symmetric matrices.

The catalog consists of rotationally invariant integrands f(z) = g(|z|):
the degenerating scale phi_a, the intermediate family M_p, the borderline
family m_p (degenerate at the origin unless p = 2), the area integrand
and the quadratic oracle integrand.  Each instance carries exact first
and second derivatives, its recession slope, registered growth constants
and an ellipticity exponent where one is claimed.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

_TINY = 1e-14


class InvalidParameterError(ValueError):
    """Integrand parameter outside its admissible range."""


class SingularHessianError(ArithmeticError):
    """Second derivative is unbounded at the requested point."""


class NoConvergenceError(RuntimeError):
    """Numerical limit did not settle on the supplied ladder."""


def sym_dim(n):
    return n * (n + 1) // 2


def sym_basis_vec(z):
    """Coordinates of a symmetric matrix in the orthonormal basis
    {e_ii} + {(e_ij + e_ji)/sqrt(2)}; preserves the Frobenius product."""
    z = np.asarray(z, dtype=float)
    n = z.shape[-1]
    comps = [z[..., i, i] for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            comps.append(math.sqrt(2.0) * z[..., i, j])
    return np.stack(comps, axis=-1)


def sym_basis_mat(v, n):
    """Inverse of :func:`sym_basis_vec`."""
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1] + (n, n))
    for i in range(n):
        z[..., i, i] = v[..., i]
    k = n
    for i in range(n):
        for j in range(i + 1, n):
            z[..., i, j] = z[..., j, i] = v[..., k] / math.sqrt(2.0)
            k += 1
    return z


@dataclass
class Integrand:
    """Rotationally invariant convex integrand f(z) = g(|z|).

    Parameters
    ----------
    g, g1, g2 : callables
        Radial profile and its first two derivatives, vectorised over
        numpy arrays of radii.
    recession_slope : float or None
        Slope of the one-homogeneous behaviour at infinity; None marks
        superlinear growth (the quadratic oracle) where no recession
        function exists.
    growth : tuple or None
        Registered linear-growth constants (c1, c2, gamma) such that
        c1 |z| - gamma <= f(z) <= c2 (1 + |z|); c2 also bounds Lip(f).
    ellipticity_a : float or None
        Claimed degeneration exponent of the Hessian envelope.
    origin_second : float or None
        Limit of g'(r)/r and g''(r) at r = 0; None flags a singular
        origin (hessian evaluation there raises).
    """

    name: str
    g: callable
    g1: callable
    g2: callable
    recession_slope: float | None
    growth: tuple | None
    ellipticity_a: float | None
    origin_second: float | None
    degenerate_origin: bool = False
    requires_nonvanishing_strain: bool = False
    params: dict = field(default_factory=dict)

    # -- scalar interface -------------------------------------------------
    def evaluate(self, z):
        return float(self.g(np.linalg.norm(np.atleast_1d(np.asarray(z, float)))))

    def gradient(self, z):
        z = np.asarray(z, dtype=float)
        r = np.linalg.norm(z)
        if r < _TINY:
            return np.zeros_like(z)
        return float(self.g1(r)) / r * z

    def _radial_pair(self, r):
        """(g''(r), g'(r)/r) with the origin limit substituted."""
        if r < _TINY:
            if self.origin_second is None:
                raise SingularHessianError(
                    f"{self.name}: second derivative unbounded at the origin"
                )
            return self.origin_second, self.origin_second
        return float(self.g2(r)), float(self.g1(r)) / r

    def hessian_apply(self, z, xi):
        """Quadratic form <f''(z) xi, xi>."""
        z = np.asarray(z, dtype=float)
        xi = np.asarray(xi, dtype=float)
        r = np.linalg.norm(z)
        rad, tan = self._radial_pair(r)
        xi2 = float(np.sum(xi * xi))
        if r < _TINY:
            return rad * xi2
        proj = float(np.sum(z * xi)) / r
        return rad * proj * proj + tan * (xi2 - proj * proj)

    def hessian_matrix(self, z):
        """Matrix of f''(z) in the orthonormal symmetric basis."""
        z = np.asarray(z, dtype=float)
        n = z.shape[0]
        s = sym_dim(n)
        r = np.linalg.norm(z)
        rad, tan = self._radial_pair(r)
        if r < _TINY:
            return rad * np.eye(s)
        v = sym_basis_vec(z / r)
        return (rad - tan) * np.outer(v, v) + tan * np.eye(s)

    def recession(self, z):
        """Exact recession function, slope * |z| for the catalog."""
        if self.recession_slope is None:
            raise InvalidParameterError(
                f"{self.name} is not of linear growth; no recession function"
            )
        return self.recession_slope * float(np.linalg.norm(np.asarray(z, float)))

    # -- vectorised radial interface (assembly fast path) -----------------
    def value_r(self, r):
        return self.g(np.asarray(r, dtype=float))

    def d1_r(self, r):
        return self.g1(np.asarray(r, dtype=float))

    def d2_r(self, r):
        return self.g2(np.asarray(r, dtype=float))

    def d1_over_r(self, r):
        """g'(r)/r with the origin limit; raises on a singular origin."""
        r = np.asarray(r, dtype=float)
        small = r < _TINY
        if np.any(small) and self.origin_second is None:
            raise SingularHessianError(
                f"{self.name}: strain vanishes somewhere and the origin is singular"
            )
        safe = np.where(small, 1.0, r)
        out = self.g1(safe) / safe
        if self.origin_second is not None:
            out = np.where(small, self.origin_second, out)
        return out

    def d2_safe(self, r):
        r = np.asarray(r, dtype=float)
        small = r < _TINY
        if np.any(small) and self.origin_second is None:
            raise SingularHessianError(
                f"{self.name}: strain vanishes somewhere and the origin is singular"
            )
        safe = np.where(small, 1.0, r)
        out = self.g2(safe)
        if self.origin_second is not None:
            out = np.where(small, self.origin_second, out)
        return out


def scaled(f, c):
    """The integrand c * f (same derivatives and recession scaled by c)."""
    if c <= 0:
        raise InvalidParameterError("scale must be positive")
    growth = None
    if f.growth is not None:
        c1, c2, gamma = f.growth
        growth = (c * c1, c * c2, c * gamma)
    return Integrand(
        name=f"{c}*{f.name}",
        g=lambda r: c * f.g(r),
        g1=lambda r: c * f.g1(r),
        g2=lambda r: c * f.g2(r),
        recession_slope=None if f.recession_slope is None else c * f.recession_slope,
        growth=growth,
        ellipticity_a=f.ellipticity_a,
        origin_second=None if f.origin_second is None else c * f.origin_second,
        degenerate_origin=f.degenerate_origin,
        requires_nonvanishing_strain=f.requires_nonvanishing_strain,
        params=dict(f.params),
    )


# ---------------------------------------------------------------------------
# the catalog
# ---------------------------------------------------------------------------

def _phi_slope(a):
    """Total mass of (1+s^2)^(-a/2) over [0, inf)."""
    return math.sqrt(math.pi) * special.gamma((a - 1.0) / 2.0) / (
        2.0 * special.gamma(a / 2.0)
    )


def _phi_g1(t, a, slope):
    """g'(t) = integral of (1+s^2)^(-a/2) from 0 to t.

    Evaluated through the hypergeometric closed form for moderate t and
    through the asymptotic tail expansion for large t, where it is both
    cheaper and more accurate.
    """
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    small = t <= 100.0
    ts = t[small]
    out[small] = ts * special.hyp2f1(0.5, a / 2.0, 1.5, -ts * ts)
    tl = t[~small]
    if tl.size:
        # tail = integral_t^inf s^-a (1 + s^-2)^(-a/2) ds, expanded in s^-2
        inv2 = 1.0 / (tl * tl)
        tail = tl ** (1.0 - a) * (
            1.0 / (a - 1.0)
            - (a / 2.0) * inv2 / (a + 1.0)
            + (a * (a + 2.0) / 8.0) * inv2 * inv2 / (a + 3.0)
            - (a * (a + 2.0) * (a + 4.0) / 48.0) * inv2**3 / (a + 5.0)
        )
        out[~small] = slope - tail
    return out


def _phi_g(t, a, slope):
    """g(t) by parts: t g'(t) - ((1+t^2)^(1-a/2) - 1)/(2-a)."""
    t = np.asarray(t, dtype=float)
    g1 = _phi_g1(t, a, slope)
    if abs(a - 2.0) < 1e-12:
        inner = 0.5 * np.log1p(t * t)
    else:
        inner = (np.exp((1.0 - a / 2.0) * np.log1p(t * t)) - 1.0) / (2.0 - a)
    return t * g1 - inner


def phi_a(a):
    """Degenerating scale: radial profile with g''(t) = (1+t^2)^(-a/2).

    a-elliptic and not b-elliptic for any 1 < b < a; requires a > 1 for
    linear growth.
    """
    if a <= 1.0:
        raise InvalidParameterError(
            "phi_a needs a > 1; otherwise the integrand is not of linear growth"
        )
    slope = _phi_slope(a)
    # lower growth line supporting the convex profile at T0
    T0 = 100.0
    c1 = float(_phi_g1(np.array(T0), a, slope))
    gamma = c1 * T0 - float(_phi_g(np.array(T0), a, slope))
    return Integrand(
        name=f"phi_{a:g}",
        g=lambda r: _phi_g(r, a, slope),
        g1=lambda r: _phi_g1(r, a, slope),
        g2=lambda r: np.exp(-(a / 2.0) * np.log1p(np.square(np.asarray(r, float)))),
        recession_slope=slope,
        growth=(c1, slope, max(gamma, 1e-9)),
        ellipticity_a=a,
        origin_second=1.0,
        params={"a": a},
    )


def m_big_p(p):
    """Intermediate family (1 + (1+|z|^2)^(p/2))^(1/p); 3-elliptic for
    p = 1 and (p+1)-elliptic for p > 1."""
    if p < 1.0:
        raise InvalidParameterError("M_p needs p >= 1")

    def g(r):
        r = np.asarray(r, dtype=float)
        w = 1.0 + r * r
        return (1.0 + w ** (p / 2.0)) ** (1.0 / p)

    def g1(r):
        r = np.asarray(r, dtype=float)
        w = 1.0 + r * r
        return r * w ** (p / 2.0 - 1.0) * (1.0 + w ** (p / 2.0)) ** (1.0 / p - 1.0)

    def g2(r):
        r = np.asarray(r, dtype=float)
        w = 1.0 + r * r
        u1 = w ** (p / 2.0 - 1.0)
        u2 = (1.0 + w ** (p / 2.0)) ** (1.0 / p - 1.0)
        return u1 * u2 * (1.0 + (p - 2.0) * r * r / w) + (1.0 - p) * r * r * w ** (
            p - 2.0
        ) * (1.0 + w ** (p / 2.0)) ** (1.0 / p - 2.0)

    return Integrand(
        name=f"M_{p:g}",
        g=g,
        g1=g1,
        g2=g2,
        recession_slope=1.0,
        growth=(1.0, 2.0, 1.0),
        ellipticity_a=3.0 if p == 1.0 else p + 1.0,
        origin_second=float(g2(np.array(0.0))),
        params={"p": p},
    )


def m_small_p(p):
    """Borderline family (1 + |z|^p)^(1/p).

    Coincides with the area integrand at p = 2.  For p != 2 the Hessian
    degenerates at the origin (it blows up for p < 2 and vanishes for
    p > 2), so these members are flagged: the solver refuses them unless
    the run declares that the strain stays away from zero.
    """
    if p <= 1.0:
        raise InvalidParameterError("m_p needs p > 1")
    if p == 2.0:
        return area_integrand()

    def g(r):
        r = np.asarray(r, dtype=float)
        return (1.0 + r**p) ** (1.0 / p)

    def g1(r):
        r = np.asarray(r, dtype=float)
        return r ** (p - 1.0) * (1.0 + r**p) ** (1.0 / p - 1.0)

    def g2(r):
        r = np.asarray(r, dtype=float)
        return (p - 1.0) * r ** (p - 2.0) * (1.0 + r**p) ** (1.0 / p - 2.0)

    return Integrand(
        name=f"m_{p:g}",
        g=g,
        g1=g1,
        g2=g2,
        recession_slope=1.0,
        growth=(1.0, 1.0, 1.0),
        ellipticity_a=None,
        origin_second=0.0 if p > 2.0 else None,
        degenerate_origin=True,
        requires_nonvanishing_strain=True,
        params={"p": p},
    )


def area_integrand():
    """The area integrand sqrt(1 + |z|^2), 3-elliptic."""

    def g(r):
        r = np.asarray(r, dtype=float)
        return np.sqrt(1.0 + r * r)

    def g1(r):
        r = np.asarray(r, dtype=float)
        return r / np.sqrt(1.0 + r * r)

    def g2(r):
        r = np.asarray(r, dtype=float)
        return (1.0 + r * r) ** (-1.5)

    return Integrand(
        name="area",
        g=g,
        g1=g1,
        g2=g2,
        recession_slope=1.0,
        growth=(1.0, 1.0, 1.0),
        ellipticity_a=3.0,
        origin_second=1.0,
    )


def quadratic():
    """|z|^2, the strongly convex oracle integrand (not of linear growth)."""

    def g(r):
        r = np.asarray(r, dtype=float)
        return r * r

    def g1(r):
        return 2.0 * np.asarray(r, dtype=float)

    def g2(r):
        return 2.0 * np.ones_like(np.asarray(r, dtype=float))

    return Integrand(
        name="quadratic",
        g=g,
        g1=g1,
        g2=g2,
        recession_slope=None,
        growth=None,
        ellipticity_a=None,
        origin_second=2.0,
    )


_CATALOG = {
    "phi_a": phi_a,
    "M_p": m_big_p,
    "m_p": m_small_p,
    "area": lambda *a: area_integrand(),
    "quadratic": lambda *a: quadratic(),
}


def from_config(kind, param=None):
    """Catalog lookup used by the config layer: kind in
    {phi_a, M_p, m_p, area, quadratic} with a real parameter."""
    if kind not in _CATALOG:
        raise InvalidParameterError(
            f"unknown integrand kind {kind!r}; expected one of {sorted(_CATALOG)}"
        )
    if kind in ("phi_a", "M_p", "m_p"):
        if param is None:
            raise InvalidParameterError(f"integrand kind {kind!r} needs a parameter")
        return _CATALOG[kind](float(param))
    return _CATALOG[kind]()


# ---------------------------------------------------------------------------
# derived operations
# ---------------------------------------------------------------------------

def perspective(f, t, xi):
    """Positively 1-homogeneous extension t f(xi/t), with the recession
    function on the t = 0 slice."""
    if t < 0:
        raise InvalidParameterError("perspective needs t >= 0")
    xi = np.asarray(xi, dtype=float)
    if t == 0.0:
        return f.recession(xi)
    return t * f.evaluate(xi / t)


def recession_numeric(f, z, t_ladder=None, rtol=1e-5):
    """Numerical limit of t f(z/t) as t decreases to zero.

    Evaluates the ladder, checks that successive relative changes settle,
    and accelerates the tail with one Aitken delta-squared step (the
    error decays geometrically on a geometric ladder).

    Raises NoConvergenceError if the relative change at the smallest t
    still exceeds ``rtol``.
    """
    z = np.asarray(z, dtype=float)
    if t_ladder is None:
        t_ladder = np.geomspace(1e-2, 1e-8, 13)
    vals = np.array([t * f.evaluate(z / t) for t in t_ladder])

    # Aitken delta-squared removes the leading geometric error term of
    # the ladder; iterate it on consecutive triples.
    acc = vals
    for _ in range(2):
        if acc.size < 3:
            break
        d1 = acc[1:-1] - acc[:-2]
        d2 = acc[2:] - acc[1:-1]
        denom = d2 - d1
        safe = np.abs(denom) > 1e-300
        nxt = np.where(safe, acc[2:] - np.divide(
            d2 * d2, denom, out=np.zeros_like(d2), where=safe), acc[2:])
        acc = nxt

    scale = max(abs(acc[-1]), 1e-30)
    raw_change = abs(vals[-1] - vals[-2]) / max(abs(vals[-1]), 1e-30)
    acc_change = abs(acc[-1] - acc[-2]) / scale if acc.size >= 2 else raw_change
    if min(raw_change, acc_change) > rtol:
        raise NoConvergenceError(
            f"recession ladder did not converge for {f.name} "
            f"(relative change {min(raw_change, acc_change):.2e} at smallest t)"
        )
    return float(acc[-1])


@dataclass(frozen=True)
class ShiftedIntegrand:
    """Second-order Taylor remainder f(a + xi) - f(a) - <f'(a), xi>.

    Carries the two-sided comparison constants against V: the lower one
    m (rho/2)^2 from the smallest Hessian eigenvalue over the reference
    ball, the upper one c(rho/2) sup|f''| + 16 Lip(f) / ((sqrt 2 - 1) rho).
    """

    base: Integrand
    shift_point: np.ndarray
    reference: np.ndarray
    radius: float
    m_lower: float
    sup_hess: float

    def evaluate(self, xi):
        xi = np.asarray(xi, dtype=float)
        a = self.shift_point
        base = self.base
        return (
            base.evaluate(a + xi)
            - base.evaluate(a)
            - float(np.sum(base.gradient(a) * xi))
        )

    def evaluate_batch(self, xis):
        """Vectorised over a stack of symmetric matrices (radial base)."""
        xis = np.asarray(xis, dtype=float)
        a = self.shift_point
        base = self.base
        r = np.sqrt(np.sum((a + xis) ** 2, axis=(-2, -1)))
        fa = base.evaluate(a)
        grad = base.gradient(a)
        return (
            base.value_r(r) - fa - np.einsum("...ij,ij->...", xis, grad)
        )

    def lower_constant(self):
        return self.m_lower * (self.radius / 2.0) ** 2

    def upper_constant(self):
        from .symcalc import v_quadratic_constant

        if self.base.growth is None:
            raise InvalidParameterError("upper bound needs linear growth constants")
        lip = self.base.growth[1]
        c_ell = v_quadratic_constant(self.radius / 2.0)
        return c_ell * self.sup_hess + 16.0 * lip / (
            (math.sqrt(2.0) - 1.0) * self.radius
        )


def hessian_eig_range(f, xi0, rho, n=2, samples=512):
    """(min eigenvalue, max operator norm) of f'' over the closed matrix
    ball around xi0, by a dense radial sweep with the endpoints included.

    For rotationally invariant integrands the eigenvalues depend on |z|
    only, so sweeping radii is a dense sweep of the ball.
    """
    xi0 = np.asarray(xi0, dtype=float)
    r0 = float(np.linalg.norm(xi0))
    radii = np.linspace(max(0.0, r0 - rho), r0 + rho, samples)
    direction = np.zeros((n, n))
    direction[0, 0] = 1.0 / math.sqrt(2.0)
    direction[1, 1] = -1.0 / math.sqrt(2.0)
    m_min = math.inf
    m_max = 0.0
    for r in radii:
        z = r * direction if r > 0 else np.zeros((n, n))
        eigs = np.linalg.eigvalsh(f.hessian_matrix(z))
        m_min = min(m_min, float(eigs.min()))
        m_max = max(m_max, float(np.abs(eigs).max()))
    return m_min, m_max


def shift(f, a, xi0, rho, n=None):
    """Shifted integrand at a, referenced to the ball B(xi0, rho).

    Requires |a - xi0| <= rho/2 (so the half-ball around a stays inside
    the reference ball) and a positive smallest Hessian eigenvalue over
    the reference ball.
    """
    a = np.asarray(a, dtype=float)
    xi0 = np.asarray(xi0, dtype=float)
    if not (0.0 < rho < 1.0):
        raise InvalidParameterError("shift needs a radius rho in (0, 1)")
    if np.linalg.norm(a - xi0) > rho / 2.0 + 1e-12:
        raise InvalidParameterError(
            "shift point must satisfy |a - xi0| <= rho/2"
        )
    dim = a.shape[0] if n is None else n
    m_lower, sup_hess = hessian_eig_range(f, xi0, rho, n=dim)
    if m_lower <= 0.0:
        raise InvalidParameterError(
            "Hessian is not positive definite on the reference ball"
        )
    return ShiftedIntegrand(
        base=f,
        shift_point=a,
        reference=xi0,
        radius=rho,
        m_lower=m_lower,
        sup_hess=sup_hess,
    )


@dataclass(frozen=True)
class EllipticityProfile:
    """Fitted two-sided Hessian envelope at exponent a."""

    a: float
    lam: float
    Lam: float
    certified: bool
    tail_slope: float


def certify_ellipticity(f, a, t_grid=None, directions=32, seed=0):
    """Fit the envelope lambda |xi|^2 (1+|z|^2)^(-a/2) <= <f''(z) xi, xi>
    <= Lambda |xi|^2 (1+|z|^2)^(-1/2) over a radial sample grid.

    Certification fails when the fitted lower envelope keeps decaying at
    the sample tail: then no positive lambda works at the claimed a no
    matter how far the grid extends.  The decision statistic is the
    slope of log(min_xi <f'' xi, xi> (1+t^2)^(a/2)) against
    log sqrt(1+t^2) over the upper half of the grid; a genuinely
    a-elliptic profile flattens out (slope -> 0), an overclaimed one
    decays linearly with rate (a_true - a).
    """
    if t_grid is None:
        t_grid = np.concatenate([[0.0], np.geomspace(1e-2, 1e3, 25)])
    t_grid = np.asarray(t_grid, dtype=float)
    rng = np.random.default_rng(seed)
    n = 2
    s = sym_dim(n)

    lam_cand = np.empty(t_grid.size)
    Lam_cand = np.empty(t_grid.size)
    zdir = np.zeros((n, n))
    zdir[0, 1] = zdir[1, 0] = 1.0 / math.sqrt(2.0)
    for k, t in enumerate(t_grid):
        z = t * zdir
        H = f.hessian_matrix(z)  # raises on singular origins
        # random directions plus the exact eigen-directions of the radial form
        vecs = rng.standard_normal((directions, s))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        vals = np.einsum("dk,kl,dl->d", vecs, H, vecs)
        eigs = np.linalg.eigvalsh(H)
        qmin = min(float(vals.min()), float(eigs.min()))
        qmax = max(float(vals.max()), float(eigs.max()))
        lam_cand[k] = qmin * (1.0 + t * t) ** (a / 2.0)
        Lam_cand[k] = qmax * (1.0 + t * t) ** 0.5

    lam = float(lam_cand.min())
    Lam = float(Lam_cand.max())
    tail = t_grid >= t_grid[t_grid.size // 2]
    x = 0.5 * np.log1p(t_grid[tail] ** 2)
    y = np.log(np.maximum(lam_cand[tail], 1e-300))
    slope = float(np.polyfit(x, y, 1)[0])
    certified = lam > 0.0 and slope >= -0.1
    return EllipticityProfile(
        a=a, lam=lam, Lam=Lam, certified=certified, tail_slope=slope
    )
