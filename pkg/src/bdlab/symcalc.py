"""Exact tensor algebra for small symmetric systems.

Symmetric tensor products, rigid deformations and their least-squares
projections, and the reference integrand V(z) = sqrt(1+|z|^2) - 1 used
throughout the excess diagnostics.
"""

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

# |a (.) b| >= |a||b| / sqrt(2), attained for orthogonal a, b
SYM_PRODUCT_LOWER_CONST = 1.0 / np.sqrt(2.0)


class DegenerateSampleError(ValueError):
    """Sample set does not determine a rigid deformation."""


def sym_product(a, b):
    """Symmetric tensor product (a b^T + b a^T) / 2 of two vectors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return 0.5 * (np.outer(a, b) + np.outer(b, a))


def frobenius(z):
    """Frobenius norm of a matrix (or absolute value of a scalar)."""
    return float(np.sqrt(np.sum(np.square(np.asarray(z, dtype=float)))))


def v_of_norm(t):
    """V at a given norm, sqrt(1+t^2) - 1 in the cancellation-free form
    t^2 / (1 + sqrt(1+t^2)).  Vectorised."""
    t = np.asarray(t, dtype=float)
    return t * t / (1.0 + np.sqrt(1.0 + t * t))


def v_function(z):
    """V(z) = sqrt(1+|z|^2) - 1 for a matrix, vector or scalar argument."""
    z = np.asarray(z, dtype=float)
    return float(v_of_norm(np.sqrt(np.sum(np.square(z)))))


def v_quadratic_constant(ell):
    """Constant c(ell) with |z|^2/c <= V(z) <= c |z|^2 for |z| <= ell.

    The sharp choice for the lower direction is 1 + sqrt(1+ell^2); it also
    covers the upper direction since V(z) <= |z|^2 always.
    """
    if ell <= 0:
        raise ValueError("ell must be positive")
    return 1.0 + np.sqrt(1.0 + ell * ell)


def skew_from_params(w, n):
    """Skew-symmetric matrix from its free parameters.

    n=2 expects a scalar; n=3 expects three components (rotation vector
    convention A x = w x X ... cross-product form).
    """
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if n == 2:
        return np.array([[0.0, w[0]], [-w[0], 0.0]])
    if n == 3:
        w1, w2, w3 = w
        return np.array([[0.0, -w3, w2], [w3, 0.0, -w1], [-w2, w1, 0.0]])
    raise ValueError("only n in {2, 3} supported")


def skew_params(A):
    """Free parameters of a skew-symmetric matrix (inverse of skew_from_params)."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if n == 2:
        return np.array([A[0, 1]])
    if n == 3:
        return np.array([A[2, 1], A[0, 2], A[1, 0]])
    raise ValueError("only n in {2, 3} supported")


@dataclass(frozen=True)
class RigidDeformation:
    """Affine map x -> A x + b with skew-symmetric A.

    These maps form the nullspace of the symmetric gradient on connected
    domains, which is why they appear as the invariance group of every
    strain-based quantity in the package.
    """

    skew: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.skew, dtype=float)
        b = np.asarray(self.shift, dtype=float)
        if not np.allclose(A + A.T, 0.0, atol=1e-12):
            raise ValueError("skew part must satisfy A + A^T = 0")
        object.__setattr__(self, "skew", A)
        object.__setattr__(self, "shift", b)

    @property
    def dim(self):
        return self.shift.shape[0]

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.skew.T + self.shift

    def gradient(self):
        """Constant full gradient (the skew matrix itself)."""
        return self.skew.copy()

    def is_zero(self, tol=0.0):
        return frobenius(self.skew) <= tol and frobenius(self.shift) <= tol


def rigid_dimension(n):
    """Dimension of the space of rigid deformations: n + n(n-1)/2."""
    return n + n * (n - 1) // 2


def random_rigid(rng, n=2, scale=1.0):
    nrot = n * (n - 1) // 2
    return RigidDeformation(
        skew=skew_from_params(scale * rng.standard_normal(nrot), n),
        shift=scale * rng.standard_normal(n),
    )


def project_rigid(points, values, weights=None, q=2):
    """Weighted least-squares projection of a sampled field onto the
    rigid deformations.

    The projection is always computed from the L2 normal equations, no
    matter which exponent q the caller intends to measure residuals in;
    the projection can be chosen independently of q, and doing so keeps
    it linear and idempotent.  ``q`` is accepted to make that contract
    explicit at call sites.

    Raises
    ------
    DegenerateSampleError
        If the normal equations are numerically singular, e.g. for
        coincident points (any n) or collinear points in 3d.
    """
    del q
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    m, n = points.shape
    if values.shape != (m, n):
        raise ValueError("points and values must have matching shapes")
    if weights is None:
        weights = np.ones(m)
    weights = np.asarray(weights, dtype=float)
    if m < rigid_dimension(n):
        raise DegenerateSampleError("need at least dim R(Omega) sample points")

    wsum = weights.sum()
    centroid = (weights[:, None] * points).sum(axis=0) / wsum
    x = points - centroid

    # basis: n translations, then rotation generators evaluated at x
    nrot = n * (n - 1) // 2
    nb = n + nrot
    basis = np.zeros((nb, m, n))
    for k in range(n):
        basis[k, :, k] = 1.0
    for l in range(nrot):
        e = np.zeros(nrot)
        e[l] = 1.0
        A = skew_from_params(e, n)
        basis[n + l] = x @ A.T

    G = np.einsum("imk,m,jmk->ij", basis, weights, basis)
    rhs = np.einsum("imk,m,mk->i", basis, weights, values)
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > 1e12:
        raise DegenerateSampleError(
            "singular normal equations (degenerate sample set)"
        )
    coef = np.linalg.solve(G, rhs)

    A = skew_from_params(coef[n:], n) if nrot else np.zeros((n, n))
    # recentre: pi(x) = A (x - centroid) + beta = A x + (beta - A centroid)
    b = coef[:n] - A @ centroid
    return RigidDeformation(skew=A, shift=b)


def _ball_lattice(center, radius, n, resolution):
    """Uniform lattice covering the ball.

    Offsets are built sign-symmetric in exact floating point and the
    inclusion test runs on the offsets, so the selected point set is
    exactly symmetric under reflections; several decoupling identities
    of the rigid projection rely on that.
    """
    half = (resolution - 1) / 2.0
    step = radius / half
    offs = (np.arange(resolution) - half) * step
    mesh = np.meshgrid(*([offs] * n), indexing="ij")
    rel = np.stack([m.ravel() for m in mesh], axis=-1)
    inside = np.sum(rel * rel, axis=1) <= radius * radius
    return np.asarray(center) + rel[inside]


def rigid_scaling_check(pi, center, radius, q=2, resolution=48):
    """Ratio [(mean|pi|^q)^(1/q) + r (mean|grad pi|^q)^(1/q)] / mean|pi|
    over a ball, estimating the norm-equivalence constant on the rigid
    deformations.

    Returns a namespace with the ratio and its pieces; ``degenerate`` is
    set when pi vanishes identically and the ratio is undefined.
    """
    center = np.asarray(center, dtype=float)
    n = center.shape[0]
    pts = _ball_lattice(center, radius, n, resolution)
    vals = pi(pts)
    absv = np.sqrt(np.sum(vals * vals, axis=1))
    mean_abs = float(absv.mean())
    grad_norm = frobenius(pi.skew)
    if mean_abs < 1e-300:
        return SimpleNamespace(
            ratio=float("nan"), lq_term=0.0, grad_term=0.0,
            mean_abs=0.0, degenerate=True,
        )
    lq = float(np.mean(absv**q) ** (1.0 / q))
    grad_term = radius * grad_norm
    return SimpleNamespace(
        ratio=(lq + grad_term) / mean_abs,
        lq_term=lq,
        grad_term=grad_term,
        mean_abs=mean_abs,
        degenerate=False,
    )
