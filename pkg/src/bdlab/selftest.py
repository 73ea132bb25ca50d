"""Seeded inequality suites runnable as a user command.

Each suite samples a fixed-seed batch, checks a family of pointwise
inequalities and reports the count checked, the count failed and the
first failing witness (so an injected regression is attributable to a
concrete input).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import integrands as intg
from .symcalc import v_of_norm, v_quadratic_constant


@dataclass
class SuiteResult:
    name: str
    checked: int
    failed: int
    witness: str | None = None

    @property
    def passed(self):
        return self.failed == 0


def _random_sym(rng, count, n=2, scale=1.0):
    z = rng.standard_normal((count, n, n)) * scale
    return 0.5 * (z + np.swapaxes(z, -1, -2))


def _first_witness(mask, describe):
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return None
    return describe(int(idx[0]))


def check_inequality(name, lhs, rhs, describe):
    """Assert lhs <= rhs elementwise; returns a SuiteResult with the
    first violating sample as witness."""
    bad = lhs > rhs
    return SuiteResult(
        name=name,
        checked=int(lhs.size),
        failed=int(np.count_nonzero(bad)),
        witness=_first_witness(bad, describe),
    )


def v_function_suite(seed=0, samples=100_000, lower_fn=None):
    """The four reference-integrand estimates, exact (no tolerance).

    ``lower_fn`` substitutes the lower-bound constant of the norm
    comparison; the default is sqrt(2) - 1.  Passing a wrong value is
    how the falsifiability of the machinery is exercised.
    """
    rng = np.random.default_rng(seed)
    nz = rng.lognormal(mean=0.0, sigma=2.0, size=samples)
    nz2 = rng.lognormal(mean=0.0, sigma=2.0, size=samples)
    t = rng.uniform(0.0, 10.0, size=samples)
    lower = (math.sqrt(2.0) - 1.0) if lower_fn is None else lower_fn

    results = []
    v = v_of_norm(nz)
    results.append(
        check_inequality(
            "V(tz) <= 4 max(t, t^2) V(z)",
            v_of_norm(t * nz),
            4.0 * np.maximum(t, t * t) * v,
            lambda i: f"|z|={nz[i]!r}, t={t[i]!r}",
        )
    )
    # subadditivity in the worst (aligned) configuration |z + z'| = |z| + |z'|
    results.append(
        check_inequality(
            "V(z+z') <= 2 (V(z) + V(z'))",
            v_of_norm(nz + nz2),
            2.0 * (v + v_of_norm(nz2)),
            lambda i: f"|z|={nz[i]!r}, |z'|={nz2[i]!r}",
        )
    )
    mins = np.minimum(nz, nz * nz)
    results.append(
        check_inequality(
            "lower norm comparison",
            lower * mins,
            v,
            lambda i: f"|z|={nz[i]!r}",
        )
    )
    results.append(
        check_inequality(
            "V(z) <= min(|z|, |z|^2)",
            v,
            mins,
            lambda i: f"|z|={nz[i]!r}",
        )
    )
    for ell in (0.5, 1.0, 2.0, 5.0):
        r = rng.uniform(0.0, ell, size=samples // 4)
        c = v_quadratic_constant(ell)
        vq = v_of_norm(r)
        results.append(
            check_inequality(
                f"quadratic comparability at ell={ell:g} (lower)",
                r * r / c,
                vq,
                lambda i: f"|z|={r[i]!r}, ell={ell:g}",
            )
        )
        results.append(
            check_inequality(
                f"quadratic comparability at ell={ell:g} (upper)",
                vq,
                c * r * r,
                lambda i: f"|z|={r[i]!r}, ell={ell:g}",
            )
        )
    return results


def _catalog(selection="standard"):
    members = [
        intg.phi_a(1.5),
        intg.phi_a(2.0),
        intg.m_big_p(1.0),
        intg.m_big_p(2.0),
        intg.area_integrand(),
    ]
    if selection == "full":
        members += [intg.phi_a(1.3), intg.phi_a(3.0), intg.m_small_p(3.0),
                    intg.m_small_p(1.5)]
    return members


def lipschitz_suite(seed=1, samples=2000):
    rng = np.random.default_rng(seed)
    results = []
    for f in _catalog():
        z = _random_sym(rng, samples, scale=3.0)
        w = _random_sym(rng, samples, scale=3.0)
        rz = np.sqrt(np.sum(z * z, axis=(-2, -1)))
        rw = np.sqrt(np.sum(w * w, axis=(-2, -1)))
        dz = np.sqrt(np.sum((z - w) ** 2, axis=(-2, -1)))
        c2 = f.growth[1]
        results.append(
            check_inequality(
                f"{f.name}: |f(z)-f(w)| <= c2 |z-w|",
                np.abs(f.value_r(rz) - f.value_r(rw)),
                c2 * dz,
                lambda i: f"|z|={rz[i]!r}, |w|={rw[i]!r}",
            )
        )
        results.append(
            check_inequality(
                f"{f.name}: linear growth",
                np.maximum(f.growth[0] * rz - f.growth[2], 0.0),
                f.value_r(rz),
                lambda i: f"|z|={rz[i]!r}",
            )
        )
        results.append(
            check_inequality(
                f"{f.name}: growth from above",
                f.value_r(rz),
                c2 * (1.0 + rz),
                lambda i: f"|z|={rz[i]!r}",
            )
        )
    return results


def convexity_suite(seed=2, samples=10_000):
    rng = np.random.default_rng(seed)
    results = []
    for f in _catalog():
        z = _random_sym(rng, samples, scale=2.0)
        w = _random_sym(rng, samples, scale=2.0)
        rm = np.sqrt(np.sum((0.5 * (z + w)) ** 2, axis=(-2, -1)))
        rz = np.sqrt(np.sum(z * z, axis=(-2, -1)))
        rw = np.sqrt(np.sum(w * w, axis=(-2, -1)))
        results.append(
            check_inequality(
                f"{f.name}: midpoint convexity",
                f.value_r(rm),
                0.5 * (f.value_r(rz) + f.value_r(rw)),
                lambda i: f"|z|={rz[i]!r}, |w|={rw[i]!r}",
            )
        )
        # discrete Jensen over random 8-point weightings
        k = 8
        zs = _random_sym(rng, (samples // 10) * k, scale=2.0).reshape(
            samples // 10, k, 2, 2
        )
        wts = rng.uniform(0.1, 1.0, size=(samples // 10, k))
        wts /= wts.sum(axis=1, keepdims=True)
        mean = np.einsum("sk,skij->sij", wts, zs)
        rmean = np.sqrt(np.sum(mean * mean, axis=(-2, -1)))
        rs = np.sqrt(np.sum(zs * zs, axis=(-2, -1)))
        results.append(
            check_inequality(
                f"{f.name}: Jensen over discrete weightings",
                f.value_r(rmean),
                np.einsum("sk,sk->s", wts, f.value_r(rs)),
                lambda i: f"mean |z|={rmean[i]!r}",
            )
        )
    return results


def recession_suite(seed=3, samples=10):
    rng = np.random.default_rng(seed)
    results = []
    for f in _catalog("full"):
        z = _random_sym(rng, samples)
        fails = 0
        witness = None
        for k in range(samples):
            num = intg.recession_numeric(f, z[k])
            exact = f.recession(z[k])
            if abs(num - exact) > 1e-5 * max(abs(exact), 1e-30):
                fails += 1
                witness = witness or f"{f.name} at sample {k}"
        results.append(
            SuiteResult(
                name=f"{f.name}: numeric vs analytic recession",
                checked=samples,
                failed=fails,
                witness=witness,
            )
        )
        rz = np.sqrt(np.sum(z * z, axis=(-2, -1)))
        results.append(
            check_inequality(
                f"{f.name}: recession subadditivity",
                f.recession_slope
                * np.sqrt(np.sum((z + z[::-1]) ** 2, axis=(-2, -1))),
                f.recession_slope * (rz + rz[::-1]),
                lambda i: f"sample {i}",
            )
        )
    return results


def derivative_suite(seed=4, samples=200):
    rng = np.random.default_rng(seed)
    results = []
    for f in _catalog("full"):
        fails_g = fails_h = 0
        wit_g = wit_h = None
        for k in range(samples):
            z = _random_sym(rng, 1, scale=2.0)[0]
            xi = _random_sym(rng, 1)[0]
            if f.degenerate_origin and np.linalg.norm(z) < 0.2:
                continue  # flagged singular neighbourhood

            def second_diff(h):
                return (
                    f.evaluate(z + h * xi)
                    - 2 * f.evaluate(z)
                    + f.evaluate(z - h * xi)
                ) / (h * h)

            # one Richardson step kills the h^2 truncation term, which a
            # single central difference cannot push below 1e-5 relative
            fd2 = (4.0 * second_diff(1e-3) - second_diff(2e-3)) / 3.0
            ha = f.hessian_apply(z, xi)
            if abs(fd2 - ha) > 1e-5 * max(abs(ha), 1e-6):
                fails_h += 1
                wit_h = wit_h or f"{f.name} sample {k}"
            # first-order Taylor remainder bounded by C h^2
            ga = float(np.sum(f.gradient(z) * xi))
            C = abs(ha) + 1.0
            for h in (1e-3, 1e-4):
                rem = abs(f.evaluate(z + h * xi) - f.evaluate(z) - h * ga)
                if rem > C * h * h:
                    fails_g += 1
                    wit_g = wit_g or f"{f.name} sample {k} at h={h:g}"
                    break
        results.append(
            SuiteResult(f"{f.name}: gradient check", samples, fails_g, wit_g)
        )
        results.append(
            SuiteResult(f"{f.name}: hessian check", samples, fails_h, wit_h)
        )
    return results


def shifted_suite(seed=5, samples=2000):
    rng = np.random.default_rng(seed)
    results = []
    for f in (intg.area_integrand(), intg.phi_a(1.5)):
        for xi0_scale in (0.0, 0.8):
            xi0 = xi0_scale * np.array([[1.0, 0.2], [0.2, -0.5]])
            xi0 /= max(np.linalg.norm(xi0), 1.0)
            rho = 0.5
            a_pt = xi0 + 0.2 * rho * np.array([[0.0, 1.0], [1.0, 0.0]]) / math.sqrt(2)
            sh = intg.shift(f, a_pt, xi0, rho)
            radii = rng.lognormal(mean=0.0, sigma=2.0, size=samples)
            dirs = _random_sym(rng, samples)
            dirs /= np.sqrt(np.sum(dirs * dirs, axis=(-2, -1)))[:, None, None]
            xis = radii[:, None, None] * dirs
            fa = sh.evaluate_batch(xis)
            v = v_of_norm(radii)
            lo = sh.lower_constant()
            hi = sh.upper_constant()
            results.append(
                check_inequality(
                    f"{f.name}: shifted lower bound (|xi0|={xi0_scale:g})",
                    lo * v,
                    fa,
                    lambda i: f"|xi|={radii[i]!r}",
                )
            )
            results.append(
                check_inequality(
                    f"{f.name}: shifted upper bound (|xi0|={xi0_scale:g})",
                    fa,
                    hi * v,
                    lambda i: f"|xi|={radii[i]!r}",
                )
            )
    return results


def sym_product_suite(seed=6, samples=20_000):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((samples, 2))
    b = rng.standard_normal((samples, 2))
    outer = np.einsum("si,sj->sij", a, b)
    symp = 0.5 * (outer + np.swapaxes(outer, -1, -2))
    norms = np.sqrt(np.sum(symp * symp, axis=(-2, -1)))
    na = np.sqrt(np.sum(a * a, axis=1))
    nb = np.sqrt(np.sum(b * b, axis=1))
    return [
        check_inequality(
            "sym product lower bound |a (.) b| >= |a||b|/sqrt(2)",
            na * nb / math.sqrt(2.0),
            norms * (1.0 + 1e-15),
            lambda i: f"a={a[i]!r}, b={b[i]!r}",
        )
    ]


ALL_SUITES = (
    v_function_suite,
    lipschitz_suite,
    convexity_suite,
    recession_suite,
    derivative_suite,
    shifted_suite,
    sym_product_suite,
)


def run_selftest(seed=0):
    """Run every suite with deterministic seeds derived from ``seed``."""
    results = []
    for k, suite in enumerate(ALL_SUITES):
        results.extend(suite(seed=seed + k))
    return results


def format_table(results):
    lines = []
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        line = f"{r.name:<{width}}  {r.checked:>8} checked  {status}"
        if not r.passed:
            line += f"  ({r.failed} failed; witness: {r.witness})"
        lines.append(line)
    total_fail = sum(r.failed for r in results)
    lines.append(
        f"{'TOTAL':<{width}}  {sum(r.checked for r in results):>8} checked  "
        + ("PASS" if total_fail == 0 else f"FAIL ({total_fail})")
    )
    return "\n".join(lines)
