"""Gaussian probability primitives and expectations.

Expectations of staircase functions are computed in closed form from the
normal CDF and bivariate orthant probabilities.  Anything else falls back to
Gauss-Hermite quadrature (``DEFAULT_NODES`` nodes per axis) or, for mixed
staircase/smooth pairs, to a one-dimensional adaptive integral over the
conditional distribution of the second coordinate.

A "staircase" here is any object exposing ``base``, ``offsets`` and
``heights`` (``A + sum_i h_i H(x - g_i)``); heights may have either sign.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from . import _kernels
from .errors import DomainError

DEFAULT_NODES = 128
CORR_CLAMP = 1.0 - 1e-12

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _finite(x, name="x"):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite")
    return arr


def _out(arr):
    return float(arr) if np.ndim(arr) == 0 else arr


def std_normal_cdf(x):
    """Standard normal CDF, elementwise."""
    return _out(ndtr(_finite(x)))


def std_normal_pdf(x):
    """Standard normal density, elementwise."""
    x = _finite(x)
    return _out(_INV_SQRT_2PI * np.exp(-0.5 * x * x))


def clamp_correlation(c):
    """Clamp correlations into [-(1 - 1e-12), 1 - 1e-12].

    Returns the clamped value and a flag telling whether anything moved.
    """
    c = np.asarray(c, dtype=float)
    clamped = np.clip(c, -CORR_CLAMP, CORR_CLAMP)
    return _out(clamped), bool(np.any(clamped != c))


def _check_corr(c):
    c = np.asarray(c, dtype=float)
    if np.any(np.isnan(c)) or np.any(np.abs(c) > 1.0):
        raise DomainError("correlation must lie in [-1, 1]")
    return c


def orthant_prob(a, b, c):
    """P(U1 > a, U2 > b) for a standard bivariate normal with correlation c.

    Broadcasts over array arguments.  Uses Genz's algorithm (absolute error
    around 1e-15); ``|c| = 1`` is handled exactly.
    """
    a = _finite(a, "a")
    b = _finite(b, "b")
    c = _check_corr(c)
    return _out(_kernels.bvn_upper(a, b, c))


@dataclass(frozen=True)
class BivariateSpec:
    """Zero-mean bivariate normal with variances (q, q2) and correlation c.

    ``q2`` defaults to ``q``, giving the covariance q * [[1, c], [c, 1]].
    """

    q: float
    c: float
    q2: float = None

    def __post_init__(self):
        if self.q2 is None:
            object.__setattr__(self, "q2", self.q)
        for name in ("q", "q2", "c"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")
        if self.q < 0 or self.q2 < 0:
            raise DomainError("variances must be non-negative")
        if abs(self.c) > 1.0:
            raise DomainError("correlation must lie in [-1, 1]")

    @property
    def cov(self):
        off = self.c * math.sqrt(self.q * self.q2)
        return np.array([[self.q, off], [off, self.q2]])


def is_staircase(f):
    return all(hasattr(f, name) for name in ("base", "offsets", "heights"))


@lru_cache(maxsize=8)
def hermite_rule(n=DEFAULT_NODES):
    """Nodes and weights for E[f(Z)], Z ~ N(0, 1)."""
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / math.sqrt(2.0 * math.pi)


def _parts(f):
    return float(f.base), np.asarray(f.offsets, dtype=float), np.asarray(f.heights, dtype=float)


def _eval_staircase(f, x):
    base, g, h = _parts(f)
    x = np.asarray(x, dtype=float)
    return base + (h * (x[..., None] >= g)).sum(axis=-1)


def staircase_mean(f, q):
    """E f(u), u ~ N(0, q), for a staircase f; broadcasts over q."""
    base, g, h = _parts(f)
    q = np.asarray(q, dtype=float)
    sq = np.sqrt(q)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sq > 0, -g / np.where(sq > 0, sq, 1.0), np.where(g <= 0, np.inf, -np.inf))
    return _out(base + (h * ndtr(z)).sum(axis=-1))


def staircase_pair_moment(f, g, q1, q2, c):
    """E[f(u1) g(u2)] for staircases f, g in closed form.

    ``q1``, ``q2`` and ``c`` broadcast against each other; the result has
    their common shape.  Zero variances are allowed (the coordinate is then
    the constant 0).
    """
    af, gf, hf = _parts(f)
    ag, gg, hg = _parts(g)
    q1, q2, c = np.broadcast_arrays(
        np.asarray(q1, dtype=float), np.asarray(q2, dtype=float), _check_corr(c)
    )
    shape = q1.shape
    q1, q2, c = q1.ravel(), q2.ravel(), c.ravel()
    if np.any(q1 < 0) or np.any(q2 < 0):
        raise DomainError("variances must be non-negative")
    m1 = np.asarray(staircase_mean(f, q1))
    m2 = np.asarray(staircase_mean(g, q2))
    out = m1 * m2
    live = (q1 > 0) & (q2 > 0)
    if np.any(live):
        s1 = np.sqrt(q1[live])[:, None, None]
        s2 = np.sqrt(q2[live])[:, None, None]
        cc = c[live][:, None, None]
        a = gf[None, :, None] / s1
        b = gg[None, None, :] / s2
        joint = _kernels.bvn_upper(a, b, cc)
        # covariance of the two staircases, assembled from indicator covariances
        cov = (hf[None, :, None] * hg[None, None, :] * (joint - ndtr(-a) * ndtr(-b))).sum(axis=(1, 2))
        out[live] += cov
    out = out.reshape(shape)
    return _out(out)


def expect_1d(f, q, nodes=DEFAULT_NODES):
    """E f(u) for u ~ N(0, q).

    Staircases are handled exactly; other callables use Gauss-Hermite
    quadrature with ``nodes`` points.
    """
    q = float(q)
    if not math.isfinite(q) or q < 0:
        raise DomainError("variance must be finite and non-negative")
    if is_staircase(f):
        return staircase_mean(f, q)
    if q == 0:
        return float(f(0.0))
    x, w = hermite_rule(nodes)
    return float(np.dot(w, f(math.sqrt(q) * x)))


def _conditional_mean(g, mean, sd, nodes):
    """E g(v) for v ~ N(mean, sd^2), vectorized over mean."""
    mean = np.asarray(mean, dtype=float)
    if is_staircase(g):
        base, off, h = _parts(g)
        if sd == 0:
            return _eval_staircase(g, mean)
        return base + (h * ndtr((mean[..., None] - off) / sd)).sum(axis=-1)
    if sd == 0:
        return g(mean)
    x, w = hermite_rule(nodes)
    return (g(mean[..., None] + sd * x) * w).sum(axis=-1)


def expect_2d_conditional(f, g, spec, nodes=DEFAULT_NODES, tol=1e-13):
    """E[f(u1) g(u2)] by adaptive integration over u1.

    The inner expectation over u2 given u1 is exact for a staircase g; the
    outer integral is split at the jumps of f when f is a staircase.
    """
    s1, s2 = math.sqrt(spec.q), math.sqrt(spec.q2)
    c = spec.c
    sd = s2 * math.sqrt(max(0.0, 1.0 - c * c))
    if s1 == 0:
        return float(_eval_staircase(f, 0.0) if is_staircase(f) else f(0.0)) * expect_1d(g, spec.q2, nodes)

    def inner(z):
        return float(_conditional_mean(g, s2 * c * z, sd, nodes)) * _INV_SQRT_2PI * math.exp(-0.5 * z * z)

    if is_staircase(f):
        base, off, h = _parts(f)
        cuts = np.concatenate(([-np.inf], off / s1, [np.inf]))
        levels = base + np.concatenate(([0.0], np.cumsum(h)))
        total = 0.0
        for lo, hi, level in zip(cuts[:-1], cuts[1:], levels):
            if level == 0.0 or lo == hi:
                continue
            total += level * integrate.quad(inner, lo, hi, epsabs=tol, epsrel=tol, limit=200)[0]
        return total
    return integrate.quad(
        lambda z: float(f(s1 * z)) * inner(z), -np.inf, np.inf, epsabs=tol, epsrel=tol, limit=200
    )[0]


def expect_2d_hermite(f, g, spec, nodes=DEFAULT_NODES):
    """E[f(u1) g(u2)] by tensorized Gauss-Hermite quadrature (Cholesky map)."""
    x, w = hermite_rule(nodes)
    s1, s2 = math.sqrt(spec.q), math.sqrt(spec.q2)
    z1, z2 = x[:, None], x[None, :]
    u1 = s1 * z1 * np.ones_like(z2)
    u2 = s2 * (spec.c * z1 + math.sqrt(max(0.0, 1.0 - spec.c**2)) * z2)
    return float((w[:, None] * w[None, :] * f(u1) * g(u2)).sum())


def expect_2d(f, g, spec, method="auto", nodes=DEFAULT_NODES):
    """E[f(u1) g(u2)] with (u1, u2) distributed as ``spec``.

    ``method`` is "orthant" (both staircases, closed form), "conditional"
    (1-D adaptive quadrature), "hermite" (tensor Gauss-Hermite) or "auto",
    which picks the most accurate applicable path.
    """
    if not isinstance(spec, BivariateSpec):
        raise DomainError("spec must be a BivariateSpec")
    if method == "auto":
        if is_staircase(f) and is_staircase(g):
            method = "orthant"
        elif is_staircase(f) or is_staircase(g):
            method = "conditional"
        else:
            method = "hermite"
    if method == "orthant":
        if not (is_staircase(f) and is_staircase(g)):
            raise DomainError("the orthant path needs two staircases")
        return staircase_pair_moment(f, g, spec.q, spec.q2, spec.c)
    if method == "conditional":
        if is_staircase(g) or not is_staircase(f):
            return expect_2d_conditional(f, g, spec, nodes)
        swapped = BivariateSpec(spec.q2, spec.c, spec.q)
        return expect_2d_conditional(g, f, swapped, nodes)
    if method == "hermite":
        return expect_2d_hermite(f, g, spec, nodes)
    raise DomainError(f"unknown method {method!r}")
