"""Mean-field covariance dynamics of deep networks with staircase activations.

Pre-activations of two inputs at layer l are jointly Gaussian with common
variance Q and correlation C.  For a staircase phi the recursion

    Q <- sigma_w^2 * E[phi(u)^2] + sigma_b^2,            u ~ N(0, Q)
    C <- (sigma_w^2 * E[phi(u1) phi(u2)] + sigma_b^2) / Q*

is available in closed form through normal CDF and orthant sums.  The slope
chi of the C-map at its stable fixed point sets the depth scale
xi = -1 / ln(chi) over which input correlations survive.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from .errors import ConvergenceError, DomainError, SingularityError
from .gauss_kernel import CORR_CLAMP, clamp_correlation, staircase_mean, staircase_pair_moment

TOL = 1e-12
MAX_ITER = 10_000
PLATEAU_STEPS = 100
INV_2PI = 1.0 / (2.0 * math.pi)


@dataclass(frozen=True)
class HyperParams:
    """Weight and bias variances of the random network."""

    sigma_w2: float
    sigma_b2: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.sigma_w2) and self.sigma_w2 > 0):
            raise DomainError("sigma_w2 must be positive and finite")
        if not (math.isfinite(self.sigma_b2) and self.sigma_b2 >= 0):
            raise DomainError("sigma_b2 must be non-negative and finite")

    @classmethod
    def from_std(cls, sigma_w, sigma_b=0.0):
        return cls(float(sigma_w) ** 2, float(sigma_b) ** 2)

    @property
    def sigma_w(self):
        return math.sqrt(self.sigma_w2)

    @property
    def sigma_b(self):
        return math.sqrt(self.sigma_b2)


@dataclass(frozen=True)
class CovState:
    """Variance and correlation of a pair of pre-activations."""

    q: float
    c: float

    def __post_init__(self):
        if self.q < 0:
            raise DomainError("q must be non-negative")
        if abs(self.c) > 1:
            raise DomainError("c must lie in [-1, 1]")


@dataclass(frozen=True)
class MeanFieldReport:
    """Fixed point of the covariance dynamics and its convergence rate."""

    q_star: float
    q_hat_star: float
    mu_star: float
    c_star: float
    chi: float
    xi: float
    iterations_q: int
    iterations_c: int
    c_clamped: bool = False

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class ApproxMap:
    """Approximate post-activation map value and whether the approximation applies."""

    value: float
    c: float
    in_regime: bool


@dataclass(frozen=True)
class SignClosedForm:
    map_value: float
    chi_value: float
    q_star: float


@dataclass(frozen=True)
class StochasticSign:
    b_factor: float
    map_value: float
    chi_value: float
    c_star_taylor: float


@dataclass(frozen=True)
class ApproxChi:
    """Result of the four-step fixed-point slope approximation."""

    chi: float
    c_star_estimate: float
    q_star: float
    first_order_valid: bool = True


def _positive_q(q):
    q = float(q)
    if not (q > 0 and math.isfinite(q)):
        raise DomainError("variance must be positive and finite")
    return q


def mu(act, q):
    """Mean of phi(u), u ~ N(0, q)."""
    return float(staircase_mean(act, _positive_q(q)))


def q_hat(act, q):
    """Variance of phi(u), u ~ N(0, q).

    Uses Var = sum_ij h_i h_j Phi(-max(g_i, g_j)/sqrt(q)) Phi(min(g_i, g_j)/sqrt(q)),
    summed in linear time with a prefix sum over the sorted offsets.
    """
    gt = np.asarray(act.offsets) / math.sqrt(_positive_q(q))
    return _q_hat_normalized(gt, np.asarray(act.heights))


def _q_hat_normalized(gt, h):
    up = ndtr(-gt)
    down = ndtr(gt)
    prefix = np.concatenate(([0.0], np.cumsum(h * down)[:-1]))
    return float((h * h * up * down).sum() + 2.0 * (h * up * prefix).sum())


def second_moment(act, q):
    """E phi(u)^2 for u ~ N(0, q)."""
    return q_hat(act, q) + mu(act, q) ** 2


def q_next(act, q, hp):
    """One step of the variance recursion."""
    return hp.sigma_w2 * second_moment(act, q) + hp.sigma_b2


def solve_q_star(act, hp, tol=TOL, max_iter=MAX_ITER):
    """Fixed point of the variance map by plain iteration from sigma_w^2 + sigma_b^2.

    Returns ``(q_star, iterations)``.  A variance that collapses to zero is
    returned as 0.0.
    """
    if not tol > 0:
        raise DomainError("tol must be positive")
    q = hp.sigma_w2 + hp.sigma_b2
    for it in range(1, int(max_iter) + 1):
        nxt = q_next(act, q, hp)
        if nxt == 0.0:
            return 0.0, it
        if abs(nxt - q) <= tol * max(1.0, q):
            return nxt, it
        q = nxt
    raise ConvergenceError(f"variance map did not converge in {max_iter} iterations", last=q, iterations=max_iter)


def pair_moment(act, q, c):
    """E[phi(u1) phi(u2)] for (u1, u2) with variance q and correlation c (array c allowed)."""
    return staircase_pair_moment(act, act, q, q, c)


def c_map(act, q_star, c, hp):
    """Exact one-step map of the pre-activation correlation; broadcasts over c."""
    q_star = _positive_q(q_star)
    c = np.asarray(c, dtype=float)
    if np.any(np.isnan(c)) or np.any(np.abs(c) > 1.0):
        raise DomainError("correlation must lie in [-1, 1]")
    out = (hp.sigma_w2 * np.asarray(pair_moment(act, q_star, c)) + hp.sigma_b2) / q_star
    return float(out) if out.ndim == 0 else out


def pre_from_post(q_hat_star, mu_star, q_star, c_hat, hp):
    """Pre-activation correlation produced by post-activation correlation c_hat."""
    return (hp.sigma_w2 * (q_hat_star * c_hat + mu_star**2) + hp.sigma_b2) / q_star


def post_from_pre(q_hat_star, mu_star, q_star, c, hp):
    """Inverse of :func:`pre_from_post`."""
    return ((c * q_star - hp.sigma_b2) / hp.sigma_w2 - mu_star**2) / q_hat_star


def post_map(act, hp, q_star, c_hat):
    """Exact map of the post-activation correlation at the fixed variance."""
    qh, m = q_hat(act, q_star), mu(act, q_star)
    c = pre_from_post(qh, m, q_star, c_hat, hp)
    return (float(pair_moment(act, q_star, np.clip(c, -1.0, 1.0))) - m * m) / qh


def c_map_approx(act, q_star, c_hat, hp, q_hat_star=None):
    """Closed-form approximation of the post-activation map near zero correlation.

    ``c_hat`` is the post-activation correlation; the result is the next
    post-activation correlation.  The approximation is meant for small
    correlations and normalized offsets below one; ``in_regime`` reports
    whether the inputs fall in that range.  Centered activations are assumed.
    """
    q_star = _positive_q(q_star)
    qh = q_hat(act, q_star) if q_hat_star is None else float(q_hat_star)
    c = (qh * c_hat * hp.sigma_w2 + hp.sigma_b2) / (qh * hp.sigma_w2 + hp.sigma_b2)
    gt = normalized(act, q_star)
    in_regime = bool(np.max(np.abs(gt)) <= 1.0 and abs(c) <= 0.5)
    if c == 0.0:
        return ApproxMap(0.0, 0.0, in_regime)
    c = float(clamp_correlation(c)[0])
    s = math.sqrt(1.0 - c * c)
    asn = math.asin(c)
    g = np.asarray(act.offsets)
    h = np.asarray(act.heights)
    gi, gj = g[:, None], g[None, :]
    k = c / (asn * q_star * s)
    quad = gi**2 + gj**2 - gi * gj * 2.0 * c / (1.0 + s)
    total = (h[:, None] * h[None, :] * np.exp(-0.5 * k * quad)).sum()
    return ApproxMap(float(asn * INV_2PI / qh * total), c, in_regime)


def normalized(act, q):
    return np.asarray(act.offsets) / math.sqrt(_positive_q(q))


def chi(act, q_star, c_star, hp):
    """Slope of the C-map at correlation c_star (closed form, no differencing)."""
    q_star = _positive_q(q_star)
    c_star = float(c_star)
    if not abs(c_star) < 1.0:
        raise SingularityError("chi diverges at |c| = 1")
    c, _ = clamp_correlation(c_star)
    one_m = 1.0 - c * c
    gt = normalized(act, q_star)
    h = np.asarray(act.heights)
    gi, gj = gt[:, None], gt[None, :]
    expo = np.exp(-(gi * gi - 2.0 * c * gi * gj + gj * gj) / (2.0 * one_m))
    total = (h[:, None] * h[None, :] * expo).sum()
    return float(hp.sigma_w2 * INV_2PI / (q_star * math.sqrt(one_m)) * total)


def chi_normalized(norm_offsets, heights):
    """Slope at C* = 0 for sigma_b = 0, from normalized offsets alone.

    Ratio of the density double sum to the post-activation variance, both
    at unit variance.  Invariant under a common rescaling of the heights.
    """
    gt = np.atleast_1d(np.asarray(norm_offsets, dtype=float))
    h = np.atleast_1d(np.asarray(heights, dtype=float))
    if gt.size == 0:
        raise DomainError("need at least one offset")
    if gt.shape != h.shape:
        raise DomainError("offsets and heights differ in length")
    if np.any(np.diff(gt) < 0):
        order = np.argsort(gt, kind="stable")
        gt, h = gt[order], h[order]
    num = INV_2PI * float((h * np.exp(-0.5 * gt * gt)).sum()) ** 2
    return num / _q_hat_normalized(gt, h)


def spacing_grid(n_states):
    """Index set k - N/2 for k = 1..N-1."""
    n = int(n_states)
    if n < 2:
        raise DomainError("n_states must be >= 2")
    return np.arange(1, n) - n / 2.0


def chi_constant_spaced(n_states, d_tilde):
    """Slope for evenly spaced centered offsets with normalized spacing d_tilde."""
    if not d_tilde > 0:
        raise DomainError("d_tilde must be positive")
    k = spacing_grid(n_states)
    return chi_normalized(d_tilde * k, np.ones(k.size))


def _centered(act, q):
    return abs(mu(act, q)) <= 1e-14


def solve_c_star(act, hp, q_star=None, tol=TOL, max_iter=MAX_ITER):
    """Stable fixed point of the C-map in [0, 1).

    Iterates from C = 0, which approaches the fixed point monotonically
    because the map is convex.  If the step size stops shrinking for
    ``PLATEAU_STEPS`` iterations the root of M(C) - C is bracketed and
    solved instead.  Returns ``(c_star, chi, iterations)``.
    """
    if q_star is None:
        q_star = solve_q_star(act, hp, tol, max_iter)[0]
    q_star = _positive_q(q_star)
    if hp.sigma_b2 == 0 and _centered(act, q_star):
        slope = chi(act, q_star, 0.0, hp)
        if slope < 1.0:
            return 0.0, slope, 0
    c = 0.0
    steps = []
    for it in range(1, int(max_iter) + 1):
        nxt = c_map(act, q_star, c, hp)
        if not (-tol <= nxt <= 1.0):
            raise ConvergenceError("correlation iteration left [0, 1]", last=nxt, iterations=it)
        if nxt >= CORR_CLAMP:
            raise ConvergenceError("correlation iteration reached 1; no stable fixed point below 1", last=nxt, iterations=it)
        step = abs(nxt - c)
        c = nxt
        if step <= tol * max(1.0, abs(c)):
            return c, chi(act, q_star, c, hp), it
        steps.append(step)
        if len(steps) > PLATEAU_STEPS and step > 0.99 * steps[-PLATEAU_STEPS - 1]:
            return _bisect_c_star(act, q_star, c, hp, tol) + (it,)
    raise ConvergenceError(f"correlation map did not converge in {max_iter} iterations", last=c, iterations=max_iter)


def _bisect_c_star(act, q_star, lo, hp, tol):
    def gap(x):
        return c_map(act, q_star, x, hp) - x

    hi = lo
    for _ in range(60):
        hi = 1.0 - 0.5 * (1.0 - hi)
        if gap(hi) < 0:
            break
    else:
        raise ConvergenceError("could not bracket the correlation fixed point", last=lo)
    root = brentq(gap, lo, hi, xtol=tol * 1e-3, rtol=4 * np.finfo(float).eps)
    return root, chi(act, q_star, root, hp)


def depth_scale(chi_value):
    """xi = -1 / ln(chi) for 0 < chi < 1."""
    chi_value = float(chi_value)
    if not 0.0 < chi_value < 1.0:
        raise DomainError("depth scale needs 0 < chi < 1")
    return -1.0 / math.log(chi_value)


def _xi_or_limit(chi_value):
    if chi_value <= 0:
        return 0.0
    if chi_value >= 1:
        return math.inf
    return depth_scale(chi_value)


def analyze(act, hp, tol=TOL, max_iter=MAX_ITER):
    """Full fixed-point analysis for one activation and hyperparameter pair."""
    q_star, it_q = solve_q_star(act, hp, tol, max_iter)
    if q_star == 0.0:
        raise ConvergenceError("pre-activation variance collapsed to zero", last=0.0, iterations=it_q)
    c_star, slope, it_c = solve_c_star(act, hp, q_star, tol, max_iter)
    _, clamped = clamp_correlation(c_star)
    return MeanFieldReport(
        q_star=q_star,
        q_hat_star=q_hat(act, q_star),
        mu_star=mu(act, q_star),
        c_star=c_star,
        chi=slope,
        xi=_xi_or_limit(slope),
        iterations_q=it_q,
        iterations_c=it_c,
        c_clamped=clamped,
    )


def sign_closed_forms(hp, c):
    """Variance, C-map value and slope for the sign activation."""
    c = float(c)
    if not abs(c) <= 1.0:
        raise DomainError("correlation must lie in [-1, 1]")
    if abs(c) == 1.0:
        raise SingularityError("chi diverges at |c| = 1")
    q = hp.sigma_w2 + hp.sigma_b2
    value = (2.0 * hp.sigma_w2 / math.pi * math.asin(c) + hp.sigma_b2) / q
    slope = 2.0 * hp.sigma_w2 / (math.pi * q * math.sqrt(1.0 - c * c))
    return SignClosedForm(value, slope, q)


def stochastic_sign(hp, a, c_hat):
    """Sign activation with stochastic rounding sign(x + n), n ~ N(0, a^2).

    Returns the shrinkage factor B, the post-activation map value at c_hat,
    the slope there, and the Taylor estimate of the fixed point.
    """
    a = float(a)
    if not a >= 0:
        raise DomainError("noise std must be non-negative")
    q = hp.sigma_w2 + hp.sigma_b2
    b = math.sqrt(1.0 + (a / q) ** 2 * (2.0 * q + a * a))
    c = (c_hat * hp.sigma_w2 + hp.sigma_b2) / q
    value = 2.0 / math.pi * math.asin(c / b)
    if abs(c) >= b:
        raise SingularityError("slope diverges at |C| = B")
    slope = 2.0 * hp.sigma_w2 / (math.pi * q * math.sqrt(b * b - c * c))
    ratio = q / hp.sigma_w2
    taylor = 1.0 - 4.0 / math.pi**2 / (ratio * b) * (
        1.0 + math.sqrt(1.0 + (math.pi / 2.0) ** 4 * (b * b - b) * ratio**2)
    )
    return StochasticSign(b, value, slope, taylor)


def stochastic_sign_fixed_point(hp, a, tol=TOL, max_iter=MAX_ITER):
    """Stable fixed point of the stochastic-rounding map and its slope."""
    c_hat = 0.0
    for _ in range(int(max_iter)):
        nxt = stochastic_sign(hp, a, c_hat).map_value
        if abs(nxt - c_hat) <= tol:
            c_hat = nxt
            break
        c_hat = nxt
    else:
        raise ConvergenceError("stochastic sign map did not converge", last=c_hat)
    return c_hat, stochastic_sign(hp, a, c_hat).chi_value


def approx_chi_star(act, hp, t_iters=200):
    """Four-step approximation of the fixed-point slope.

    1. iterate the variance map ``t_iters`` times starting from unit
       post-activation variance;
    2. evaluate the approximate post-activation map at zero correlation;
    3. evaluate the exact slope at the pre-activation correlation implied by
       zero post-activation correlation;
    4. take the first-order fixed point estimate M(0) / (1 - chi(0)) and
       return the slope there.
    """
    second = 1.0
    q = hp.sigma_w2 * second + hp.sigma_b2
    for _ in range(int(t_iters)):
        q = hp.sigma_w2 * second + hp.sigma_b2
        if q == 0.0:
            break
        second = second_moment(act, q)
    q = hp.sigma_w2 * second + hp.sigma_b2
    if q <= 0.0 or q_hat(act, q) == 0.0:
        return ApproxChi(0.0, 0.0, 0.0)
    qh = q_hat(act, q)
    m0 = c_map_approx(act, q, 0.0, hp, q_hat_star=qh)
    slope0 = chi(act, q, m0.c, hp)
    if slope0 >= 1.0:
        return ApproxChi(slope0, m0.c, q, first_order_valid=False)
    c_hat = m0.value / (1.0 - slope0)
    c = (qh * c_hat * hp.sigma_w2 + hp.sigma_b2) / (qh * hp.sigma_w2 + hp.sigma_b2)
    return ApproxChi(chi(act, q, c, hp), c, q)


def chi_q(act, q, sigma_w2):
    """Slope of the variance map dQ_next/dQ at q.

    Includes the derivative of the squared mean, which vanishes for
    centered activations.
    """
    q = _positive_q(q)
    gt = normalized(act, q)
    h = np.asarray(act.heights)
    gp = np.maximum(gt[:, None], gt[None, :])
    gm = np.minimum(gt[:, None], gt[None, :])
    dens = lambda x: INV_2PI**0.5 * np.exp(-0.5 * x * x)  # noqa: E731
    terms = gp * dens(gp) * ndtr(gm) - gm * dens(gm) * ndtr(-gp)
    var_part = (h[:, None] * h[None, :] * terms).sum()
    mean_part = 2.0 * mu(act, q) * float((h * dens(gt) * gt).sum())
    return float(sigma_w2 / (2.0 * q) * (var_part + mean_part))


def post_activation_slope(act, hp, c_hat, q_star=None, step=1e-3):
    """Slope of the exact post-activation map, by Richardson-extrapolated differences."""
    if q_star is None:
        q_star = solve_q_star(act, hp)[0]
    qh, m = q_hat(act, q_star), mu(act, q_star)
    lo = post_from_pre(qh, m, q_star, -1.0, hp)
    hi = post_from_pre(qh, m, q_star, 1.0, hp)
    h = min(step, 0.25 * (c_hat - lo), 0.25 * (hi - c_hat))
    if h <= 0:
        raise DomainError("c_hat lies outside the valid correlation range")

    def f(x):
        return post_map(act, hp, q_star, x)

    d1 = f(c_hat + h) - f(c_hat - h)
    d2 = f(c_hat + 2 * h) - f(c_hat - 2 * h)
    return (8.0 * d1 - d2) / (12.0 * h)
