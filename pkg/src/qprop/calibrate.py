"""Spacing optimization, power-law fits, initialization and hyperparameter grids."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit
from scipy.special import erf

from . import meanfield as mf
from ._parallel import pmap
from .activations import QuantizedActivation, make_constant_spaced, make_linear_spaced
from .errors import DomainError, FitError

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
XAVIER_A = 1.23
XAVIER_SHIFT = 0.2
DEFAULT_FIT_STATES = (2, 4, 8, 16, 32, 64)


@dataclass(frozen=True)
class SpacingCurve:
    """chi as a function of normalized spacing, with its maximum."""

    n_states: int
    d_tilde: np.ndarray
    chi: np.ndarray
    d_tilde_opt: float
    chi_max: float
    degenerate: bool = False

    @property
    def samples(self):
        return list(zip(self.d_tilde.tolist(), self.chi.tolist()))

    @property
    def xi_max(self):
        return mf.depth_scale(self.chi_max)


@dataclass(frozen=True)
class PowerLawFit:
    """ln(1 - chi_max) = log_intercept + exponent * ln(N + shift)."""

    exponent: float
    log_intercept: float
    residual: float
    shift: float = 1.0

    def to_dict(self):
        return {"exponent": self.exponent, "intercept": self.log_intercept, "residual": self.residual}


REFERENCE_FIT = PowerLawFit(exponent=-1.82, log_intercept=0.71, residual=0.0)


@dataclass(frozen=True)
class InitRecommendation:
    sigma_w: float
    sigma_b: float
    rho: float
    q_star: float
    q_hat_star: float
    xavier_factor: float
    d_tilde_opt: float = math.nan

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class Grid:
    """Values on a rectangular grid: rows follow ``row_values``, columns ``col_values``."""

    row_name: str
    row_values: np.ndarray
    col_name: str
    col_values: np.ndarray
    values: np.ndarray

    def argmax(self):
        flat = np.nanargmax(self.values)
        return np.unravel_index(flat, self.values.shape)


def golden_max(f, lo, hi, tol):
    """Maximize a unimodal f on [lo, hi] to an interval shorter than tol."""
    a, b = lo, hi
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 >= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = f(x2)
    return (x1, f1) if f1 >= f2 else (x2, f2)


def optimize_spacing(n_states, coarse_points=200, refine_tol=1e-6, d_range=None, max_extend=8):
    """Maximize chi over the normalized spacing of an N-state constant-spaced activation.

    A log-spaced coarse scan is followed by golden-section refinement.  If
    the coarse maximum sits on the lower edge of the range (large N) the
    window slides down by two decades and the scan repeats.  The default
    window starts below 0.64/N, which keeps very large N from sliding.
    """
    n = int(n_states)
    if n < 2:
        raise DomainError("n_states must be >= 2")
    lo, hi = d_range if d_range is not None else (min(1e-2, 0.64 / n), 1e1)
    if not 0 < lo < hi:
        raise DomainError("d_range must satisfy 0 < lo < hi")
    for _ in range(max_extend + 1):
        grid = np.geomspace(lo, hi, int(coarse_points))
        chis = np.array([mf.chi_constant_spaced(n, d) for d in grid])
        if np.ptp(chis) <= 1e-13:
            mid = float(grid[grid.size // 2])
            return SpacingCurve(n, grid, chis, mid, float(chis[grid.size // 2]), degenerate=True)
        best = int(np.argmax(chis))
        if best > 0:
            break
        lo, hi = lo * 1e-2, lo * 10.0
    left = grid[max(best - 1, 0)]
    right = grid[min(best + 1, grid.size - 1)]
    d_opt, chi_opt = golden_max(lambda d: mf.chi_constant_spaced(n, d), left, right, refine_tol)
    if chi_opt < chis[best]:
        d_opt, chi_opt = float(grid[best]), float(chis[best])
    return SpacingCurve(n, grid, chis, float(d_opt), float(chi_opt))


def fit_power_law(points, shift=1.0):
    """Least-squares fit of ln(1 - chi_max) against ln(N + shift)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise FitError("need at least three (n_states, chi_max) points")
    n, c = pts[:, 0], pts[:, 1]
    if np.any(c <= 0) or np.any(c >= 1):
        raise FitError("chi_max values must lie in (0, 1)")
    x = np.log(n + shift)
    y = np.log1p(-c)
    if np.ptp(x) == 0:
        raise FitError("degenerate design: all n_states equal")
    design = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ np.array([slope, intercept])
    return PowerLawFit(float(slope), float(intercept), float(np.sqrt(np.mean(resid**2))), shift)


def chi_max_sweep(states=DEFAULT_FIT_STATES, **kwargs):
    """optimize_spacing over several N (parallel, order preserved)."""
    return pmap(lambda n: optimize_spacing(n, **kwargs), list(states))


def predicted_depth_scale(n_states, fit=REFERENCE_FIT):
    """Depth scale predicted by a power-law fit.

    Returns ``(exact, approx)`` where exact = -1/ln(1 - e^b (N+s)^p) and
    approx = e^{-b} (N+s)^{-p} is its leading large-N form.
    """
    x = math.exp(fit.log_intercept) * (n_states + fit.shift) ** fit.exponent
    if not 0 < x < 1:
        raise DomainError("fit predicts chi_max outside (0, 1)")
    return -1.0 / math.log1p(-x), 1.0 / x


def ste_rho(sigma_w, q_star):
    """STE slope that makes the mean squared Jacobian singular value one."""
    if not (sigma_w > 0 and q_star > 0):
        raise DomainError("sigma_w and q_star must be positive")
    return 1.0 / (sigma_w * math.sqrt(erf(1.0 / math.sqrt(2.0 * q_star))))


def jacobian_moment(sigma_w, rho, q_star):
    """sigma_w^2 rho^2 P(|u| < 1) for u ~ N(0, q_star)."""
    return sigma_w**2 * rho**2 * erf(1.0 / math.sqrt(2.0 * q_star))


def xavier_factor(n_states, a=XAVIER_A, shift=XAVIER_SHIFT):
    """Correction factor 1 + a / (N + shift)^2 to the Xavier standard deviation."""
    if n_states < 2:
        raise DomainError("n_states must be >= 2")
    return 1.0 + a / (n_states + shift) ** 2


def xavier_std(n_states, fan_in, fan_out):
    """Practitioner weight std: xavier_factor * sqrt(2 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise DomainError("fans must be positive")
    return xavier_factor(n_states) * math.sqrt(2.0 / (fan_in + fan_out))


def init_params(n_states, d_tilde_opt=None):
    """Critical initialization for the N-state constant-spaced activation.

    sigma_b = 0 and sigma_w = D / (d_tilde_opt * sqrt(Qhat*)) with D = 2/(N-1)
    and Qhat* the post-activation variance at the optimal normalized offsets,
    which places the fixed point exactly at the optimal spacing.
    """
    n = int(n_states)
    if n < 2:
        raise DomainError("n_states must be >= 2")
    if d_tilde_opt is None:
        curve = optimize_spacing(n)
        d_tilde_opt = curve.d_tilde_opt
    k = mf.spacing_grid(n)
    d = 2.0 / (n - 1)
    qh = mf._q_hat_normalized(d_tilde_opt * k, np.full(k.size, d))
    sigma_w = d / (d_tilde_opt * math.sqrt(qh))
    q_star = (d / d_tilde_opt) ** 2
    return InitRecommendation(
        sigma_w=sigma_w,
        sigma_b=0.0,
        rho=ste_rho(sigma_w, q_star),
        q_star=q_star,
        q_hat_star=qh,
        xavier_factor=xavier_factor(n),
        d_tilde_opt=float(d_tilde_opt),
    )


def refit_xavier_factor(states=range(3, 129)):
    """Re-derive (a, shift) in sigma_w(N) = 1 + a / (N + shift)^2 from init_params."""
    ns = np.array(list(states), dtype=float)
    sw = np.array(pmap(lambda n: init_params(int(n)).sigma_w, ns.astype(int).tolist()))
    (a, shift), _ = curve_fit(lambda n, a, s: 1.0 + a / (n + s) ** 2, ns, sw, p0=(XAVIER_A, XAVIER_SHIFT))
    return float(a), float(shift)


def _depthscale_cell(act, sw, sb):
    res = mf.approx_chi_star(act, mf.HyperParams.from_std(sw, sb))
    if res.chi <= 0:
        return 0.0
    if res.chi >= 1:
        return math.inf
    return mf.depth_scale(res.chi)


def _axis(value_range, resolution):
    lo, hi = value_range
    return np.linspace(lo, hi, int(resolution))


def grid_depthscale(n_states, sigma_w_range, sigma_b_range, resolution, spacing=1.0, values=None):
    """Approximate depth scale over a (sigma_w, sigma_b) grid.

    The activation has N states with offset spacing ``spacing`` (D = 1 by
    default) and heights 2/(N-1).  ``values`` may supply explicit
    (sigma_w, sigma_b) axes instead of linear ranges.
    """
    n = int(n_states)
    if values is None:
        sw, sb = _axis(sigma_w_range, resolution), _axis(sigma_b_range, resolution)
    else:
        sw, sb = (np.asarray(v, dtype=float) for v in values)
    if np.any(sw <= 0) or np.any(sb < 0):
        raise DomainError("sigma_w must be positive and sigma_b non-negative")
    k = mf.spacing_grid(n)
    act = QuantizedActivation(-1.0, spacing * k, np.full(k.size, 2.0 / (n - 1)))
    cells = [(a, b) for a in sw for b in sb]
    xi = np.array(pmap(lambda ab: _depthscale_cell(act, *ab), cells)).reshape(sw.size, sb.size)
    return Grid("sigma_w", sw, "sigma_b", sb, xi)


def _linear_cell(n, d0, d1):
    try:
        act = make_linear_spaced(n, d0, d1)
    except DomainError:
        return math.nan
    value = mf.chi_normalized(act.offsets, act.heights)
    return mf.depth_scale(value) if 0 < value < 1 else math.nan


def grid_linear_spacing(n_states, d0_range, d1_range, resolution, values=None):
    """Depth scale over normalized (d0, d1) offsets g = d0 m (1 + d1 |m|).

    Cells whose offsets are not strictly increasing are NaN.  Explicit axes
    can be passed through ``values``.
    """
    n = int(n_states)
    if values is None:
        d0, d1 = _axis(d0_range, resolution), _axis(d1_range, resolution)
    else:
        d0, d1 = (np.asarray(v, dtype=float) for v in values)
    if np.any(d0 <= 0):
        raise DomainError("d0 must be positive")
    cells = [(a, b) for a in d0 for b in d1]
    xi = np.array(pmap(lambda ab: _linear_cell(n, *ab), cells)).reshape(d0.size, d1.size)
    return Grid("d0", d0, "d1", d1, xi)


def cq_offsets(n_states, beta):
    """Offsets (2/(n-1)) (i - n/2) (1 + beta/n^2 |i - n/2|), i = 1..n-1."""
    n = int(n_states)
    m = mf.spacing_grid(n)
    return 2.0 / (n - 1) * m * (1.0 + beta / n**2 * np.abs(m))


def grid_cq_comparison(n_states, beta, sigma_w_values, sigma_b=0.0):
    """Correlation-map and variance-map slopes along a sigma_w sweep.

    Returns rows (sigma_w, chi_c, chi_q) with chi_c evaluated at C = 0 and
    chi_q at the converged variance.
    """
    n = int(n_states)
    g = cq_offsets(n, beta)
    act = QuantizedActivation(-1.0, g, np.full(g.size, 2.0 / (n - 1)))

    def row(sw):
        hp = mf.HyperParams.from_std(sw, sigma_b)
        q, _ = mf.solve_q_star(act, hp)
        if q == 0.0:
            return (float(sw), 0.0, 0.0)
        return (float(sw), mf.chi(act, q, 0.0, hp), mf.chi_q(act, q, hp.sigma_w2))

    return pmap(row, [float(s) for s in np.atleast_1d(sigma_w_values)])
