"""Hot numerical kernels with a numba path and a pure numpy path.

The numba versions are used when numba is importable and the environment
variable ``QPROP_NUMBA`` is not set to a false value ("0", "false", "no",
"off").  Both paths compute the same quantities to rounding error; the
numpy versions double as a reference for the compiled ones.

Kernels:

* ``bvn_upper(h, k, r)``: P(X > h, Y > k) for a standard bivariate normal
  with correlation r, using Genz's BVNU algorithm (Drezner-Wesolowsky
  Gauss-Legendre rules plus the high-correlation expansion).
* ``staircase_eval(x, offsets, levels)``: staircase values with H(0) = 1.
* ``pair_product_stats(z1, z2, s1, s2, c, offsets, levels)``: sum and sum of
  squares of phi(u1) * phi(u2) over correlated samples built from z1, z2.
* ``band_means(m)``: mean of each wrapped diagonal of a square matrix.
"""

import math
import os

import numpy as np
from scipy.special import ndtr

_FALSE = {"0", "false", "no", "off"}

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("QPROP_NUMBA", "1").strip().lower() not in _FALSE

TWOPI = 2.0 * math.pi


def _half_legendre(n):
    x, w = np.polynomial.legendre.leggauss(2 * n)
    return x[:n].copy(), w[:n].copy()


# Gauss-Legendre rules on [-1, 1] (negative half; the rule is symmetric).
_X3, _W3 = _half_legendre(3)
_X6, _W6 = _half_legendre(6)
_X10, _W10 = _half_legendre(10)
_NODES = np.zeros((3, 10))
_WEIGHTS = np.zeros((3, 10))
for _row, (_x, _w) in enumerate(((_X3, _W3), (_X6, _W6), (_X10, _W10))):
    _NODES[_row, : _x.size] = _x
    _WEIGHTS[_row, : _w.size] = _w
_COUNTS = np.array([3, 6, 10])


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _np_bvn_low(h, k, r, x, w):
    hk = h * k
    hs = 0.5 * (h * h + k * k)
    asr = np.arcsin(r)
    total = np.zeros_like(h)
    for xi, wi in zip(x, w):
        for node in (xi, -xi):
            sn = np.sin(asr * (node + 1.0) / 2.0)
            total += wi * np.exp((sn * hk - hs) / (1.0 - sn * sn))
    return total * asr / (2.0 * TWOPI) + ndtr(-h) * ndtr(-k)


def _np_bvn_high(h, k, r):
    neg = r < 0
    k = np.where(neg, -k, k)
    hk = h * k
    out = np.zeros_like(h)
    inner = np.abs(r) < 1.0
    if inner.any():
        hi, ki, hki = h[inner], k[inner], hk[inner]
        ri = r[inner]
        as_ = (1.0 - ri) * (1.0 + ri)
        a = np.sqrt(as_)
        bs = (hi - ki) ** 2
        c = (4.0 - hki) / 8.0
        d = (12.0 - hki) / 16.0
        bvn = a * np.exp(-(bs / as_ + hki) / 2.0) * (
            1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0
        )
        b = np.sqrt(bs)
        tail = (
            np.exp(-hki / 2.0) * math.sqrt(TWOPI) * ndtr(-b / a) * b
            * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0)
        )
        bvn = np.where(hki > -160.0, bvn - tail, bvn)
        a = a / 2.0
        for xi, wi in zip(_X10, _W10):
            for node in (xi, -xi):
                xs = (a * (node + 1.0)) ** 2
                rs = np.sqrt(1.0 - xs)
                bvn = bvn + a * wi * (
                    np.exp(-bs / (2.0 * xs) - hki / (1.0 + rs)) / rs
                    - np.exp(-(bs / xs + hki) / 2.0) * (1.0 + c * xs * (1.0 + d * xs))
                )
        out[inner] = -bvn / TWOPI
    pos_part = ndtr(-np.maximum(h, k))
    neg_part = np.maximum(0.0, ndtr(-h) - ndtr(-k))
    return np.where(neg, -out + neg_part, out + pos_part)


def np_bvn_upper(h, k, r):
    """numpy version of :func:`bvn_upper`."""
    h, k, r = np.broadcast_arrays(
        np.asarray(h, dtype=float), np.asarray(k, dtype=float), np.asarray(r, dtype=float)
    )
    shape = h.shape
    h, k, r = h.ravel(), k.ravel(), r.ravel()
    out = np.empty(h.shape)
    ar = np.abs(r)
    bands = ((0.0, 0.3, _X3, _W3), (0.3, 0.75, _X6, _W6), (0.75, 0.925, _X10, _W10))
    for lo, hi, x, w in bands:
        m = (ar >= lo) & (ar < hi)
        if m.any():
            out[m] = _np_bvn_low(h[m], k[m], r[m], x, w)
    m = ar >= 0.925
    if m.any():
        out[m] = _np_bvn_high(h[m], k[m], r[m])
    return out.reshape(shape)


def np_staircase_eval(x, offsets, levels):
    """numpy version of :func:`staircase_eval`."""
    return levels[np.searchsorted(offsets, x, side="right")]


def np_pair_product_stats(z1, z2, s1, s2, c, offsets, levels):
    """numpy version of :func:`pair_product_stats`."""
    u1 = s1 * z1
    u2 = s2 * (c * z1 + math.sqrt(max(0.0, 1.0 - c * c)) * z2)
    p = np_staircase_eval(u1, offsets, levels) * np_staircase_eval(u2, offsets, levels)
    return float(p.sum()), float((p * p).sum())


def np_band_means(m):
    """numpy version of :func:`band_means`."""
    m = np.asarray(m, dtype=float)
    r = m.shape[0]
    idx = np.arange(r)
    cols = (idx[None, :] + idx[:, None]) % r  # row k holds column i + k
    return m[idx[None, :], cols].mean(axis=1)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if numba is not None:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _phi(x):
        return 0.5 * math.erfc(-x / math.sqrt(2.0))

    @_jit
    def _nb_bvnu(h, k, r, nodes, weights, counts):
        ar = abs(r)
        if ar < 0.3:
            ng = 0
        elif ar < 0.75:
            ng = 1
        else:
            ng = 2
        lg = counts[ng]
        hk = h * k
        bvn = 0.0
        if ar < 0.925:
            hs = (h * h + k * k) / 2.0
            asr = math.asin(r)
            for i in range(lg):
                sn = math.sin(asr * (nodes[ng, i] + 1.0) / 2.0)
                bvn += weights[ng, i] * math.exp((sn * hk - hs) / (1.0 - sn * sn))
                sn = math.sin(asr * (-nodes[ng, i] + 1.0) / 2.0)
                bvn += weights[ng, i] * math.exp((sn * hk - hs) / (1.0 - sn * sn))
            return bvn * asr / (2.0 * TWOPI) + _phi(-h) * _phi(-k)
        if r < 0.0:
            k = -k
            hk = -hk
        if ar < 1.0:
            as_ = (1.0 - r) * (1.0 + r)
            a = math.sqrt(as_)
            bs = (h - k) ** 2
            c = (4.0 - hk) / 8.0
            d = (12.0 - hk) / 16.0
            bvn = a * math.exp(-(bs / as_ + hk) / 2.0) * (
                1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0
            )
            if hk > -160.0:
                b = math.sqrt(bs)
                bvn -= (
                    math.exp(-hk / 2.0) * math.sqrt(TWOPI) * _phi(-b / a) * b
                    * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0)
                )
            a = a / 2.0
            for i in range(lg):
                xs = (a * (nodes[ng, i] + 1.0)) ** 2
                rs = math.sqrt(1.0 - xs)
                bvn += a * weights[ng, i] * (
                    math.exp(-bs / (2.0 * xs) - hk / (1.0 + rs)) / rs
                    - math.exp(-(bs / xs + hk) / 2.0) * (1.0 + c * xs * (1.0 + d * xs))
                )
                xs = as_ * (-nodes[ng, i] + 1.0) ** 2 / 4.0
                rs = math.sqrt(1.0 - xs)
                bvn += a * weights[ng, i] * math.exp(-(bs / xs + hk) / 2.0) * (
                    math.exp(-hk * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs
                    - (1.0 + c * xs * (1.0 + d * xs))
                )
            bvn = -bvn / TWOPI
        if r > 0.0:
            return bvn + _phi(-max(h, k))
        return -bvn + max(0.0, _phi(-h) - _phi(-k))

    @_jit
    def _nb_bvn_flat(h, k, r, nodes, weights, counts):
        out = np.empty(h.size)
        for i in range(h.size):
            out[i] = _nb_bvnu(h[i], k[i], r[i], nodes, weights, counts)
        return out

    @_jit
    def _nb_bucket(x, offsets):
        # number of offsets <= x, by bisection
        lo = 0
        hi = offsets.size
        while lo < hi:
            mid = (lo + hi) // 2
            if offsets[mid] <= x:
                lo = mid + 1
            else:
                hi = mid
        return lo

    @_jit
    def _nb_staircase_flat(x, offsets, levels):
        out = np.empty(x.size)
        for i in range(x.size):
            out[i] = levels[_nb_bucket(x[i], offsets)]
        return out

    @_jit
    def nb_pair_product_stats(z1, z2, s1, s2, c, offsets, levels):
        """numba version of :func:`pair_product_stats`."""
        sc = math.sqrt(max(0.0, 1.0 - c * c))
        tot = 0.0
        tot2 = 0.0
        for i in range(z1.size):
            u1 = s1 * z1[i]
            u2 = s2 * (c * z1[i] + sc * z2[i])
            p = levels[_nb_bucket(u1, offsets)] * levels[_nb_bucket(u2, offsets)]
            tot += p
            tot2 += p * p
        return tot, tot2

    @_jit
    def nb_band_means(m):
        """numba version of :func:`band_means`."""
        r = m.shape[0]
        out = np.zeros(r)
        for i in range(r):
            for j in range(r):
                k = j - i
                if k < 0:
                    k += r
                out[k] += m[i, j]
        return out / r

    def nb_bvn_upper(h, k, r):
        """numba version of :func:`bvn_upper`."""
        h, k, r = np.broadcast_arrays(
            np.asarray(h, dtype=float), np.asarray(k, dtype=float), np.asarray(r, dtype=float)
        )
        flat = _nb_bvn_flat(
            np.ascontiguousarray(h).ravel(), np.ascontiguousarray(k).ravel(),
            np.ascontiguousarray(r).ravel(), _NODES, _WEIGHTS, _COUNTS,
        )
        return flat.reshape(h.shape)

    def nb_staircase_eval(x, offsets, levels):
        """numba version of :func:`staircase_eval`."""
        x = np.asarray(x, dtype=float)
        flat = _nb_staircase_flat(np.ascontiguousarray(x).ravel(), offsets, levels)
        return flat.reshape(x.shape)


if USE_NUMBA:
    bvn_upper = nb_bvn_upper
    staircase_eval = nb_staircase_eval
    pair_product_stats = nb_pair_product_stats
    band_means = nb_band_means
else:
    bvn_upper = np_bvn_upper
    staircase_eval = np_staircase_eval
    pair_product_stats = np_pair_product_stats
    band_means = np_band_means
