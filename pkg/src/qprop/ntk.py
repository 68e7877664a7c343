"""Infinite-width neural tangent kernel for staircase activations.

The forward covariance follows

    Sigma^(1)(x, x')   = sigma_w^2 x.x'/n0 + sigma_b^2
    Sigma^(l+1)(x, x') = sigma_w^2 E[phi(u1) phi(u2)] + sigma_b^2,  (u1, u2) ~ N(0, Sigma^(l)|_{x,x'})

and the kernel accumulates layer by layer,

    Theta_0 = Sigma^(1),    Theta_L = Sigma'^(L+1) * Theta_{L-1} + Sigma^(L+1),

where Sigma'^(l+1) = sigma_w^2 E[phi'(u1) phi'(u2)] is taken under Sigma^(l).
The staircase derivative vanishes almost everywhere, so phi' is replaced
either by the straight-through estimator rho * 1{|u| <= 1} ("ste") or by
the derivative of a Gaussian-smoothed staircase ("smooth").
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DomainError, IngestionError
from .gauss_kernel import staircase_pair_moment

DERIVATIVE_KINDS = ("ste", "smooth")


@dataclass(frozen=True)
class LabeledGram:
    """Normalized inner products x_i.x_j / n0 of a labeled input set."""

    gram: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gram, dtype=float)
        labels = np.asarray(self.labels)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise DomainError("gram must be a square matrix")
        if not np.allclose(g, g.T, rtol=1e-12, atol=1e-14):
            raise DomainError("gram must be symmetric")
        if np.any(np.diag(g) <= 0):
            raise DomainError("gram diagonal must be positive")
        if labels.shape != (g.shape[0],):
            raise DomainError("need one label per input")
        object.__setattr__(self, "gram", 0.5 * (g + g.T))
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_data(cls, x, labels):
        """Rows of ``x`` are inputs."""
        x = np.asarray(x, dtype=float)
        return cls(x @ x.T / x.shape[1], labels)

    def duplicates(self, rtol=1e-12):
        """Mask of off-diagonal pairs whose inputs coincide."""
        g = self.gram
        d = np.diag(g)
        same = np.isclose(g, d[:, None], rtol=rtol, atol=0) & np.isclose(g, d[None, :], rtol=rtol, atol=0)
        np.fill_diagonal(same, False)
        return same


@dataclass(frozen=True)
class KernelMatrix:
    entries: np.ndarray
    depth: int
    duplicates: np.ndarray = field(default=None, repr=False)


@dataclass(frozen=True)
class SnrMetrics:
    signal: np.ndarray
    noise: np.ndarray
    S: float
    SNR: float
    excluded: np.ndarray


@dataclass(frozen=True)
class DepthStructure:
    """Deep-limit summary of Theta/(L+1) at one depth."""

    depth: int
    alpha: float
    beta: float
    dispersion: float

    @property
    def cv(self):
        return self.dispersion / abs(self.beta) if self.beta != 0 else math.inf

    def to_dict(self):
        return {"depth": self.depth, "alpha": self.alpha, "beta": self.beta, "dispersion": self.dispersion, "cv": self.cv}


def synthetic_clusters(n_points=40, dim=64, separation=1.0, seed=0):
    """Two Gaussian clusters at +/- separation along a random direction.

    Points have unit-variance isotropic noise; classes alternate 0, 1, ...
    Returns ``(x, labels)`` with inputs as rows.
    """
    from .simulate import INPUTS, stream

    rng = stream(seed, 1, INPUTS)
    u = rng.standard_normal(dim)
    u *= math.sqrt(dim) / np.linalg.norm(u)
    labels = np.arange(n_points) % 2
    sign = np.where(labels == 0, 1.0, -1.0)
    x = separation * sign[:, None] * u[None, :] + rng.standard_normal((n_points, dim))
    return x, labels


def read_labeled_csv(path):
    """Read rows of numeric features followed by a label.

    A first row whose feature cells are not numeric is treated as a header.
    """
    rows, labels = [], []
    try:
        with open(path, newline="") as fh:
            for lineno, rec in enumerate(csv.reader(fh), start=1):
                if not rec or all(not cell.strip() for cell in rec):
                    continue
                if len(rec) < 2:
                    raise IngestionError(f"row {lineno}: need at least one feature and a label")
                try:
                    feats = [float(cell) for cell in rec[:-1]]
                except ValueError:
                    if lineno == 1:
                        continue
                    raise IngestionError(f"row {lineno}: non-numeric feature value") from None
                if rows and len(feats) != len(rows[0]):
                    raise IngestionError(f"row {lineno}: expected {len(rows[0])} features, got {len(feats)}")
                if not all(math.isfinite(v) for v in feats):
                    raise IngestionError(f"row {lineno}: non-finite feature value")
                rows.append(feats)
                labels.append(rec[-1].strip())
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from None
    if len(rows) < 2:
        raise IngestionError("need at least two data rows")
    return np.array(rows), np.array(labels)


def _pair_geometry(s):
    d = np.diag(s).copy()
    i, j = np.triu_indices(s.shape[0])
    q1, q2 = d[i], d[j]
    denom = np.sqrt(q1 * q2)
    c = np.where(denom > 0, s[i, j] / np.where(denom > 0, denom, 1.0), 0.0)
    return i, j, q1, q2, np.clip(c, -1.0, 1.0)


def _from_triu(n, i, j, vals):
    out = np.empty((n, n))
    out[i, j] = vals
    out[j, i] = vals
    return out


def sigma_step(s, act, hp):
    """Next-layer covariance from the current one."""
    i, j, q1, q2, c = _pair_geometry(s)
    m = staircase_pair_moment(act, act, q1, q2, c)
    return _from_triu(s.shape[0], i, j, hp.sigma_w2 * np.asarray(m) + hp.sigma_b2)


def sigma_recursion(g, act, hp, depth):
    """[Sigma^(1), ..., Sigma^(depth)] for the inputs of ``g``."""
    if depth < 1:
        raise DomainError("depth must be >= 1")
    s = hp.sigma_w2 * g.gram + hp.sigma_b2
    out = [s]
    for _ in range(depth - 1):
        s = sigma_step(s, act, hp)
        out.append(s)
    return out


def sigma_prime(s, act, hp, kind="ste", rho=1.0, smoothing=0.1):
    """Derivative covariance sigma_w^2 E[phi'(u1) phi'(u2)] under covariance ``s``."""
    i, j, q1, q2, c = _pair_geometry(s)
    if kind == "ste":
        # thresholds beyond 40 standard deviations are numerically infinite
        a = 1.0 / np.sqrt(np.maximum(q1, 1.0 / 1600.0))
        b = 1.0 / np.sqrt(np.maximum(q2, 1.0 / 1600.0))
        box = (
            _kernels.bvn_upper(-a, -b, c) - _kernels.bvn_upper(a, -b, c)
            - _kernels.bvn_upper(-a, b, c) + _kernels.bvn_upper(a, b, c)
        )
        vals = hp.sigma_w2 * rho**2 * np.clip(box, 0.0, 1.0)
    elif kind == "smooth":
        if not smoothing > 0:
            raise DomainError("smoothing must be positive")
        g = np.asarray(act.offsets)
        h = np.asarray(act.heights)
        s2 = smoothing**2
        va = (q1 + s2)[:, None, None]
        vb = (q2 + s2)[:, None, None]
        cov = (c * np.sqrt(q1 * q2))[:, None, None]
        det = va * vb - cov * cov
        x, y = g[None, :, None], g[None, None, :]
        dens = np.exp(-(vb * x * x - 2.0 * cov * x * y + va * y * y) / (2.0 * det)) / (2.0 * math.pi * np.sqrt(det))
        vals = hp.sigma_w2 * (h[None, :, None] * h[None, None, :] * dens).sum(axis=(1, 2))
    else:
        raise DomainError(f"derivative kind must be one of {DERIVATIVE_KINDS}")
    return _from_triu(s.shape[0], i, j, vals)


def ntk_by_depth(g, act, hp, depths, kind="ste", rho=1.0, smoothing=0.1):
    """Kernels at several depths from a single pass of the recursion."""
    depths = sorted({int(d) for d in depths})
    if not depths or depths[0] < 0:
        raise DomainError("depths must be non-negative integers")
    dup = g.duplicates()
    s = hp.sigma_w2 * g.gram + hp.sigma_b2
    theta = s.copy()
    out = []
    if depths[0] == 0:
        out.append(KernelMatrix(theta.copy(), 0, dup))
    for layer in range(1, depths[-1] + 1):
        deriv = sigma_prime(s, act, hp, kind, rho, smoothing)
        s = sigma_step(s, act, hp)
        theta = deriv * theta + s
        if layer in depths:
            out.append(KernelMatrix(theta.copy(), layer, dup))
    return out


def ntk_asymptotic(g, act, kind, hp, depth, rho=1.0, smoothing=0.1):
    """Infinite-width NTK after ``depth`` hidden layers (depth 0 gives Sigma^(1))."""
    return ntk_by_depth(g, act, hp, [depth], kind, rho, smoothing)[0]


def snr_metrics(k, labels):
    """Same-label off-diagonal mass S_i, remaining row mass N_i and their summaries.

    Rows with N_i = 0 are left out of the SNR average and flagged in
    ``excluded``.
    """
    theta = np.asarray(k.entries if isinstance(k, KernelMatrix) else k, dtype=float)
    labels = np.asarray(labels)
    if labels.shape != (theta.shape[0],):
        raise DomainError("need one label per kernel row")
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    signal = (theta * same).sum(axis=1)
    noise = np.abs(theta).sum(axis=1) - signal
    excluded = noise == 0
    ratios = signal[~excluded] / noise[~excluded]
    snr = float(ratios.mean()) if ratios.size else math.nan
    return SnrMetrics(signal, noise, float(signal.mean()), snr, excluded)


def deep_limit_structure(kernels):
    """Mean diagonal, mean off-diagonal and off-diagonal spread of Theta/(L+1) per depth.

    Pairs of duplicated inputs are left out of the off-diagonal statistics.
    """
    kernels = list(kernels)
    if len(kernels) < 2:
        raise DomainError("need kernels at two or more depths")
    out = []
    for k in kernels:
        theta = np.asarray(k.entries) / (k.depth + 1)
        n = theta.shape[0]
        mask = ~np.eye(n, dtype=bool)
        if k.duplicates is not None:
            mask &= ~k.duplicates
        off = theta[mask]
        out.append(DepthStructure(k.depth, float(np.diag(theta).mean()), float(off.mean()), float(off.std())))
    return out
