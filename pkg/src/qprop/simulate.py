"""Seeded finite-width simulations of random networks with staircase activations.

Weights are never stored for the whole network: layer l draws its matrix from
a Philox stream keyed by (seed, layer, kind), so any layer can be rebuilt on
demand and results do not depend on evaluation order or thread count.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import _kernels
from . import meanfield as mf
from ._parallel import pmap
from .activations import QuantizedActivation, SteSurrogate
from .errors import DomainError, EstimationError, ResourceError

WEIGHTS, BIASES, INPUTS, SAMPLES = 0, 1, 2, 3
DEFAULT_MEMORY_BUDGET = 4 * 2**30


def stream(seed, layer, kind):
    """Independent generator for one (seed, layer, kind) triple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(layer), int(kind)])))


@dataclass(frozen=True)
class NetworkSpec:
    """Fully connected network of ``depth`` layers of width ``width``."""

    input_dim: int
    width: int
    depth: int
    hp: mf.HyperParams
    activation: QuantizedActivation
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 2:
            raise DomainError("input_dim must be >= 2")
        if self.width < 1:
            raise DomainError("width must be >= 1")
        if self.depth < 1:
            raise DomainError("depth must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")

    def fan_in(self, layer):
        return self.input_dim if layer == 1 else self.width

    def parameter_bytes(self):
        n, n0, depth = self.width, self.input_dim, self.depth
        return 8 * (n * n0 + (depth - 1) * n * n + depth * n)


@dataclass(frozen=True)
class ManifoldSpec:
    """r inputs on a great circle; ``q_star_scale`` is the root mean square coordinate."""

    num_samples: int
    q_star_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 2:
            raise DomainError("num_samples must be >= 2")
        if not self.q_star_scale > 0:
            raise DomainError("q_star_scale must be positive")


@dataclass(frozen=True)
class LayerStats:
    """Empirical pre-activation statistics of one layer.

    ``c_emp[k]`` is the mean correlation between inputs k steps apart on the
    circle, i.e. at angle difference ``delta_theta[k] = 2 pi k / r``.
    """

    layer: int
    q_emp: float
    c_emp: np.ndarray
    delta_theta: np.ndarray


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo estimate averaged over seeds."""

    value: float
    stderr: float
    per_seed: np.ndarray = field(repr=False)
    reference: float = math.nan

    def to_dict(self):
        return {
            "value": self.value,
            "stderr": self.stderr,
            "reference": self.reference,
            "per_seed": self.per_seed.tolist(),
        }


class Network:
    """Random network whose parameters are regenerated from the seed on demand."""

    def __init__(self, spec, weights=None, biases=None):
        self.spec = spec
        self._weights = weights
        self._biases = biases

    def weight(self, layer):
        if self._weights is not None:
            return self._weights[layer - 1]
        spec = self.spec
        fan_in = spec.fan_in(layer)
        z = stream(spec.seed, layer, WEIGHTS).standard_normal((spec.width, fan_in))
        return z * (spec.hp.sigma_w / math.sqrt(fan_in))

    def bias(self, layer):
        if self._biases is not None:
            return self._biases[layer - 1]
        spec = self.spec
        if spec.hp.sigma_b2 == 0:
            return np.zeros(spec.width)
        return stream(spec.seed, layer, BIASES).standard_normal(spec.width) * spec.hp.sigma_b

    def preactivations(self, inputs, depth=None):
        """Yield (layer, pre-activation matrix) for layers 1..depth; columns are inputs."""
        x = np.asarray(inputs, dtype=float)
        if x.ndim != 2 or x.shape[0] != self.spec.input_dim:
            raise DomainError(f"inputs must have shape ({self.spec.input_dim}, r)")
        act = self.spec.activation
        depth = self.spec.depth if depth is None else min(int(depth), self.spec.depth)
        h = x
        for layer in range(1, depth + 1):
            a = self.weight(layer) @ h + self.bias(layer)[:, None]
            yield layer, a
            h = _kernels.staircase_eval(a, act.offsets, act.levels)


def build_network(spec, materialize=False, memory_budget=DEFAULT_MEMORY_BUDGET):
    """Network for ``spec``; with ``materialize`` all parameters are drawn up front."""
    if not materialize:
        return Network(spec)
    need = spec.parameter_bytes()
    if need > memory_budget:
        raise ResourceError(f"materializing the network needs {need} bytes (budget {memory_budget})", need)
    lazy = Network(spec)
    layers = range(1, spec.depth + 1)
    return Network(spec, [lazy.weight(l) for l in layers], [lazy.bias(l) for l in layers])


def input_scale(act, hp, q_star=None):
    """Root mean square input coordinate that puts layer 1 at the variance fixed point."""
    if q_star is None:
        q_star = mf.solve_q_star(act, hp)[0]
    return math.sqrt(max(q_star - hp.sigma_b2, 0.0) / hp.sigma_w2)


def _orthonormal_pair(n0, seed):
    v = stream(seed, 0, INPUTS).standard_normal((2, n0))
    u0 = v[0] / np.linalg.norm(v[0])
    u1 = v[1] - (v[1] @ u0) * u0
    return u0, u1 / np.linalg.norm(u1)


def manifold_inputs(n0, m):
    """Inputs sqrt(n0) * scale * (u0 cos theta_i + u1 sin theta_i), theta_i = 2 pi i / r.

    Returns an (n0, r) matrix.  Every column has mean square coordinate
    ``scale ** 2`` and columns i, j have cosine similarity cos(theta_i - theta_j).
    """
    if n0 < 2:
        raise DomainError("n0 must be >= 2")
    u0, u1 = _orthonormal_pair(n0, m.seed)
    theta = 2.0 * np.pi * np.arange(m.num_samples) / m.num_samples
    return math.sqrt(n0) * m.q_star_scale * (np.outer(u0, np.cos(theta)) + np.outer(u1, np.sin(theta)))


def _correlations(a):
    gram = a.T @ a / a.shape[0]
    d = np.sqrt(np.diag(gram))
    d = np.where(d > 0, d, 1.0)
    return gram / np.outer(d, d), float(np.mean(np.diag(gram)))


def fold_bands(corr):
    """Average wrapped diagonals k and r - k of a circulant-ordered correlation matrix."""
    band = _kernels.band_means(np.ascontiguousarray(corr))
    r = band.size
    k = np.arange(r // 2 + 1)
    return 0.5 * (band[k] + band[(r - k) % r])


def forward_collect(net, inputs, layers=None):
    """Per-layer empirical variance and angle-binned correlations.

    ``inputs`` are taken as consecutive points on a circle (as produced by
    :func:`manifold_inputs`).  ``layers`` restricts which layers are kept.
    """
    x = np.asarray(inputs, dtype=float)
    r = x.shape[1] if x.ndim == 2 else 0
    keep = None if layers is None else set(layers)
    delta = 2.0 * np.pi * np.arange(r // 2 + 1) / max(r, 1)
    out = []
    for layer, a in net.preactivations(x):
        if keep is not None and layer not in keep:
            continue
        corr, q = _correlations(a)
        out.append(LayerStats(layer, q, fold_bands(corr), delta))
    return out


def theory_curves(act, hp, delta_theta, depth, q_star=None):
    """Mean-field correlations C^(l)(delta_theta) for l = 1..depth.

    Layer 1 inherits cos(delta_theta) through the affine input map; later
    layers iterate the exact C-map at the variance fixed point.
    """
    if q_star is None:
        q_star = mf.solve_q_star(act, hp)[0]
    qs = input_scale(act, hp, q_star) ** 2
    c = (hp.sigma_w2 * qs * np.cos(delta_theta) + hp.sigma_b2) / q_star
    c = np.clip(c, -1.0, 1.0)
    rows = [c]
    for _ in range(depth - 1):
        c = np.clip(mf.c_map(act, q_star, c, hp), -1.0, 1.0)
        rows.append(c)
    return np.array(rows)


@dataclass(frozen=True)
class ManifoldRun:
    """Seed-averaged manifold propagation with its mean-field prediction."""

    sigma_w: float
    delta_theta: np.ndarray
    c_emp: np.ndarray
    c_theory: np.ndarray
    q_emp: np.ndarray

    def mae(self, layers=20):
        """Mean absolute theory gap over the first ``layers`` layers, angles > 0."""
        return float(np.mean(np.abs(self.c_emp[:layers, 1:] - self.c_theory[:layers, 1:])))

    def persistence(self):
        """Mean absolute correlation over all layers and angles > 0 (slower decay is larger)."""
        return float(np.mean(np.abs(self.c_emp[:, 1:])))


def run_manifold(act, hp, width, depth, num_samples, seeds, input_dim=None):
    """Propagate circle inputs through random networks and average over seeds."""
    n0 = width if input_dim is None else input_dim
    q_star = mf.solve_q_star(act, hp)[0]
    scale = input_scale(act, hp, q_star)

    def one(seed):
        spec = NetworkSpec(n0, width, depth, hp, act, seed)
        x = manifold_inputs(n0, ManifoldSpec(num_samples, scale, seed))
        stats = forward_collect(build_network(spec), x)
        return np.array([s.c_emp for s in stats]), np.array([s.q_emp for s in stats])

    results = pmap(one, list(seeds))
    c_emp = np.mean([r[0] for r in results], axis=0)
    q_emp = np.mean([r[1] for r in results], axis=0)
    delta = 2.0 * np.pi * np.arange(num_samples // 2 + 1) / num_samples
    return ManifoldRun(hp.sigma_w, delta, c_emp, theory_curves(act, hp, delta, depth, q_star), q_emp)


def _pair_inputs(n0, c_in, scale, seed):
    """Columns 2k, 2k+1 have cosine similarity c_in[k] and mean square scale**2."""
    rng = stream(seed, 0, INPUTS)
    cols = []
    for c in c_in:
        v = rng.standard_normal((2, n0))
        u0 = v[0] / np.linalg.norm(v[0])
        u1 = v[1] - (v[1] @ u0) * u0
        u1 /= np.linalg.norm(u1)
        cols += [u0, c * u0 + math.sqrt(1.0 - c * c) * u1]
    return math.sqrt(n0) * scale * np.array(cols).T


def empirical_chi(spec, c0_window, n_seeds, n_pairs=200, noise_floor=None):
    """Regression estimate of the fixed-point slope from finite-width networks.

    Pairs of inputs start with layer-1 correlations spread over
    ``c0_window``.  For each seed the slope of eps_{l+1} on eps_l
    (eps = C - C*) is fitted through the origin, pooling all pairs and the
    layers whose predicted |eps| stays above ``noise_floor`` (default
    1/sqrt(width)).  The estimate is the mean over seeds with its standard
    error.
    """
    act, hp = spec.activation, spec.hp
    q_star = mf.solve_q_star(act, hp)[0]
    c_star, slope, _ = mf.solve_c_star(act, hp, q_star)
    lo, hi = sorted(float(v) for v in c0_window)
    c0 = np.linspace(lo, hi, int(n_pairs))
    c0 = c0[np.abs(c0 - c_star) > 1e-12]
    if c0.size == 0:
        raise EstimationError("every starting correlation equals the fixed point; slope undefined")
    if np.any(np.abs(c0) >= 1):
        raise DomainError("starting correlations must lie inside (-1, 1)")
    floor = 1.0 / math.sqrt(spec.width) if noise_floor is None else float(noise_floor)
    theory = [c0]
    while len(theory) < spec.depth:
        theory.append(mf.c_map(act, q_star, theory[-1], hp))
        if np.max(np.abs(theory[-1] - c_star)) < floor:
            break
    theory = np.array(theory)
    regime = int(np.sum(np.max(np.abs(theory - c_star), axis=1) >= floor))
    if regime < 2:
        raise EstimationError("fewer than two layers in the linear regime")
    scale = input_scale(act, hp, q_star)
    c_in = np.clip((c0 * q_star - hp.sigma_b2) / (hp.sigma_w2 * scale**2), -1.0, 1.0)

    def one(seed):
        net = build_network(NetworkSpec(spec.input_dim, spec.width, spec.depth, hp, act, seed))
        x = _pair_inputs(spec.input_dim, c_in, scale, seed)
        eps = []
        for _, a in net.preactivations(x, depth=regime):
            u, v = a[:, 0::2], a[:, 1::2]
            c = (u * v).sum(0) / np.sqrt((u * u).sum(0) * (v * v).sum(0))
            eps.append(c - c_star)
        eps = np.array(eps)
        return float((eps[:-1] * eps[1:]).sum() / (eps[:-1] ** 2).sum())

    seeds = [int(spec.seed) + s for s in range(int(n_seeds))]
    per_seed = np.array(pmap(one, seeds))
    return _summarize(per_seed, slope)


def _summarize(per_seed, reference):
    se = float(per_seed.std(ddof=1) / math.sqrt(per_seed.size)) if per_seed.size > 1 else math.nan
    return Estimate(float(per_seed.mean()), se, per_seed, float(reference))


def jacobian_moment_mc(spec, ste, n_seeds, n_inputs=4):
    """Monte Carlo estimate of (1/n) tr(J J^T) for J = D_ste(alpha^(l)) W^(l).

    Averaged over layers, inputs and neurons within a seed; the reported
    standard error is across seeds.  The reference value is
    sigma_w^2 rho^2 P(|u| < clip) for u ~ N(0, Q*).
    """
    if not isinstance(ste, SteSurrogate):
        raise DomainError("ste must be a SteSurrogate")
    act, hp = spec.activation, spec.hp
    q_star = mf.solve_q_star(act, hp)[0]
    scale = input_scale(act, hp, q_star)

    def one(seed):
        net = build_network(NetworkSpec(spec.input_dim, spec.width, spec.depth, hp, act, seed))
        x = stream(seed, 0, INPUTS).standard_normal((spec.input_dim, n_inputs))
        x *= scale * math.sqrt(spec.input_dim) / np.linalg.norm(x, axis=0)
        total = 0.0
        for layer, a in net.preactivations(x):
            row = (net.weight(layer) ** 2).sum(axis=1)
            total += float((ste.derivative(a) ** 2 * row[:, None]).mean())
        return total / spec.depth

    reference = hp.sigma_w2 * ste.rho**2 * erf(ste.clip / math.sqrt(2.0 * q_star))
    seeds = [int(spec.seed) + s for s in range(int(n_seeds))]
    return _summarize(np.array(pmap(one, seeds)), reference)


def mc_expect_2d(f, g, spec, n_samples, seed=0, chunk=2**22):
    """Monte Carlo E[f(u1) g(u2)] for staircases f, g; returns (mean, stderr).

    Samples are drawn in chunks of ``chunk`` pairs from a seeded Philox
    stream; a given (seed, chunk) pair always reproduces the same estimate.
    """
    if not (hasattr(f, "levels") and hasattr(g, "levels")):
        raise DomainError("Monte Carlo pair moments need QuantizedActivation inputs")
    rng = stream(seed, 0, SAMPLES)
    s1, s2 = math.sqrt(spec.q), math.sqrt(spec.q2)
    total = total2 = 0.0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        z = rng.standard_normal((2, m))
        if f is g:
            t, t2 = _kernels.pair_product_stats(z[0], z[1], s1, s2, spec.c, f.offsets, f.levels)
        else:
            u1 = s1 * z[0]
            u2 = s2 * (spec.c * z[0] + math.sqrt(max(0.0, 1.0 - spec.c**2)) * z[1])
            p = _kernels.staircase_eval(u1, f.offsets, f.levels) * _kernels.staircase_eval(u2, g.offsets, g.levels)
            t, t2 = float(p.sum()), float((p * p).sum())
        total += t
        total2 += t2
        done += m
    mean = total / n_samples
    var = max(total2 / n_samples - mean * mean, 0.0)
    return mean, math.sqrt(var / n_samples)
