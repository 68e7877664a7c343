"""Quantized (staircase) activations and the straight-through surrogate."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DomainError


@dataclass(frozen=True, eq=False)
class QuantizedActivation:
    """phi(x) = base + sum_i heights[i] * H(x - offsets[i]) with H(0) = 1.

    Coincident offsets are merged by summing their heights, so the stored
    offsets are strictly increasing and every height is positive.
    """

    base: float
    offsets: np.ndarray
    heights: np.ndarray
    levels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        h = np.atleast_1d(np.asarray(self.heights, dtype=float))
        if g.ndim != 1 or g.shape != h.shape:
            raise DomainError("offsets and heights must be 1-D sequences of equal length")
        if g.size == 0:
            raise DomainError("an activation needs at least one offset")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h)) and math.isfinite(self.base)):
            raise DomainError("activation parameters must be finite")
        if np.any(h <= 0):
            raise DomainError("heights must be strictly positive")
        order = np.argsort(g, kind="stable")
        g, h = g[order], h[order]
        uniq, inverse = np.unique(g, return_inverse=True)
        merged = np.zeros(uniq.size)
        np.add.at(merged, inverse, h)
        uniq.setflags(write=False)
        merged.setflags(write=False)
        levels = float(self.base) + np.concatenate(([0.0], np.cumsum(merged)))
        levels.setflags(write=False)
        object.__setattr__(self, "base", float(self.base))
        object.__setattr__(self, "offsets", uniq)
        object.__setattr__(self, "heights", merged)
        object.__setattr__(self, "levels", levels)

    @property
    def n_states(self):
        return self.offsets.size + 1

    def __call__(self, x):
        return eval_activation(self, x)

    def __eq__(self, other):
        if not isinstance(other, QuantizedActivation):
            return NotImplemented
        return (
            self.base == other.base
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.heights, other.heights)
        )

    def __hash__(self):
        return hash((self.base, self.offsets.tobytes(), self.heights.tobytes()))

    def is_odd(self, tol=1e-12):
        """True when phi(-x) = -phi(x) away from the offsets."""
        g, h = self.offsets, self.heights
        return (
            np.allclose(g, -g[::-1], atol=tol, rtol=0)
            and np.allclose(h, h[::-1], atol=tol, rtol=0)
            and abs(self.base + 0.5 * h.sum()) <= tol
        )

    def scaled_offsets(self, factor):
        """Same heights and base, offsets multiplied by ``factor``."""
        return QuantizedActivation(self.base, self.offsets * factor, self.heights)

    def to_dict(self):
        return {
            "kind": "general",
            "base": self.base,
            "offsets": self.offsets.tolist(),
            "heights": self.heights.tolist(),
        }


@dataclass(frozen=True)
class SteSurrogate:
    """Hard-tanh straight-through estimator: derivative rho on |x| <= clip."""

    rho: float = 1.0
    clip: float = 1.0

    def __post_init__(self):
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise DomainError("rho must be positive")
        if not (self.clip > 0 and math.isfinite(self.clip)):
            raise DomainError("clip must be positive")

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(np.abs(x) <= self.clip, self.rho, 0.0)


def eval_activation(act, x):
    """Evaluate the staircase at ``x`` (scalar or array)."""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("activation input must be finite")
    out = _kernels.staircase_eval(arr, act.offsets, act.levels)
    return float(out) if np.ndim(out) == 0 else out


def make_sign():
    """sign(x) with sign(0) = +1."""
    return QuantizedActivation(-1.0, [0.0], [2.0])


def make_constant_spaced(n_states):
    """N evenly spaced states from -1 to 1, offsets centered on zero."""
    n = _states(n_states)
    d = 2.0 / (n - 1)
    m = np.arange(1, n) - n / 2.0
    return QuantizedActivation(-1.0, d * m, np.full(n - 1, d))


def make_linear_spaced(n_states, d0, d1):
    """States of equal height with offsets d0 * m * (1 + d1 * |m|), m = i - N/2.

    With ``d1 = 0`` this is the constant-spaced activation with spacing d0.
    Heights are 2/(N-1) so the states still span [-1, 1].
    """
    n = _states(n_states)
    if not d0 > 0:
        raise DomainError("d0 must be positive")
    m = np.arange(1, n) - n / 2.0
    g = d0 * m * (1.0 + d1 * np.abs(m))
    bad = np.flatnonzero(np.diff(g) <= 0)
    if bad.size:
        i = int(bad[0]) + 1
        raise DomainError(f"offsets not increasing at index {i} (d1={d1} too negative)")
    return QuantizedActivation(-1.0, g, np.full(n - 1, 2.0 / (n - 1)))


def normalized_offsets(act, q_star):
    """Offsets divided by sqrt(q_star)."""
    if not q_star > 0:
        raise DomainError("q_star must be positive")
    return act.offsets / math.sqrt(q_star)


def from_descriptor(desc):
    """Build an activation from a JSON descriptor (dict or JSON text)."""
    if isinstance(desc, str):
        text = desc.strip()
        if text == "sign":
            return make_sign()
        try:
            desc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DomainError(f"bad activation descriptor: {exc}") from None
    if not isinstance(desc, dict) or "kind" not in desc:
        raise DomainError("activation descriptor needs a 'kind'")
    kind = desc["kind"]
    try:
        if kind == "sign":
            return make_sign()
        if kind == "constant":
            return make_constant_spaced(desc["states"])
        if kind == "linear":
            return make_linear_spaced(desc["states"], desc["d0"], desc["d1"])
        if kind == "general":
            return QuantizedActivation(desc["base"], desc["offsets"], desc["heights"])
    except KeyError as exc:
        raise DomainError(f"activation descriptor missing field {exc}") from None
    raise DomainError(f"unknown activation kind {kind!r}")


def _states(n_states):
    if int(n_states) != n_states or n_states < 2:
        raise DomainError("n_states must be an integer >= 2")
    return int(n_states)
