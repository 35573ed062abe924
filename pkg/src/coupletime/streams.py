"""Counter-based random streams and exact-in-law Brownian step primitives.

Everything downstream (coupling runs, delay solvers, BKR paths) draws its
randomness through `RngStream`, which derives a Philox generator from the
pair (master_seed, stream_index).  The variate sequence is a pure function
of that pair: replicate i of an experiment uses stream index i (or a
substream spawned from it), so results do not depend on how replicates are
scheduled across workers.

The step primitives (`bridge_maximum`, `crossing_probability`,
`bridge_local_time`, `first_passage_mgf`) are the standard exact conditional
laws for a Brownian bridge over one grid step.  They are what make coarse
grids honest: endpoint values are exact in law, and within-step extrema,
level crossings and local-time accrual are sampled from their exact
conditional distributions given the endpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidGridError, InvalidParameterError

__all__ = [
    "RngStream",
    "TimeGrid",
    "gaussian_increment",
    "bridge_maximum",
    "bridge_minimum",
    "crossing_probability",
    "bridge_local_time",
    "first_passage_mgf",
    "bridge_maximum_from_uniform",
    "local_time_from_uniform",
]

_MASK64 = (1 << 64) - 1


def _mix64(z: int) -> int:
    """SplitMix64 finalizer; spreads substream ids over the key space."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass
class RngStream:
    """A named random stream, reproducible from (master_seed, stream_index).

    The generator is created lazily and advances as variates are drawn, but
    the sequence it produces is fixed by the two integers alone.  Use
    `substream(i)` to fan out independent replicate streams.
    """

    master_seed: int
    stream_index: int = 0
    _gen: np.random.Generator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.master_seed = int(self.master_seed) & _MASK64
        self.stream_index = int(self.stream_index) & _MASK64

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            key = np.array([self.master_seed, self.stream_index], dtype=np.uint64)
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def substream(self, i: int) -> "RngStream":
        """Independent child stream i; children of distinct parents stay disjoint."""
        child_master = _mix64(self.master_seed ^ _mix64(self.stream_index ^ 0xA5A5A5A5A5A5A5A5))
        return RngStream(child_master, i)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, size=None):
        return self.generator.random(size)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = t0 + k*dt for k = 0..n_steps.

    Times are always recomputed from (t0, dt, k); nothing accumulates, so
    grid points carry no summation drift.
    """

    t0: float
    dt: float
    n_steps: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.t0) and math.isfinite(self.dt)):
            raise InvalidGridError("t0 and dt must be finite")
        if self.dt <= 0.0:
            raise InvalidGridError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise InvalidGridError(f"n_steps must be >= 1, got {self.n_steps}")

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * self.n_steps


def _check_step(h: float) -> None:
    if not (h > 0.0 and math.isfinite(h)):
        raise InvalidGridError(f"step length must be positive and finite, got {h}")


def gaussian_increment(rng: RngStream, dt: float, size=None):
    """Brownian increment over a step of length dt: N(0, dt) draw(s)."""
    _check_step(dt)
    return rng.normal(size) * math.sqrt(dt)


def bridge_maximum_from_uniform(x0, x1, h, u):
    """Inverse-CDF transform of the maximum of a Brownian bridge.

    For a bridge from x0 to x1 over time h, P(M >= m) = exp(-2(m-x0)(m-x1)/h)
    for m >= max(x0, x1); plugging a uniform u gives an exact sample.
    Vectorized over numpy inputs.
    """
    d = x0 - x1
    return 0.5 * (x0 + x1 + np.sqrt(d * d - 2.0 * h * np.log(u)))


def bridge_maximum(rng: RngStream, x0, x1, h: float):
    """Exact sample of max of a Brownian bridge from x0 to x1 over h."""
    _check_step(h)
    u = rng.uniform(np.shape(x0) if np.ndim(x0) else None)
    return bridge_maximum_from_uniform(x0, x1, h, u)


def bridge_minimum(rng: RngStream, x0, x1, h: float):
    """Exact sample of min of a Brownian bridge (mirror of the maximum)."""
    _check_step(h)
    u = rng.uniform(np.shape(x0) if np.ndim(x0) else None)
    return -bridge_maximum_from_uniform(-np.asarray(x0), -np.asarray(x1), h, u)


def crossing_probability(x0, x1, level, h):
    """P(a Brownian bridge from x0 to x1 over h touches `level`).

    Equals 1 when the endpoints straddle the level (or either sits on it),
    else exp(-2(level-x0)(level-x1)/h), clamped to [0, 1].
    """
    _check_step(float(np.min(h)) if np.ndim(h) else h)
    a = (np.asarray(level) - x0) * (np.asarray(level) - x1)
    p = np.exp(-2.0 * np.maximum(a, 0.0) / h)
    return p if p.ndim else float(p)


def local_time_from_uniform(x0, x1, h, u):
    """Exact sample of a Brownian bridge's local time at 0 given endpoints.

    Joint law of (endpoint, local time) for Brownian motion gives the
    conditional tail P(L > l | x0, x1) = exp(((x1-x0)^2 - (|x0|+|x1|+l)^2)/(2h));
    inverting at a uniform u yields
        L = max(0, sqrt((x0-x1)^2 - 2 h log u) - |x0| - |x1|).
    The event {L > 0} coincides with the bridge touching 0, so this one draw
    also serves as the zero-crossing indicator.  Vectorized.
    """
    d = x0 - x1
    return np.maximum(0.0, np.sqrt(d * d - 2.0 * h * np.log(u)) - np.abs(x0) - np.abs(x1))


def bridge_local_time(rng: RngStream, x0, x1, h: float):
    """Exact sample of local time at 0 over one step, given the endpoints."""
    _check_step(h)
    u = rng.uniform(np.shape(x0) if np.ndim(x0) else None)
    return local_time_from_uniform(x0, x1, h, u)


def first_passage_mgf(d, alpha):
    """E[exp(-alpha * T_d)] for T_d the first passage of Brownian motion to
    distance d >= 0: exp(-sqrt(2 alpha) d).  alpha = 0 gives 1 (passage is
    almost surely finite)."""
    d_arr = np.asarray(d, dtype=float)
    if np.any(d_arr < 0.0):
        raise InvalidParameterError("passage distance must be >= 0")
    if np.any(np.asarray(alpha) < 0.0):
        raise InvalidParameterError("alpha must be >= 0")
    out = np.exp(-math.sqrt(2.0 * alpha) * d_arr) if np.ndim(alpha) == 0 else np.exp(
        -np.sqrt(2.0 * np.asarray(alpha)) * d_arr
    )
    return out if out.ndim else float(out)
