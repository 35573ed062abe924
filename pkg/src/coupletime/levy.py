"""The 2:1 correspondence between (|X|, L) and (B, S).

For a Brownian motion X with local time L at zero, the pair (|X|, L) has the
same law as (S - B, S), where B is a Brownian motion and S its running
supremum started at a floor s0 = l0.  `to_levy` / `from_levy` move between
the two charts; `simulate_levy_path` produces exact-in-law grid skeletons of
(B, S) by advancing S with sampled bridge maxima rather than the endpoint
max, which would bias S low by O(sqrt(dt)).

The inverse chart needs one extra bit per excursion (the sign of X), which
is why `from_levy` takes the sign as an input instead of inventing one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, InvalidStateError
from .streams import RngStream, TimeGrid, bridge_maximum_from_uniform

__all__ = [
    "DiffusionState",
    "LevyPair",
    "to_levy",
    "from_levy",
    "LevyPath",
    "simulate_levy_path",
    "sample_levy_endpoints",
    "write_path_csv",
]


@dataclass(frozen=True)
class DiffusionState:
    """Position x and accumulated local time l >= 0 of a diffusion at level 0."""

    x: float
    l: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.l)):
            raise InvalidStateError("state coordinates must be finite")
        if self.l < 0.0:
            raise InvalidStateError(f"local time must be >= 0, got {self.l}")


@dataclass(frozen=True)
class LevyPair:
    """Driver value b, running supremum s, and the initial floor s_floor.

    Requires s >= b and s >= s_floor.  A pair built without an explicit
    floor takes s_floor = s (a fresh pair's floor is its supremum).
    """

    b: float
    s: float
    s_floor: float | None = None

    def __post_init__(self) -> None:
        if self.s_floor is None:
            object.__setattr__(self, "s_floor", self.s)
        if not (
            math.isfinite(self.b)
            and math.isfinite(self.s)
            and math.isfinite(self.s_floor)
        ):
            raise InvalidStateError("pair coordinates must be finite")
        if self.s < self.b:
            raise InvalidStateError(f"supremum {self.s} below driver {self.b}")
        if self.s < self.s_floor:
            raise InvalidStateError(
                f"supremum {self.s} below its floor {self.s_floor}"
            )


def to_levy(state: DiffusionState) -> LevyPair:
    """Chart (x, l) -> (b, s) = (l - |x|, l); the floor of a fresh pair is l."""
    return LevyPair(b=state.l - abs(state.x), s=state.l, s_floor=state.l)


def from_levy(pair: LevyPair, sign: int) -> DiffusionState:
    """Chart (b, s) -> (x, l) = (sign * (s - b), s); sign picks the excursion side."""
    if sign not in (-1, 1):
        raise InvalidParameterError(f"sign must be -1 or +1, got {sign}")
    return DiffusionState(x=sign * (pair.s - pair.b), l=pair.s)


@dataclass(frozen=True)
class LevyPath:
    """Grid skeleton of (B, S): arrays t, b, s of equal length, s nondecreasing.

    s_floor is the initial floor shared by every point of the path.
    """

    t: np.ndarray
    b: np.ndarray
    s: np.ndarray
    s_floor: float

    def __len__(self) -> int:
        return len(self.t)

    def pair(self, k: int) -> LevyPair:
        return LevyPair(b=float(self.b[k]), s=float(self.s[k]), s_floor=self.s_floor)


def simulate_levy_path(rng: RngStream, b0: float, s0: float, grid: TimeGrid) -> LevyPath:
    """Exact-in-law skeleton of (B, S) on `grid` from (b0, s0), s0 >= b0.

    Per step, the endpoint is a Gaussian increment and S advances by the
    sampled maximum of the connecting bridge, so every grid point has the
    exact joint law of (B_t, max(s0, sup B)).
    """
    if s0 < b0:
        raise InvalidStateError(f"floor s0={s0} below b0={b0}")
    n = grid.n_steps
    gen = rng.generator
    db = gen.standard_normal(n) * math.sqrt(grid.dt)
    u = gen.random(n)
    b = np.empty(n + 1)
    s = np.empty(n + 1)
    b[0], s[0] = b0, s0
    b[1:] = b0 + np.cumsum(db)
    m = bridge_maximum_from_uniform(b[:-1], b[1:], grid.dt, u)
    s[1:] = np.maximum.accumulate(np.maximum(s0, m))
    return LevyPath(t=grid.times(), b=b, s=s, s_floor=float(s0))


def sample_levy_endpoints(
    rng: RngStream, b0: float, s0: float, t: float, n: int, n_steps: int = 32
):
    """n independent exact-in-law samples of (B_t, S_t) from (b0, s0).

    Vectorized across replicates; the per-step construction matches
    `simulate_levy_path`.  Returns (b, s) arrays of length n.
    """
    if s0 < b0:
        raise InvalidStateError(f"floor s0={s0} below b0={b0}")
    if t <= 0.0 or n_steps < 1:
        raise InvalidParameterError("need t > 0 and n_steps >= 1")
    gen = rng.generator
    h = t / n_steps
    b = np.full(n, float(b0))
    s = np.full(n, float(s0))
    sh = math.sqrt(h)
    for _ in range(n_steps):
        nb = b + gen.standard_normal(n) * sh
        m = bridge_maximum_from_uniform(b, nb, h, gen.random(n))
        np.maximum(s, m, out=s)
        b = nb
    return b, s


def write_path_csv(path: LevyPath, fobj) -> None:
    """Dump a path as CSV rows (t, b, s), floats at 17 significant digits."""
    fobj.write("t,b,s\n")
    for k in range(len(path)):
        fobj.write(f"{path.t[k]:.17g},{path.b[k]:.17g},{path.s[k]:.17g}\n")
