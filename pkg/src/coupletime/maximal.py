"""Joint law of (B_t, S_t) and the maximal-coupling envelope.

The reflection principle gives the time-t joint density of a Brownian
motion and its running supremum in closed form.  With a supremum floor
(the path starts below an inherited record) the law splits into a
continuous part above the floor and a line mass on it.  The total mass of
the pointwise minimum of two such laws is the success probability of the
maximal coupling at that horizon; integrating its complement against an
exponential weight gives the maximal-coupling time transform.  Comparing
both against the two-stage construction in `reflection` shows that
construction is strictly slower than maximal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.integrate import quad, simpson, trapezoid
from scipy.optimize import brentq

from .errors import (
    InvalidParameterError,
    InvalidStateError,
    MonotonicityViolationError,
    QuadratureFailureError,
)
from .reflection import CouplingConfig

__all__ = [
    "ShiftedJointLaw",
    "joint_density",
    "line_mass_density",
    "continuous_mass",
    "joint_cdf",
    "OverlapResult",
    "overlap_integral",
    "MaximalMgf",
    "maximal_mgf",
]

SQRT_2_PI = math.sqrt(2.0 / math.pi)

# number of standard deviations after which density tails are dropped in
# truncated integrals; the discarded mass is below exp(-36)
TAIL_SDS = 8.5


@dataclass(frozen=True)
class ShiftedJointLaw:
    """Law of (B_t, S_t) started at b0 with supremum floor s0 >= b0."""

    b0: float
    s0: float
    t: float

    def __post_init__(self) -> None:
        if not (
            math.isfinite(self.b0) and math.isfinite(self.s0) and math.isfinite(self.t)
        ):
            raise InvalidStateError("law parameters must be finite")
        if self.s0 < self.b0:
            raise InvalidStateError(f"floor s0={self.s0} below b0={self.b0}")
        if self.t <= 0.0:
            raise InvalidParameterError(f"horizon must be positive, got {self.t}")


def joint_density(b: float, s: float, law: ShiftedJointLaw) -> float:
    """Continuous part of the joint density at (b, s).

    For s above the floor and b <= s this is the centered reflection
    density sqrt(2/pi t) (2s'-b')/t exp(-(2s'-b')^2 / 2t) evaluated at the
    shifted coordinates (b - b0, s - b0); elsewhere 0.  The atom of S_t on
    the floor itself is carried by line_mass_density.
    """
    if s < law.s0 or b > s:
        return 0.0
    t = law.t
    w = 2.0 * (s - law.b0) - (b - law.b0)
    return SQRT_2_PI / math.sqrt(t) * (w / t) * math.exp(-w * w / (2.0 * t))


def line_mass_density(b: float, law: ShiftedJointLaw) -> float:
    """Sub-density of {B_t in db, S_t still on the floor s0}.

    The killed (barrier at s0) transition density
    (phi((b-b0)/rt) - phi((2 s0 - b0 - b)/rt)) / rt with rt = sqrt(t),
    supported on b <= s0.  Identically 0 when the floor starts at the
    driver (s0 = b0): the barrier is hit immediately.
    """
    if b > law.s0 or law.s0 == law.b0:
        return 0.0
    rt = math.sqrt(law.t)
    z1 = (b - law.b0) / rt
    z2 = (2.0 * law.s0 - law.b0 - b) / rt
    phi = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return max(0.0, (phi(z1) - phi(z2)) / rt)


def continuous_mass(law: ShiftedJointLaw) -> float:
    """Total mass above the floor: P(sup B exceeds s0 by t) = 2 Phibar((s0-b0)/sqrt t)."""
    z = (law.s0 - law.b0) / math.sqrt(law.t)
    return math.erfc(z / math.sqrt(2.0))


def joint_cdf(b: float, s: float, law: ShiftedJointLaw) -> float:
    """P(B_t <= b, S_t <= s); 0 for s below the floor.

    Reflection principle: for s' = s - b0 >= 0 and b' = min(b, s) - b0,
    P = Phi(b'/rt) - Phi((b' - 2s')/rt).
    """
    if s < law.s0:
        return 0.0
    rt = math.sqrt(law.t)
    sp = s - law.b0
    bp = min(b, s) - law.b0
    Phi = lambda z: 0.5 * math.erfc(-z / math.sqrt(2.0))
    return max(0.0, Phi(bp / rt) - Phi((bp - 2.0 * sp) / rt))


@dataclass(frozen=True)
class OverlapResult:
    """Mass of the minimum of two joint laws at one horizon."""

    t: float
    coupling_prob: float
    tv: float
    quadrature_error: float


def _min_integral_1d(f1, f2, lo: float, hi: float, probe: int = 64):
    """Integral of min(f1, f2) over [lo, hi] with kink-aware subdivision.

    The minimum of two smooth densities is smooth except where they cross;
    crossings are located by sign scanning plus root refinement and passed
    to the quadrature as subdivision points.  Returns (value, error).
    """
    if hi <= lo:
        return 0.0, 0.0
    grid = np.linspace(lo, hi, probe)
    diff = np.array([f1(x) - f2(x) for x in grid])
    kinks = []
    for i in range(probe - 1):
        a, bv = diff[i], diff[i + 1]
        if a == 0.0:
            kinks.append(grid[i])
        elif a * bv < 0.0:
            kinks.append(brentq(lambda x: f1(x) - f2(x), grid[i], grid[i + 1]))
    g = lambda x: min(f1(x), f2(x))
    val, err = quad(
        g, lo, hi, points=kinks or None, limit=200, epsabs=1e-10, epsrel=1e-9
    )
    return val, err


def overlap_integral(cfg: CouplingConfig, t: float) -> OverlapResult:
    """Success probability of the maximal coupling at horizon t.

    Integrates min of the two continuous joint densities over the common
    support s > max(s0, st0); when the floors coincide the line masses
    share their support too and the 1-D minimum of the killed densities is
    added.  The outer s-integral is mapped to (0, 1) by u = 1/(1 + s - s_min);
    inner b-integrals are truncated where both densities drop below the
    exp(-36) tail level.  Absolute error target 1e-6.
    """
    if t <= 0.0:
        raise InvalidParameterError(f"horizon must be positive, got {t}")
    law1 = ShiftedJointLaw(cfg.b0, cfg.s0, t)
    law2 = ShiftedJointLaw(cfg.bt0, cfg.st0, t)
    smin = max(law1.s0, law2.s0)
    rt = math.sqrt(t)
    b_hi_shift = max(law1.b0, law2.b0)
    inner_errs = [0.0]

    def inner(s: float) -> float:
        lo = 2.0 * s - b_hi_shift - TAIL_SDS * rt
        if lo >= s:
            return 0.0
        val, err = _min_integral_1d(
            lambda b: joint_density(b, s, law1),
            lambda b: joint_density(b, s, law2),
            lo,
            s,
            probe=48,
        )
        inner_errs[0] = max(inner_errs[0], err)
        return val

    def outer_u(u: float) -> float:
        s = smin + (1.0 - u) / u
        return inner(s) / (u * u)

    val, err = quad(outer_u, 0.0, 1.0, limit=200, epsabs=2e-8, epsrel=1e-8)
    total_err = err + inner_errs[0] + 1e-12

    if law1.s0 == law2.s0 and law1.s0 > min(law1.b0, law2.b0):
        lo = min(law1.b0, law2.b0) - TAIL_SDS * rt
        lval, lerr = _min_integral_1d(
            lambda b: line_mass_density(b, law1),
            lambda b: line_mass_density(b, law2),
            lo,
            smin,
        )
        val += lval
        total_err += lerr

    if not math.isfinite(val) or total_err > 1e-6:
        raise QuadratureFailureError(
            f"overlap quadrature at t={t}: value={val}, error={total_err}"
        )
    val = min(1.0, max(0.0, val))
    return OverlapResult(
        t=t, coupling_prob=val, tv=1.0 - val, quadrature_error=total_err
    )


class MaximalMgf(NamedTuple):
    value: float
    error: float


# geometric spacing of the overlap evaluation grid for the time transform
MGF_GRID_RATIO = 1.18
MGF_GRID_T0 = 1e-3
MGF_OVERLAP_SATURATION = 1.0 - 1e-6
MGF_WEIGHT_CUTOFF = 1e-12


def maximal_mgf(cfg: CouplingConfig, alpha: float) -> MaximalMgf:
    """alpha * integral of exp(-alpha t) * coupling_prob(t) dt, with error.

    The overlap is evaluated on a geometric t-grid from 1e-3 until it
    saturates at 1 - 1e-6 or the exponential weight drops below 1e-12,
    integrated by Simpson's rule on the nonuniform grid, plus an analytic
    tail (overlap taken as its last value below, 1 above) and a bracketed
    head correction for (0, 1e-3).  The overlap sequence is required to be
    nondecreasing within quadrature error; a decrease beyond it invalidates
    the interpretation as a coupling-time CDF and raises.
    """
    if alpha <= 0.0:
        raise InvalidParameterError(f"alpha must be positive, got {alpha}")
    ts = [MGF_GRID_T0]
    overlaps = []
    qerrs = []
    while True:
        t = ts[len(overlaps)]
        res = overlap_integral(cfg, t)
        overlaps.append(res.coupling_prob)
        qerrs.append(res.quadrature_error)
        if res.coupling_prob >= MGF_OVERLAP_SATURATION:
            break
        if math.exp(-alpha * t) < MGF_WEIGHT_CUTOFF:
            break
        ts.append(t * MGF_GRID_RATIO)

    ts = np.array(ts[: len(overlaps)])
    ov = np.array(overlaps)
    qe = np.array(qerrs)

    drops = np.diff(ov)
    allowed = qe[:-1] + qe[1:] + 1e-9
    if np.any(drops < -allowed):
        k = int(np.argmin(drops + allowed))
        raise MonotonicityViolationError(
            f"overlap decreases at t={ts[k + 1]:.6g} by {-drops[k]:.3g}, "
            f"beyond quadrature error {allowed[k]:.3g}"
        )

    weights = alpha * np.exp(-alpha * ts)
    if len(ts) > 1:
        body = float(simpson(weights * ov, x=ts))
        trap = float(trapezoid(weights * ov, x=ts))
        grid_err = abs(body - trap)
    else:
        body, grid_err = 0.0, 0.0

    # analytic tail past the last grid point: overlap is sandwiched between
    # its last value and 1
    t_end = float(ts[-1])
    tail_lo = math.exp(-alpha * t_end) * float(ov[-1])
    tail_hi = math.exp(-alpha * t_end)
    tail = 0.5 * (tail_lo + tail_hi)
    tail_err = 0.5 * (tail_hi - tail_lo)

    # head (0, t0): overlap between 0 and its first value
    head_hi = (1.0 - math.exp(-alpha * MGF_GRID_T0)) * float(ov[0])
    head = 0.5 * head_hi
    head_err = 0.5 * head_hi

    value = body + tail + head
    error = grid_err + tail_err + head_err + float(np.max(qe))
    return MaximalMgf(min(1.0, max(0.0, value)), error)
