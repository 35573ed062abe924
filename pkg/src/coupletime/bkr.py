"""Planar diamond diffusion driven by one Brownian motion, and its couplings.

The pair (X, Y) solves dX = sgn(Y) dA, dY = -sgn(X) dA for a single driving
Brownian motion A, with sgn(0) = +1 throughout the package.  Pathwise
sgn(X) dX + sgn(Y) dY = 0, so |X| + |Y| never decreases: it grows by
local-time pushes whenever a coordinate crosses its axis, and the state
lives on an expanding diamond.  The switch process K records which
coordinate currently carries a usable sign for reconstructing the driver,

    dA = K sgn(Y) dX - (1 - K) sgn(X) dY,

and flips on entry to the bands {|X| < h} and {|Y| < h}, where h is half
the initial diamond radius.  With the default labels the coordinate whose
sign the active reconstruction form uses stays bounded away from zero for
the whole constant-K phase.

Couplings of two copies reuse the one-dimensional machinery: a second copy
driven by dA~ = sgn(Y~) J sgn(Y) dA mirrors X until it hits the midpoint of
the two X starts, then runs identically, and the copies merge at the first
joint zero of Y and Y~.  The delayed variant reads the sign factors at a
lagged clock, and the staged construction couples the leftover coordinate
pair (Y, |X| + |Y|), which moves like a Brownian motion with its local time
while sgn(X) holds constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import erfcx

from .delayed import (
    StageLedger,
    StageRecord,
    _check_eps,
    _delayed_engine,
    adaptive_delay_grid,
)
from .errors import (
    IncompletePathError,
    InvalidGridError,
    InvalidParameterError,
    NonTerminationError,
    UnsupportedStartError,
)
from .parallel import run_chunked
from .reflection import _step_schedule
from .streams import RngStream

__all__ = [
    "BkrState",
    "BkrPath",
    "BkrCouplingRun",
    "BkrDelayedRun",
    "BkrInvariantReport",
    "VariantCouplingStats",
    "DelayedGapSample",
    "initial_bkr_state",
    "expected_bridge_local_time",
    "simulate_bkr",
    "bkr_invariant_report",
    "variant_coupling",
    "sample_variant_couplings",
    "reconstruct_tilde_x",
    "delayed_variant_coupling",
    "sample_delayed_variant_gaps",
    "concatenated_bkr_coupling",
    "concatenated_bkr_batch",
]

# multiple of sqrt(dt) within which |Y| and |Y~| count as jointly at zero
ZERO_TOL_MULT = 3.0

_SQRT_HALF_PI = math.sqrt(0.5 * math.pi)


def _sgn(v):
    return np.where(np.asarray(v) >= 0.0, 1.0, -1.0)


@dataclass(frozen=True)
class BkrState:
    """Instantaneous state: coordinates, switch value, driver value, and the
    half diamond radius fixed by the start."""

    x: float
    y: float
    k: int
    a: float
    h: float


def initial_bkr_state(x0: float, y0: float, flip_switch_labels: bool = False) -> BkrState:
    """State at time zero.  The origin is excluded: both coordinates vanish
    there and neither sign is usable, so no start from it is supported."""
    x0, y0 = float(x0), float(y0)
    if not (math.isfinite(x0) and math.isfinite(y0)):
        raise InvalidParameterError("start coordinates must be finite")
    if x0 == 0.0 and y0 == 0.0:
        raise UnsupportedStartError("the diffusion is not defined from the origin")
    h = 0.5 * (abs(x0) + abs(y0))
    k0 = 1 if abs(x0) <= h else 0
    if flip_switch_labels:
        k0 = 1 - k0
    return BkrState(x=x0, y=y0, k=k0, a=0.0, h=h)


def expected_bridge_local_time(x0, x1, h):
    """Mean local time at 0 accrued by a Brownian bridge between the given
    endpoints over duration h.

    Integrating the exact conditional tail exp(((x1-x0)^2 - (|x0|+|x1|+l)^2)
    / (2h)) gives sqrt(pi h / 2) * erfcx((|x0|+|x1|)/sqrt(2h)) times a
    same-sign damping factor exp(-2 max(x0 x1, 0)/h).  Vectorized.
    """
    if not (np.ndim(h) == 0 and h > 0.0):
        raise InvalidParameterError(f"step length must be a positive scalar, got {h}")
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    c = (np.abs(x0) + np.abs(x1)) / math.sqrt(2.0 * h)
    damp = np.exp(-2.0 * np.maximum(x0 * x1, 0.0) / h)
    out = _SQRT_HALF_PI * math.sqrt(h) * erfcx(c) * damp
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class BkrPath:
    """One simulated trajectory on a uniform grid.

    k is the switch path (int8), a the driver path.  ell is the diamond
    radius process |x| + |y| of the recorded points; ell_ledger accrues the
    expected within-step bridge local time of both coordinates instead and
    is the crossing-corrected estimate of the same quantity.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    k: np.ndarray
    a: np.ndarray
    h: float
    flip_switch_labels: bool = False

    @property
    def ell(self) -> np.ndarray:
        return np.abs(self.x) + np.abs(self.y)

    @property
    def ell_ledger(self) -> np.ndarray:
        dt = float(self.t[1] - self.t[0]) if len(self.t) > 1 else 1.0
        acc = expected_bridge_local_time(self.x[:-1], self.x[1:], dt)
        acc = acc + expected_bridge_local_time(self.y[:-1], self.y[1:], dt)
        out = np.empty_like(self.t)
        out[0] = abs(float(self.x[0])) + abs(float(self.y[0]))
        np.cumsum(acc, out=out[1:])
        out[1:] += out[0]
        return out

    def state(self, i: int = -1) -> BkrState:
        return BkrState(
            x=float(self.x[i]), y=float(self.y[i]), k=int(self.k[i]),
            a=float(self.a[i]), h=self.h,
        )


def _switch_labels(flip: bool) -> tuple[int, int]:
    """(label on entry to {|X|<h}, label on entry to {|Y|<h})."""
    return (0, 1) if flip else (1, 0)


def _entry_event(pos, npos, h_band, step, u):
    """Did the coordinate's within-step bridge visit the band (-h, h)?

    Inside endpoints make the visit certain; otherwise it is a crossing of
    the near boundary sgn(pos) * h_band, decided by the uniform u against
    the exact bridge crossing probability.  Returns (event, probability).
    """
    inside = (np.abs(pos) < h_band) | (np.abs(npos) < h_band)
    c = np.where(pos >= 0.0, h_band, -h_band)
    p = np.exp(-2.0 * np.maximum((pos - c) * (npos - c), 0.0) / step)
    p = np.where(inside, 1.0, p)
    return u < p, p


def _resolve_switch(kk, evx, evy, in_x, in_y, px, py, lab_x, lab_y):
    """New switch values after this step's entry events.

    When both bands were visited in one step the endpoint decides (at most
    one band can contain it, since |x| + |y| never drops below 2h); if the
    path left both again, the larger crossing probability breaks the tie.
    """
    nk = kk.copy()
    only_x = evx & ~evy
    only_y = evy & ~evx
    nk[only_x] = lab_x
    nk[only_y] = lab_y
    both = evx & evy
    if both.any():
        use_y = in_y[both] | (~in_x[both] & (py[both] >= px[both]))
        nk[both] = np.where(use_y, lab_y, lab_x)
    return nk


def _resolve_switch_scalar(kk, evx, evy, in_x, in_y, px, py, lab_x, lab_y):
    if evx and evy:
        use_y = in_y or (not in_x and py >= px)
        return lab_y if use_y else lab_x
    if evx:
        return lab_x
    if evy:
        return lab_y
    return kk


def simulate_bkr(
    rng: RngStream,
    x0: float,
    y0: float,
    dt: float,
    horizon: float,
    flip_switch_labels: bool = False,
) -> BkrPath:
    """Simulate one trajectory with frozen start-of-step signs.

    Per step both coordinates move by the same driver increment through
    their partner's start-of-step sign, which keeps sgn(X) dX + sgn(Y) dY
    exactly zero and makes |X| + |Y| nondecreasing step by step; crossings
    of either axis reflect the overshoot and grow the radius.  Band entries
    for the switch K are detected with exact bridge crossing draws, so
    within-step visits that retreat before the endpoint still register.
    """
    state0 = initial_bkr_state(x0, y0, flip_switch_labels)
    if dt <= 0.0 or not math.isfinite(dt):
        raise InvalidParameterError(f"dt must be positive and finite, got {dt}")
    n_steps = int(round(horizon / dt))
    if n_steps < 1:
        raise InvalidParameterError("horizon must cover at least one step")
    lab_x, lab_y = _switch_labels(flip_switch_labels)
    h_band = state0.h
    sdt = math.sqrt(dt)
    gen = rng.generator

    z = gen.standard_normal(n_steps)
    us = gen.random((2, n_steps))

    xs = np.empty(n_steps + 1)
    ys = np.empty(n_steps + 1)
    ks = np.empty(n_steps + 1, dtype=np.int8)
    As = np.empty(n_steps + 1)
    xs[0], ys[0], ks[0], As[0] = state0.x, state0.y, state0.k, 0.0

    x, y, kk, a = state0.x, state0.y, state0.k, 0.0
    for i in range(n_steps):
        da = z[i] * sdt
        sx = 1.0 if x >= 0.0 else -1.0
        sy = 1.0 if y >= 0.0 else -1.0
        nx = x + sy * da
        ny = y - sx * da
        evx, px = _entry_event(x, nx, h_band, dt, us[0, i])
        evy, py = _entry_event(y, ny, h_band, dt, us[1, i])
        kk = _resolve_switch_scalar(
            kk, bool(evx), bool(evy),
            abs(nx) < h_band, abs(ny) < h_band, float(px), float(py),
            lab_x, lab_y,
        )
        x, y, a = nx, ny, a + da
        xs[i + 1], ys[i + 1], ks[i + 1], As[i + 1] = x, y, kk, a

    return BkrPath(
        t=dt * np.arange(n_steps + 1),
        x=xs, y=ys, k=ks, a=As, h=h_band,
        flip_switch_labels=flip_switch_labels,
    )


class BkrInvariantReport(NamedTuple):
    """Per-replicate invariant statistics from a batch of trajectories."""

    identity_err: np.ndarray
    min_ell_step: np.ndarray
    min_ell: np.ndarray
    switch_violations: np.ndarray
    h: float
    dt: float


def bkr_invariant_report(
    rng: RngStream,
    x0: float,
    y0: float,
    dt: float,
    horizon: float,
    n: int,
    workers: int = 1,
    flip_switch_labels: bool = False,
) -> BkrInvariantReport:
    """Run n independent trajectories and report invariant diagnostics.

    identity_err is the largest |sgn(x) dx + sgn(y) dy| over the scheme's
    constructed increments (exactly zero when the step is built right),
    min_ell_step the smallest one-step change of |x| + |y|, min_ell the
    path minimum of the radius, and switch_violations counts steps where
    the reconstruction-protected coordinate (Y while K = 1, X while K = 0)
    changed sign with no switch event in the same step.
    """
    state0 = initial_bkr_state(x0, y0, flip_switch_labels)
    if dt <= 0.0 or not math.isfinite(dt):
        raise InvalidParameterError(f"dt must be positive and finite, got {dt}")
    n_steps = int(round(horizon / dt))
    if n_steps < 1:
        raise InvalidParameterError("horizon must cover at least one step")
    lab_x, lab_y = _switch_labels(flip_switch_labels)
    h_band = state0.h
    sdt = math.sqrt(dt)

    def chunk(stream: RngStream, count: int):
        gen = stream.generator
        x = np.full(count, state0.x)
        y = np.full(count, state0.y)
        kk = np.full(count, state0.k, dtype=np.int8)
        ident = np.zeros(count)
        min_inc = np.full(count, np.inf)
        min_ell = np.abs(x) + np.abs(y)
        viol = np.zeros(count, dtype=np.int64)
        for _ in range(n_steps):
            da = gen.standard_normal(count) * sdt
            u = gen.random((2, count))
            sx = _sgn(x)
            sy = _sgn(y)
            dxi = sy * da
            dyi = -(sx * da)
            nx = x + dxi
            ny = y + dyi
            # the constructed increments cancel exactly; products with the
            # +-1 sign arrays are exact in floating point
            ident = np.maximum(ident, np.abs(sx * dxi + sy * dyi))
            ell = np.abs(x) + np.abs(y)
            nell = np.abs(nx) + np.abs(ny)
            min_inc = np.minimum(min_inc, nell - ell)
            min_ell = np.minimum(min_ell, nell)
            evx, px = _entry_event(x, nx, h_band, dt, u[0])
            evy, py = _entry_event(y, ny, h_band, dt, u[1])
            nk = _resolve_switch(
                kk, evx, evy,
                np.abs(nx) < h_band, np.abs(ny) < h_band,
                px, py, lab_x, lab_y,
            )
            same = nk == kk
            flipped = np.where(nk == 1, _sgn(ny) != sy, _sgn(nx) != sx)
            viol += (same & flipped).astype(np.int64)
            x, y, kk = nx, ny, nk
        return ident, min_inc, min_ell, viol

    parts = run_chunked(chunk, rng, n, workers)
    return BkrInvariantReport(
        identity_err=np.concatenate([p[0] for p in parts]),
        min_ell_step=np.concatenate([p[1] for p in parts]),
        min_ell=np.concatenate([p[2] for p in parts]),
        switch_violations=np.concatenate([p[3] for p in parts]),
        h=h_band,
        dt=dt,
    )


# ---------------------------------------------------------------------------
# mirror coupling of two copies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BkrCouplingRun:
    """Mirror coupling of two copies on one driving noise.

    The second copy's driver is dA~ = sgn(Y~) J sgn(Y) dA with J = -1 until
    X first hits the midpoint of the X starts (bridge-detected; the firing
    step is resized so both X coordinates land exactly on the midpoint) and
    J = +1 afterwards, which makes X~ the exact reflection of X and then its
    exact copy.  The run ends at the first joint zero of Y and Y~ within
    ZERO_TOL_MULT * sqrt(dt), where the full states merge, or at step_cap.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    k: np.ndarray
    xt: np.ndarray
    yt: np.ndarray
    kt: np.ndarray
    j: np.ndarray
    a: np.ndarray
    h: float
    ht: float
    t1: float | None
    t2: float | None
    outcome: str

    @property
    def coupled(self) -> bool:
        return self.outcome == "coupled"


def variant_coupling(
    rng: RngStream,
    start: tuple[float, float],
    starth: tuple[float, float],
    dt: float,
    step_cap: int = 2_000_000,
    flip_switch_labels: bool = False,
) -> BkrCouplingRun:
    """One recorded mirror-coupling run; see BkrCouplingRun.

    Before the midpoint hit X~ is maintained by the exact mirror identity
    x~ = (x0 + x~0) - x rather than by accumulating increments, so the
    reflection holds to rounding; on the hit step the driver increment is
    resized to land X exactly on the midpoint, after which x~ is assigned
    x and the copies' X coordinates agree bitwise.
    """
    s0 = initial_bkr_state(start[0], start[1], flip_switch_labels)
    st0 = initial_bkr_state(starth[0], starth[1], flip_switch_labels)
    if dt <= 0.0 or not math.isfinite(dt):
        raise InvalidParameterError(f"dt must be positive and finite, got {dt}")
    if step_cap < 1:
        raise InvalidParameterError("step_cap must be at least 1")
    lab_x, lab_y = _switch_labels(flip_switch_labels)
    mid = 0.5 * (s0.x + st0.x)
    mirror_base = s0.x + st0.x
    sdt = math.sqrt(dt)
    tol = ZERO_TOL_MULT * sdt
    gen = rng.generator

    ts = [0.0]
    xs, ys, ks = [s0.x], [s0.y], [s0.k]
    xts, yts, kts = [st0.x], [st0.y], [st0.k]
    js, As = [-1], [0.0]

    x, y, kk = s0.x, s0.y, s0.k
    xt, yt, kt = st0.x, st0.y, st0.k
    a = 0.0
    hit1 = False
    t1 = t2 = None
    outcome = "truncated"

    for i in range(1, step_cap + 1):
        da = float(gen.standard_normal()) * sdt
        u_hit, u_ex, u_ey = gen.random(3)
        sx = 1.0 if x >= 0.0 else -1.0
        sy = 1.0 if y >= 0.0 else -1.0
        sxt = 1.0 if xt >= 0.0 else -1.0
        syt = 1.0 if yt >= 0.0 else -1.0
        jj = 1.0 if hit1 else -1.0

        fire1 = False
        if not hit1:
            nx_prov = x + sy * da
            q = (x - mid) * (nx_prov - mid)
            p1 = 1.0 if q <= 0.0 else math.exp(-2.0 * q / dt)
            fire1 = u_hit < p1
            if fire1:
                # land the hit exactly: resize this step's driver increment
                da = sy * (mid - x)
        nx = x + sy * da
        if fire1:
            # snap the rounding residual so the hit is exact in the record
            nx = mid
        ny = y - sx * da
        dat = syt * jj * sy * da
        nyt = yt - sxt * dat
        if hit1:
            nxt = nx
        elif fire1:
            nxt = nx
        else:
            nxt = mirror_base - nx
        if fire1:
            hit1 = True
            t1 = i * dt

        # both copies share the entry uniforms; once the states merge they
        # see identical probabilities and their switches stay in lockstep
        evx, px = _entry_event(x, nx, s0.h, dt, u_ex)
        evy, py = _entry_event(y, ny, s0.h, dt, u_ey)
        kk = _resolve_switch_scalar(
            kk, bool(evx), bool(evy),
            abs(nx) < s0.h, abs(ny) < s0.h, float(px), float(py),
            lab_x, lab_y,
        )
        evxt, pxt = _entry_event(xt, nxt, st0.h, dt, u_ex)
        evyt, pyt = _entry_event(yt, nyt, st0.h, dt, u_ey)
        kt = _resolve_switch_scalar(
            kt, bool(evxt), bool(evyt),
            abs(nxt) < st0.h, abs(nyt) < st0.h, float(pxt), float(pyt),
            lab_x, lab_y,
        )

        fire2 = False
        if hit1:
            near = abs(ny) <= tol and abs(nyt) <= tol
            flips = (ny * y < 0.0) and (nyt * yt < 0.0)
            fire2 = (near or flips) and abs(abs(ny) - abs(nyt)) <= tol
        if fire2:
            nyt = ny
            kt = kk

        x, y, xt, yt, a = nx, ny, nxt, nyt, a + da
        ts.append(i * dt)
        xs.append(x); ys.append(y); ks.append(kk)
        xts.append(xt); yts.append(yt); kts.append(kt)
        js.append(1 if hit1 else -1)
        As.append(a)

        if fire2:
            t2 = i * dt
            outcome = "coupled"
            break

    return BkrCouplingRun(
        t=np.asarray(ts), x=np.asarray(xs), y=np.asarray(ys),
        k=np.asarray(ks, dtype=np.int8),
        xt=np.asarray(xts), yt=np.asarray(yts),
        kt=np.asarray(kts, dtype=np.int8),
        j=np.asarray(js, dtype=np.int8), a=np.asarray(As),
        h=s0.h, ht=st0.h, t1=t1, t2=t2, outcome=outcome,
    )


def reconstruct_tilde_x(x_path: np.ndarray, x0: float, xt0: float) -> np.ndarray:
    """Rebuild the mirrored copy's X from the base X path and the two starts.

    Up to the first visit of the midpoint the copy is the reflection
    x~0 - (x - x0); after it the copy reuses the base increments.  Raises
    IncompletePathError when the path never reaches the midpoint.
    """
    x_path = np.asarray(x_path, dtype=float)
    if x_path.ndim != 1 or x_path.size < 1:
        raise InvalidParameterError("x_path must be a nonempty 1-d array")
    mid = 0.5 * (float(x0) + float(xt0))
    d = x_path - mid
    hit = d == 0.0
    hit[1:] |= d[:-1] * d[1:] < 0.0
    idx = np.nonzero(hit)[0]
    if idx.size == 0:
        raise IncompletePathError("the base path never reaches the X midpoint")
    k1 = int(idx[0])
    out = np.empty_like(x_path)
    out[: k1 + 1] = float(xt0) - (x_path[: k1 + 1] - float(x0))
    out[k1 + 1 :] = out[k1] + (x_path[k1 + 1 :] - x_path[k1])
    return out


class VariantCouplingStats(NamedTuple):
    """Batched mirror-coupling outcomes and invariant flags."""

    t1: np.ndarray
    t2: np.ndarray
    coupled: np.ndarray
    dom_ok: np.ndarray
    post_t1_err: np.ndarray


def sample_variant_couplings(
    rng: RngStream,
    start: tuple[float, float],
    starth: tuple[float, float],
    dt: float,
    n: int,
    horizon: float = 400.0,
    growth: float = 1.0,
    workers: int = 1,
) -> VariantCouplingStats:
    """n independent mirror couplings, tracking times and path invariants.

    The joint zero time has a Brownian-passage tail, so growth > 1 switches
    to a geometric step schedule starting at dt, which makes very long
    horizons reachable; each step stays exact in law at its own size, the
    per-step zero resolution is 3 sqrt(step), and a firing step must also
    have ||y| - |y~|| within the same resolution so the exact merge moves
    the lagging copy by less than one step's noise.

    dom_ok checks the ordering of |Y| and |Y~| after the midpoint hit in
    its sharp discrete form.  Once X and X~ agree, both |Y| and |Y~|
    receive the same signed decrement every step, so the gap |Y| - |Y~|
    can only shrink in magnitude (folding at zero erodes whichever side
    is closer), and its sign can only flip on a step whose increment
    exceeds half the gap.  Both facts hold on any step schedule and are
    checked up to accumulated rounding.  post_t1_err is the largest
    |X - X~| seen after the hit and must be exactly zero.
    """
    s0 = initial_bkr_state(start[0], start[1])
    st0 = initial_bkr_state(starth[0], starth[1])
    if dt <= 0.0 or not math.isfinite(dt):
        raise InvalidParameterError(f"dt must be positive and finite, got {dt}")
    hs = _step_schedule(dt, horizon, growth)
    if hs.size < 1:
        raise InvalidParameterError("horizon must cover at least one step")
    ts_right = np.cumsum(hs)
    shs = np.sqrt(hs)
    mid = 0.5 * (s0.x + st0.x)
    mirror_base = s0.x + st0.x

    def chunk(stream: RngStream, count: int):
        gen = stream.generator
        x = np.full(count, s0.x)
        y = np.full(count, s0.y)
        xt = np.full(count, st0.x)
        yt = np.full(count, st0.y)
        hit = np.zeros(count, dtype=bool)
        gap = np.zeros(count)
        dom_bad = np.zeros(count, dtype=bool)
        p1_err = np.zeros(count)
        out_t1 = np.full(count, np.inf)
        out_t2 = np.full(count, np.inf)
        out_dom = np.zeros(count, dtype=bool)
        out_err = np.zeros(count)
        idx = np.arange(count)
        for i in range(hs.size):
            if idx.size == 0:
                break
            size = idx.size
            h = hs[i]
            da = gen.standard_normal(size) * shs[i]
            u_hit = gen.random(size)
            sx = _sgn(x)
            sy = _sgn(y)
            sxt = _sgn(xt)
            syt = _sgn(yt)
            jj = np.where(hit, 1.0, -1.0)

            pend = ~hit
            nx_prov = x + sy * da
            q = np.maximum((x - mid) * (nx_prov - mid), 0.0)
            fire1 = pend & (u_hit < np.exp(-2.0 * q / h))
            da = np.where(fire1, sy * (mid - x), da)
            nx = x + sy * da
            ny = y - sx * da
            dat = syt * jj * sy * da
            nyt = yt - sxt * dat
            nxt = np.where(hit | fire1, nx, mirror_base - nx)
            out_t1[idx[fire1]] = ts_right[i]
            hit = hit | fire1

            p1_err = np.where(hit, np.maximum(p1_err, np.abs(nx - nxt)), p1_err)
            d = np.abs(ny) - np.abs(nyt)
            gap_new = np.abs(d)
            old = hit & ~fire1
            slack = 1e-12 * (np.abs(ny) + np.abs(nyt) + 1.0)
            dom_bad |= old & (gap_new > gap + slack)
            d_prev = np.abs(y) - np.abs(yt)
            flip = old & (d * d_prev < 0.0)
            dom_bad |= flip & (np.abs(d_prev) > 2.0 * np.abs(da) + slack)
            gap = np.where(hit, gap_new, gap)

            tol_h = ZERO_TOL_MULT * shs[i]
            near = (np.abs(ny) <= tol_h) & (np.abs(nyt) <= tol_h)
            flips = (ny * y < 0.0) & (nyt * yt < 0.0)
            fire2 = hit & (near | flips) & (gap_new <= tol_h)
            x, y, xt, yt = nx, ny, nxt, nyt
            if fire2.any():
                done = idx[fire2]
                out_t2[done] = ts_right[i]
                out_dom[done] = dom_bad[fire2]
                out_err[done] = p1_err[fire2]
                keep = ~fire2
                idx = idx[keep]
                x, y, xt, yt = x[keep], y[keep], xt[keep], yt[keep]
                hit, gap = hit[keep], gap[keep]
                dom_bad, p1_err = dom_bad[keep], p1_err[keep]
        if idx.size:
            out_dom[idx] = dom_bad
            out_err[idx] = p1_err
        return out_t1, out_t2, out_dom, out_err

    parts = run_chunked(chunk, rng, n, workers)
    t1 = np.concatenate([p[0] for p in parts])
    t2 = np.concatenate([p[1] for p in parts])
    dom_bad = np.concatenate([p[2] for p in parts])
    p1_err = np.concatenate([p[3] for p in parts])
    return VariantCouplingStats(
        t1=t1, t2=t2, coupled=np.isfinite(t2), dom_ok=~dom_bad, post_t1_err=p1_err
    )


# ---------------------------------------------------------------------------
# delayed variant
# ---------------------------------------------------------------------------


class _BkrEngineOut(NamedTuple):
    t1: np.ndarray
    t2: np.ndarray
    gap: np.ndarray
    x: np.ndarray
    y: np.ndarray
    xh: np.ndarray
    yh: np.ndarray
    paths: dict | None


def _bkr_delayed_engine(
    gen, ts, js, width, start, starth, record: bool = False
) -> _BkrEngineOut:
    """Batch of delayed mirror couplings of the planar diffusion.

    Three copies share one driving noise: the base (x, y), the undelayed
    reference (xt, yt) with driver sgn(yt) J sgn(y) dA, and the delayed copy
    (xh, yh) whose driver reads the sign factors at the floored lagged
    clock, sgn(yh at sigma) J sgn(y at sigma) dA.  J switches at the
    bridge-detected midpoint hit of the base X (the firing step is resized
    to land exactly); the run freezes at the first joint zero of yt and y
    within ZERO_TOL_MULT * sqrt(step) after the hit, recording the gap
    |xh - xt| + |yh - yt| there.  Unfrozen replicates report the gap at the
    horizon with t2 = inf.
    """
    x = np.full(width, float(start[0]))
    y = np.full(width, float(start[1]))
    xt = np.full(width, float(starth[0]))
    yt = np.full(width, float(starth[1]))
    xh = xt.copy()
    yh = yt.copy()
    mid = 0.5 * (float(start[0]) + float(starth[0]))
    ctrl = np.full(width, -1.0)
    n_steps = len(ts) - 1

    out_t1 = np.full(width, np.inf)
    out_t2 = np.full(width, np.inf)
    out = {
        "gap": np.abs(xh - xt) + np.abs(yh - yt),
        "x": x.copy(),
        "y": y.copy(),
        "xh": xh.copy(),
        "yh": yh.copy(),
    }
    idx = np.arange(width)

    lag = int(np.max(np.arange(1, n_steps + 1) - js)) if n_steps else 1
    rows = lag + 1
    sgy = np.empty((rows, width))
    sgyh = np.empty((rows, width))
    sgy[0] = _sgn(y)
    sgyh[0] = _sgn(yh)

    hs = np.diff(ts)
    shs = np.sqrt(hs)

    paths = None
    if record:
        if width != 1:
            raise InvalidParameterError("path recording supports a single replicate")
        paths = {name: [vec[0]] for name, vec in
                 (("x", x), ("y", y), ("xt", xt), ("yt", yt),
                  ("xh", xh), ("yh", yh))}
        paths["j"] = [-1]

    for k in range(1, n_steps + 1):
        if idx.size == 0:
            break
        size = idx.size
        h = hs[k - 1]
        sh = shs[k - 1]
        tol = ZERO_TOL_MULT * sh
        da = gen.standard_normal(size) * sh
        u_hit = gen.random(size)

        sx = _sgn(x)
        sy = _sgn(y)
        sxt = _sgn(xt)
        syt = _sgn(yt)
        sxh = _sgn(xh)
        syh = _sgn(yh)
        jrow = js[k - 1] % rows
        sy_lag = sgy[jrow]
        syh_lag = sgyh[jrow]

        minus = ctrl < 0.0
        nx_prov = x + sy * da
        q = np.maximum((x - mid) * (nx_prov - mid), 0.0)
        fire1 = minus & (u_hit < np.exp(-2.0 * q / h))
        da = np.where(fire1, sy * (mid - x), da)

        nx = x + sy * da
        ny = y - sx * da
        dat = syt * ctrl * sy * da
        nyt = yt - sxt * dat
        dah = syh_lag * ctrl * sy_lag * da
        nxh = xh + syh * dah
        nyh = yh - sxh * dah
        if fire1.any():
            out_t1[idx[fire1]] = ts[k]
            ctrl[fire1] = 1.0
        nxt = np.where(ctrl > 0.0, nx, xt - sy * da)

        plus = ctrl > 0.0
        near = (np.abs(nyt) <= tol) & (np.abs(ny) <= tol)
        flips = (nyt * yt < 0.0) & (ny * y < 0.0)
        fire2 = plus & (near | flips)

        x, y, xt, yt, xh, yh = nx, ny, nxt, nyt, nxh, nyh
        rowk = k % rows
        sgy[rowk] = _sgn(y)
        sgyh[rowk] = _sgn(yh)

        if record:
            paths["x"].append(float(x[0]))
            paths["y"].append(float(y[0]))
            paths["xt"].append(float(xt[0]))
            paths["yt"].append(float(yt[0]))
            paths["xh"].append(float(xh[0]))
            paths["yh"].append(float(yh[0]))
            paths["j"].append(int(ctrl[0]))

        if fire2.any():
            done = idx[fire2]
            out_t2[done] = ts[k]
            out["gap"][done] = (np.abs(xh - xt) + np.abs(yh - yt))[fire2]
            out["x"][done] = x[fire2]
            out["y"][done] = y[fire2]
            out["xh"][done] = xh[fire2]
            out["yh"][done] = yh[fire2]
            keep = ~fire2
            idx = idx[keep]
            x, y, xt, yt = x[keep], y[keep], xt[keep], yt[keep]
            xh, yh, ctrl = xh[keep], yh[keep], ctrl[keep]
            sgy = sgy[:, keep]
            sgyh = sgyh[:, keep]

    if idx.size:
        out["gap"][idx] = np.abs(xh - xt) + np.abs(yh - yt)
        out["x"][idx] = x
        out["y"][idx] = y
        out["xh"][idx] = xh
        out["yh"][idx] = yh

    return _BkrEngineOut(
        t1=out_t1,
        t2=out_t2,
        gap=out["gap"],
        x=out["x"],
        y=out["y"],
        xh=out["xh"],
        yh=out["yh"],
        paths=paths,
    )


@dataclass(frozen=True)
class BkrDelayedRun:
    """One delayed mirror coupling on a uniform grid.

    (x, y) is the base copy, (xt, yt) the undelayed reference, (xh, yh) the
    delayed copy, and j the control path.  gap is |xh - xt| + |yh - yt| at
    the reference coupling time t2 (or at the horizon when t2 is None).
    Switch bookkeeping is reconstruction metadata, not dynamics, and is not
    tracked here.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    xt: np.ndarray
    yt: np.ndarray
    xh: np.ndarray
    yh: np.ndarray
    j: np.ndarray
    t1: float | None
    t2: float | None
    gap: float
    eps: float

    @property
    def coupled(self) -> bool:
        return self.t2 is not None


def delayed_variant_coupling(
    rng: RngStream,
    start: tuple[float, float],
    starth: tuple[float, float],
    eps: float,
    dt: float,
    horizon: float,
) -> BkrDelayedRun:
    """One recorded delayed mirror coupling; see BkrDelayedRun.

    dt is the base step near time zero and must not exceed the kernel's
    floor eps**3 (each step may only read signs at an earlier grid point);
    larger steps are refused the same way as the one-dimensional delayed
    solver.  Past the kernel's flat region the grid shrinks its steps in
    proportion to the kernel so causality holds out to any horizon.
    """
    initial_bkr_state(start[0], start[1])
    initial_bkr_state(starth[0], starth[1])
    _check_eps(eps)
    if dt > eps**3:
        raise InvalidGridError(
            f"dt={dt} exceeds the delay floor eps**3={eps**3}; shrink dt"
        )
    ts, js = adaptive_delay_grid(eps, horizon, dt)
    res = _bkr_delayed_engine(rng.generator, ts, js, 1, start, starth, record=True)
    p = res.paths
    t1 = float(res.t1[0]) if np.isfinite(res.t1[0]) else None
    t2 = float(res.t2[0]) if np.isfinite(res.t2[0]) else None
    m = len(p["x"])
    return BkrDelayedRun(
        t=ts[:m],
        x=np.asarray(p["x"]),
        y=np.asarray(p["y"]),
        xt=np.asarray(p["xt"]),
        yt=np.asarray(p["yt"]),
        xh=np.asarray(p["xh"]),
        yh=np.asarray(p["yh"]),
        j=np.asarray(p["j"], dtype=np.int8),
        t1=t1,
        t2=t2,
        gap=float(res.gap[0]),
        eps=float(eps),
    )


class DelayedGapSample(NamedTuple):
    """Batched delayed-coupling gaps at the reference coupling time."""

    gap: np.ndarray
    t2: np.ndarray
    coupled_fraction: float


def sample_delayed_variant_gaps(
    rng: RngStream,
    start: tuple[float, float],
    starth: tuple[float, float],
    eps: float,
    horizon: float,
    dt_cap: float = 1e-3,
    n: int = 500,
    workers: int = 1,
) -> DelayedGapSample:
    """n delayed mirror couplings on a shared delay-adapted grid.

    Uses the step schedule adapted to the delay kernel (capped at dt_cap),
    which keeps long horizons reachable; gaps of replicates that never
    reach the reference coupling time are reported at the horizon.
    """
    initial_bkr_state(start[0], start[1])
    initial_bkr_state(starth[0], starth[1])
    _check_eps(eps)
    ts, js = adaptive_delay_grid(eps, horizon, dt_cap)

    def chunk(stream: RngStream, count: int):
        res = _bkr_delayed_engine(stream.generator, ts, js, count, start, starth)
        return res.gap, res.t2

    parts = run_chunked(chunk, rng, n, workers)
    gap = np.concatenate([p[0] for p in parts])
    t2 = np.concatenate([p[1] for p in parts])
    return DelayedGapSample(
        gap=gap, t2=t2, coupled_fraction=float(np.mean(np.isfinite(t2)))
    )


# ---------------------------------------------------------------------------
# staged construction on the reduced pair
# ---------------------------------------------------------------------------


@dataclass
class BkrStageLedger(StageLedger):
    """Staged-run ledger extended with the stage-0 mirror coupling times.

    t1 and t2 are the midpoint-hit and joint-zero times of the successful
    attempt's opening stage (None when that attempt never got them).
    """

    t1: float | None = None
    t2: float | None = None


def _bkr_attempt_batch(
    gen,
    width,
    start,
    starth,
    grid0,
    stage0_budget,
    eps0,
    red_grids,
    red_epsilons,
    merge_tol,
):
    """One batched pool of staged-coupling attempts.

    Stage 0 runs the delayed mirror coupling of the planar copies; an
    attempt survives it when the reference couples in budget and the two
    copies leave with equal X signs.  Later stages couple the reduced pair
    (y, |x| + |y|), which moves like Brownian motion with its local time
    while sgn(X) holds; each stage defaults if it fails to couple in budget
    or if either copy's |X| leaves the ball of radius half its stage-start
    value around that value (the reduction is only trusted there).  An
    attempt succeeds at the first stage whose end gap is within merge_tol.
    """
    ts0, js0 = grid0
    res0 = _bkr_delayed_engine(gen, ts0, js0, width, start, starth)
    stage0_t1 = res0.t1
    stage0_t2 = res0.t2
    coupled0 = np.isfinite(res0.t2)
    sign_ok = (_sgn(res0.x) == _sgn(res0.xh)) & (res0.x != 0.0) & (res0.xh != 0.0)
    alive = coupled0 & sign_ok
    duration0 = np.where(coupled0, res0.t2, stage0_budget)
    elapsed = duration0.copy()
    records: list[list[StageRecord]] = [
        [
            StageRecord(
                n=0,
                epsilon=eps0,
                budget=float(stage0_budget),
                duration=float(duration0[a]),
                achieved_gap=float(res0.gap[a]),
                defaulted=not bool(alive[a]),
            )
        ]
        for a in range(width)
    ]

    rx = res0.y.copy()
    rl = np.abs(res0.x) + np.abs(res0.y)
    rxh = res0.yh.copy()
    rlh = np.abs(res0.xh) + np.abs(res0.yh)
    merged = np.zeros(width, dtype=bool)

    for n, ((ts, js), budget) in enumerate(red_grids, start=1):
        mask = alive & ~merged
        if not mask.any():
            break
        sel = np.where(mask)[0]
        b0 = rl[sel] - np.abs(rx[sel])
        bh0 = rlh[sel] - np.abs(rxh[sel])
        res = _delayed_engine(gen, ts, js, rx[sel], rl[sel], rxh[sel], rlh[sel])
        coupled_now = np.isfinite(res.t2)
        breach = (
            (res.minb < 0.5 * b0)
            | (res.maxb > 1.5 * b0)
            | (res.minbh < 0.5 * bh0)
            | (res.maxbh > 1.5 * bh0)
        )
        ok = coupled_now & ~breach
        duration = np.where(coupled_now, res.t2, budget)
        gap = np.abs(res.x - res.xh) + np.abs(res.l - res.lh)
        rx[sel], rl[sel] = res.x, res.l
        rxh[sel], rlh[sel] = res.xh, res.lh
        elapsed[sel] += duration
        for i, a in enumerate(sel):
            records[a].append(
                StageRecord(
                    n=n,
                    epsilon=red_epsilons[n - 1],
                    budget=float(budget),
                    duration=float(duration[i]),
                    achieved_gap=float(gap[i]),
                    defaulted=not bool(ok[i]),
                )
            )
        alive[sel] &= ok
        merged[sel[ok & (gap <= merge_tol)]] = True

    return merged, elapsed, records, stage0_t1, stage0_t2


def concatenated_bkr_batch(
    rng: RngStream,
    start: tuple[float, float],
    starth: tuple[float, float],
    dt: float,
    n_runs: int,
    eps0: float = 0.05,
    stage0_horizon: float = 2.0,
    epsilons=(0.02, 0.01, 0.005),
    red_horizon: float = 1.0,
    merge_tol: float = 0.05,
    restart_cap: int = 40,
) -> list[BkrStageLedger]:
    """n_runs independent staged couplings of the planar diffusion.

    Stage 0 is the delayed mirror coupling with kernel eps0 and budget
    stage0_horizon.  Later stages hand the leftover coordinate pair
    (y, |x| + |y|) of both copies to the one-dimensional staged machinery:
    the first reduced stage has budget red_horizon, stage n >= 2 has
    budget red_horizon * 4^(1-n), and stage kernels come from `epsilons`
    (a shrinking ladder; the defaults were sized so that each stage's
    hand-off gap usually clears merge_tol one stage later at worst).
    Each reduced stage is localized: it defaults when either copy's |X|
    leaves the ball of radius half its stage-entry value, since the pair
    only moves like Brownian motion with local time while sgn(X) holds.
    Any default restarts the whole sequence, up to restart_cap attempts.

    Attempts are exchangeable, so they are simulated in pooled batches and
    consumed in a fixed order, exactly as sequential restarting would.
    """
    if dt <= 0.0 or not math.isfinite(dt):
        raise InvalidParameterError(f"dt must be positive and finite, got {dt}")
    if n_runs < 1:
        raise InvalidParameterError("need n_runs >= 1")
    initial_bkr_state(start[0], start[1])
    initial_bkr_state(starth[0], starth[1])
    _check_eps(eps0)
    epsilons = [float(e) for e in epsilons]
    if not epsilons:
        raise InvalidParameterError("need at least one reduced-stage kernel")
    for e in epsilons:
        _check_eps(e)

    start = (float(start[0]), float(start[1]))
    starth = (float(starth[0]), float(starth[1]))

    grid0 = adaptive_delay_grid(eps0, stage0_horizon, dt)
    red_grids = []
    for n, eps_n in enumerate(epsilons, start=1):
        budget = red_horizon * 4.0 ** (1 - n)
        red_grids.append((adaptive_delay_grid(eps_n, budget, dt), budget))

    ledgers = [BkrStageLedger() for _ in range(n_runs)]
    pending = list(range(n_runs))
    batch_i = 0
    attempts_used = 0
    successes = 0
    while pending:
        if batch_i > 4 * restart_cap:
            raise NonTerminationError(
                f"{len(pending)} runs unresolved after {attempts_used} attempts"
            )
        p_est = (successes + 1.0) / (attempts_used + 2.0)
        width = int(min(max(64, math.ceil(1.2 * len(pending) / p_est)), 2048))
        succ, elapsed, records, t1s, t2s = _bkr_attempt_batch(
            rng.substream(batch_i).generator,
            width, start, starth, grid0, stage0_horizon, eps0,
            red_grids, epsilons, merge_tol,
        )
        batch_i += 1
        for a in range(width):
            if not pending:
                break
            attempts_used += 1
            successes += int(succ[a])
            led = ledgers[pending[0]]
            led.total_stages_run += len(records[a])
            if succ[a]:
                led.stages = records[a]
                led.total_time = float(elapsed[a])
                led.coupled = True
                led.t1 = float(t1s[a]) if np.isfinite(t1s[a]) else None
                led.t2 = float(t2s[a]) if np.isfinite(t2s[a]) else None
                pending.pop(0)
            else:
                led.restart_count += 1
                if led.restart_count >= restart_cap:
                    raise NonTerminationError(
                        f"a run defaulted {restart_cap} attempts in a row"
                    )

    return ledgers


def concatenated_bkr_coupling(
    rng: RngStream,
    start: tuple[float, float],
    starth: tuple[float, float],
    dt: float,
    **kwargs,
) -> BkrStageLedger:
    """One staged planar coupling run; see concatenated_bkr_batch."""
    return concatenated_bkr_batch(rng, start, starth, dt, 1, **kwargs)[0]
