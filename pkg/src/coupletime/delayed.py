"""Time-delayed coupling of a Brownian motion with its local time.

The delayed copy X^ follows the Tanaka-type SDE whose sign factors are read
at the lagged clock sigma(t) = t - psi(t), which makes the scheme strictly
causal: every sign consumed at a grid step was computed at an earlier one.
The kernel psi starts at eps^3 and decays cubically past t = eps.

This module carries the kernel and its sign-flip law, the constant of the
mean sup-squared distance bound (105.557... * eps), an explicit solver that
tracks the undelayed reference coupling on the same noise, Monte Carlo
calibration of stage kernels from the scaled worst-case start, and the
staged concatenation (geometric budgets 4^-n, reference jumps at stage
boundaries, full restart on default) that ends in an exact coupling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy.integrate import quad

from .errors import (
    CalibrationFailureError,
    InvalidGridError,
    InvalidParameterError,
    NonTerminationError,
    QuadratureFailureError,
)
from .parallel import run_chunked
from .reflection import CouplingConfig, sample_coupling_times
from .streams import RngStream, bridge_maximum_from_uniform, local_time_from_uniform

__all__ = [
    "psi",
    "sigma",
    "sign_flip_probability",
    "sign_flip_probability_from_delay",
    "estimate_sign_flip_probability",
    "delay_bound_constant",
    "uniform_delay_grid",
    "adaptive_delay_grid",
    "DelayedRun",
    "solve_delayed_coupling",
    "SupDistanceResult",
    "sup_distance_experiment",
    "CalibrationResult",
    "calibrate_stage_epsilons",
    "WORST_CASE_CONFIG",
    "StageRecord",
    "StageLedger",
    "concatenated_coupling",
    "concatenated_batch",
]

# scaled worst-case starting coordinates for stage calibration: unit position
# and local-time gaps, written in the driver/supremum chart (b0, s0, bt0, st0)
WORST_CASE_CONFIG = CouplingConfig(0.0, 0.0, -2.0, -1.0)


def _check_eps(eps: float) -> None:
    if not (0.0 < eps < 0.5):
        raise InvalidParameterError(f"eps must lie in (0, 1/2), got {eps}")


def psi(t, eps: float):
    """Delay kernel: eps^3 on [0, eps), then eps^3/(t - eps + 1)^3."""
    _check_eps(eps)
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0.0):
        raise InvalidParameterError("t must be >= 0")
    e3 = eps**3
    out = np.where(
        t_arr < eps, e3, e3 / np.power(np.maximum(t_arr, eps) - eps + 1.0, 3)
    )
    return out if out.ndim else float(out)


def sigma(t, eps: float):
    """Lagged clock t - min(psi(t), t); zero while the kernel exceeds t."""
    t_arr = np.asarray(t, dtype=float)
    out = t_arr - np.minimum(psi(t, eps), t_arr)
    return out if out.ndim else float(out)


def sign_flip_probability_from_delay(t, delay):
    """P(sgn at the lagged clock differs from sgn at t) for BM from 0:
    arctan(sqrt(delay / (t - delay))) / pi, needing t > delay > 0."""
    t_arr = np.asarray(t, dtype=float)
    d_arr = np.asarray(delay, dtype=float)
    if np.any(d_arr <= 0.0) or np.any(t_arr <= d_arr):
        raise InvalidParameterError("need 0 < delay < t for a sign-flip probability")
    out = np.arctan(np.sqrt(d_arr / (t_arr - d_arr))) / math.pi
    return out if out.ndim else float(out)


def sign_flip_probability(t, eps: float):
    """Flip probability of the configured kernel at time t (requires t > psi)."""
    return sign_flip_probability_from_delay(t, psi(t, eps))


def estimate_sign_flip_probability(
    rng: RngStream, t: float, eps: float, n: int, workers: int = 1
) -> tuple[float, float]:
    """Monte Carlo frequency of sgn(X_sigma(t)) != sgn(X_t) for BM from 0.

    Two Gaussian draws per path (the value at the lagged clock and the
    increment to t) sample the exact joint law.  sgn(0) = +1.
    """
    d = psi(t, eps)
    s = t - d
    if s <= 0.0:
        raise InvalidParameterError(f"t={t} is inside the clamped zone for eps={eps}")
    rs, rd = math.sqrt(s), math.sqrt(d)

    def one_chunk(stream: RngStream, count: int):
        gen = stream.generator
        xs = gen.standard_normal(count) * rs
        xt = xs + gen.standard_normal(count) * rd
        flips = (xs >= 0.0) != (xt >= 0.0)
        return int(flips.sum())

    hits = sum(run_chunked(one_chunk, rng, n, workers))
    p = hits / n
    return p, math.sqrt(p * (1.0 - p) / n)


@lru_cache(maxsize=1)
def delay_bound_constant() -> float:
    """Constant of the mean sup-squared distance bound:
    64 (1 + (2/pi) * integral over u > 0 of 1/sqrt(4(u+1)^3 - 1))."""
    val, err = quad(
        lambda u: 1.0 / math.sqrt(4.0 * (u + 1.0) ** 3 - 1.0), 0.0, np.inf, limit=200
    )
    if err > 1e-6:
        raise QuadratureFailureError(f"bound-constant quadrature error {err}")
    return 64.0 * (1.0 + (2.0 / math.pi) * val)


# ---------------------------------------------------------------------------
# delay-compatible grids
# ---------------------------------------------------------------------------


def _sign_lookup_indices(ts: np.ndarray, eps: float) -> np.ndarray:
    """For each step k >= 1 the grid index of the floored lagged clock.

    Entry k-1 of the result is the largest j with ts[j] <= sigma(ts[k]);
    causality demands j <= k-1, which the callers verify.
    """
    sig = sigma(ts[1:], eps)
    js = np.searchsorted(ts, sig, side="right") - 1
    return np.maximum(js, 0)


def uniform_delay_grid(eps: float, dt: float, horizon: float):
    """Uniform grid of step dt to the horizon, with sign-lookup indices.

    Refuses grids where some sigma(t_k) lands beyond grid point k-1: the
    scheme would need a sign that has not been computed yet.
    """
    _check_eps(eps)
    if dt <= 0.0 or horizon <= dt:
        raise InvalidGridError("need 0 < dt < horizon")
    n = int(math.ceil(horizon / dt - 1e-9))
    ts = np.arange(n + 1) * dt
    bad = sigma(ts[1:], eps) > ts[:-1] + 1e-12
    if bad.any():
        k = int(np.argmax(bad)) + 1
        raise InvalidGridError(
            f"delay violation at t={ts[k]:.6g}: sigma exceeds grid point "
            f"{k - 1} (psi={psi(ts[k], eps):.3g} < dt={dt:.3g}); shrink dt"
        )
    js = _sign_lookup_indices(ts, eps)
    return ts, np.minimum(js, np.arange(n))


def adaptive_delay_grid(eps: float, horizon: float, dt_cap: float):
    """Kernel-proportional grid: step ~ 0.9 psi(t + psi(t)), capped at dt_cap.

    The step choice guarantees sigma of the next point falls on or before
    the current one, so causality holds with lookups lagging only a few
    steps; resolution follows the kernel instead of its global minimum,
    which makes small-eps horizons tractable.
    """
    _check_eps(eps)
    if dt_cap <= 0.0 or horizon <= 0.0:
        raise InvalidGridError("need positive horizon and dt_cap")
    points = [0.0]
    t = 0.0
    while t < horizon:
        h = min(dt_cap, 0.9 * psi(t + psi(t, eps), eps))
        t = min(t + h, horizon)
        points.append(t)
    ts = np.array(points)
    if np.any(sigma(ts[1:], eps) > ts[:-1] + 1e-12):
        raise InvalidGridError("adaptive grid violated the delay causality check")
    js = _sign_lookup_indices(ts, eps)
    return ts, np.minimum(js, np.arange(len(ts) - 1))


# ---------------------------------------------------------------------------
# the delayed solver
# ---------------------------------------------------------------------------


def _sgn(a: np.ndarray) -> np.ndarray:
    """Sign with sgn(0) = +1."""
    return np.where(a >= 0.0, 1.0, -1.0)


class _EngineOut(NamedTuple):
    t1: np.ndarray
    t2: np.ndarray
    supd: np.ndarray
    x: np.ndarray
    l: np.ndarray
    xh: np.ndarray
    lh: np.ndarray
    bref: np.ndarray
    minb: np.ndarray
    maxb: np.ndarray
    minbh: np.ndarray
    maxbh: np.ndarray
    paths: dict | None


def _delayed_engine(gen, ts, js, x0, l0, xh0, lh0, record=False) -> _EngineOut:
    """Explicit solution of the delayed coupling for a batch of replicates.

    Per step the base pair (X, L) advances with a Gaussian increment and an
    exact conditional local-time draw; the delayed copy moves by
    sgn(X^ at the floored lagged clock) * J * sgn(X at it) times the same
    increment and accrues its own local time the same way.  The undelayed
    reference driver B~ moves by J dB on the shared noise.  J switches at
    the first bridge-detected hit of the driver midpoint; the run freezes
    at the reference coupling time (local time reaching the stage target at
    a zero crossing of X) and the sup of |B^ - B~| over visited grid points
    is reported.  Within-step joint laws across the three processes are
    approximated at O(sqrt(dt)); each marginal step is exact in law.
    """
    x = np.array(x0, dtype=float, copy=True)
    l = np.array(l0, dtype=float, copy=True)
    xh = np.array(xh0, dtype=float, copy=True)
    lh = np.array(lh0, dtype=float, copy=True)
    count = x.size
    n_steps = len(ts) - 1

    b = l - np.abs(x)
    bref = lh - np.abs(xh)
    mid = 0.5 * (b + bref)
    bt0 = bref.copy()
    b00 = b.copy()
    lh0_arr = lh.copy()
    minb = b.copy()
    maxb = b.copy()
    bh0 = lh - np.abs(xh)
    minbh = bh0.copy()
    maxbh = bh0.copy()
    ctrl = np.full(count, -1.0)
    target = np.full(count, np.inf)
    supd = np.zeros(count)

    out_t1 = np.full(count, np.inf)
    out_t2 = np.full(count, np.inf)
    out = {
        "supd": np.zeros(count),
        "x": x.copy(),
        "l": l.copy(),
        "xh": xh.copy(),
        "lh": lh.copy(),
        "bref": bref.copy(),
        "minb": minb.copy(),
        "maxb": maxb.copy(),
        "minbh": minbh.copy(),
        "maxbh": maxbh.copy(),
    }
    idx = np.arange(count)

    lag = int(np.max(np.arange(1, n_steps + 1) - js)) if n_steps else 1
    rows = lag + 1
    sgx = np.empty((rows, count))
    sgxh = np.empty((rows, count))
    sgx[0] = _sgn(x)
    sgxh[0] = _sgn(xh)

    hs = np.diff(ts)
    shs = np.sqrt(hs)

    paths = None
    if record:
        if count != 1:
            raise InvalidParameterError("path recording supports a single replicate")
        paths = {k: [v[0]] for k, v in
                 (("x", x), ("l", l), ("xh", xh), ("lh", lh), ("bref", bref))}
        paths["j"] = [-1]

    for k in range(1, n_steps + 1):
        if idx.size == 0:
            break
        size = idx.size
        h = hs[k - 1]
        z = gen.standard_normal(size)
        us = gen.random((4, size))
        u_l, u_lh, u_min, u_hit = us

        dx = z * shs[k - 1]
        nx = x + dx
        dl = local_time_from_uniform(x, nx, h, u_l)
        nl = l + dl

        jrow = js[k - 1] % rows
        theta = sgxh[jrow] * ctrl * sgx[jrow]
        nxh = xh + theta * dx
        dlh = local_time_from_uniform(xh, nxh, h, u_lh)
        nlh = lh + dlh

        bp = l - np.abs(x)
        bn = nl - np.abs(nx)
        db = bn - bp
        nbref = bref + ctrl * db

        # sampled within-step minimum of the base driver; used both for the
        # stage-2 level at the control switch and for localization guards
        # when the engine runs a reduced coordinate pair
        bmin = -bridge_maximum_from_uniform(-bp, -bn, h, u_min)
        np.minimum(minb, bmin, out=minb)
        np.maximum(maxb, bn, out=maxb)

        minus = ctrl < 0.0
        if minus.any():
            p_hit = np.exp(-2.0 * np.maximum((mid - bp) * (mid - bn), 0.0) / h)
            fire1 = minus & (u_hit < p_hit)
            if fire1.any():
                out_t1[idx[fire1]] = ts[k]
                ctrl[fire1] = 1.0
                # stage-2 level: larger supremum record at the switch; the
                # mirrored record is bt0 + (b0 - running min of b)
                ref_sup = bt0[fire1] + (b00[fire1] - minb[fire1])
                target[fire1] = np.maximum(
                    np.maximum(nl[fire1], lh0_arr[fire1]), ref_sup
                )

        was_plus = ~minus
        fire2 = was_plus & (dl > 0.0) & (nl >= target)

        bh = nlh - np.abs(nxh)
        np.maximum(supd, np.abs(bh - nbref), out=supd)
        np.minimum(minbh, bh, out=minbh)
        np.maximum(maxbh, bh, out=maxbh)

        x, l, xh, lh, bref = nx, nl, nxh, nlh, nbref
        rowk = k % rows
        sgx[rowk] = _sgn(x)
        sgxh[rowk] = _sgn(xh)

        if record:
            paths["x"].append(float(x[0]))
            paths["l"].append(float(l[0]))
            paths["xh"].append(float(xh[0]))
            paths["lh"].append(float(lh[0]))
            paths["bref"].append(float(bref[0]))
            paths["j"].append(int(ctrl[0]))

        if fire2.any():
            done = idx[fire2]
            out_t2[done] = ts[k]
            out["supd"][done] = supd[fire2]
            out["x"][done] = x[fire2]
            out["l"][done] = l[fire2]
            out["xh"][done] = xh[fire2]
            out["lh"][done] = lh[fire2]
            out["bref"][done] = bref[fire2]
            out["minb"][done] = minb[fire2]
            out["maxb"][done] = maxb[fire2]
            out["minbh"][done] = minbh[fire2]
            out["maxbh"][done] = maxbh[fire2]
            keep = ~fire2
            idx = idx[keep]
            x, l, xh, lh = x[keep], l[keep], xh[keep], lh[keep]
            bref, mid, minb = bref[keep], mid[keep], minb[keep]
            maxb, minbh, maxbh = maxb[keep], minbh[keep], maxbh[keep]
            bt0, b00, lh0_arr = bt0[keep], b00[keep], lh0_arr[keep]
            ctrl, target, supd = ctrl[keep], target[keep], supd[keep]
            sgx = sgx[:, keep]
            sgxh = sgxh[:, keep]

    if idx.size:
        out["supd"][idx] = supd
        out["x"][idx] = x
        out["l"][idx] = l
        out["xh"][idx] = xh
        out["lh"][idx] = lh
        out["bref"][idx] = bref
        out["minb"][idx] = minb
        out["maxb"][idx] = maxb
        out["minbh"][idx] = minbh
        out["maxbh"][idx] = maxbh

    return _EngineOut(
        t1=out_t1,
        t2=out_t2,
        supd=out["supd"],
        x=out["x"],
        l=out["l"],
        xh=out["xh"],
        lh=out["lh"],
        bref=out["bref"],
        minb=out["minb"],
        maxb=out["maxb"],
        minbh=out["minbh"],
        maxbh=out["maxbh"],
        paths=paths,
    )


@dataclass(frozen=True)
class DelayedRun:
    """One delayed-coupling trajectory on a uniform grid.

    x, l and xh, lh are the base and delayed pairs; bref is the undelayed
    reference driver on the same noise; j the control path.  sign_access
    holds, per step, the grid index whose signs the step consumed (always
    strictly earlier, by construction of the grid).
    """

    t: np.ndarray
    x: np.ndarray
    l: np.ndarray
    xh: np.ndarray
    lh: np.ndarray
    bref: np.ndarray
    j: np.ndarray
    sign_access: np.ndarray
    t1: float | None
    t2: float | None
    sup_distance: float
    eps: float

    @property
    def b(self) -> np.ndarray:
        return self.l - np.abs(self.x)

    @property
    def bh(self) -> np.ndarray:
        return self.lh - np.abs(self.xh)

    @property
    def coupled(self) -> bool:
        return self.t2 is not None


def solve_delayed_coupling(
    rng: RngStream,
    x0: float,
    xh0: float,
    l0: float,
    lh0: float,
    eps: float,
    dt: float,
    horizon: float,
) -> DelayedRun:
    """Path of the delayed coupling on a uniform dt grid (refused if dt is
    too coarse for the delay at any grid point).

    Initial local times are accepted as arbitrary finite floats: the
    machinery is invariant under a common shift of (l, b) and stage
    calibration uses negatively shifted records.
    """
    for name, v in (("x0", x0), ("xh0", xh0), ("l0", l0), ("lh0", lh0)):
        if not math.isfinite(v):
            raise InvalidParameterError(f"{name} must be finite")
    ts, js = uniform_delay_grid(eps, dt, horizon)
    res = _delayed_engine(
        rng.generator,
        ts,
        js,
        np.array([x0]),
        np.array([l0]),
        np.array([xh0]),
        np.array([lh0]),
        record=True,
    )
    n_rec = len(res.paths["x"])
    t1 = float(res.t1[0]) if math.isfinite(res.t1[0]) else None
    t2 = float(res.t2[0]) if math.isfinite(res.t2[0]) else None
    return DelayedRun(
        t=ts[:n_rec],
        x=np.array(res.paths["x"]),
        l=np.array(res.paths["l"]),
        xh=np.array(res.paths["xh"]),
        lh=np.array(res.paths["lh"]),
        bref=np.array(res.paths["bref"]),
        j=np.array(res.paths["j"]),
        sign_access=js[: n_rec - 1],
        t1=t1,
        t2=t2,
        sup_distance=float(res.supd[0]),
        eps=eps,
    )


class SupDistanceResult(NamedTuple):
    eps: float
    mean_sup_sq: float
    se: float
    coupled_fraction: float
    n: int


def sup_distance_experiment(
    rng: RngStream,
    eps: float,
    x0: float,
    l0: float,
    xh0: float,
    lh0: float,
    horizon: float = 0.5,
    dt_cap: float = 2e-3,
    n: int = 10_000,
    workers: int = 1,
) -> SupDistanceResult:
    """Mean of sup |B^ - B~|^2 over n delayed-coupling replicates.

    Replicates run on the kernel-proportional grid until the reference
    couples or the horizon ends; the sup is over all visited grid points.
    The bound being checked is delay_bound_constant() * eps, which holds
    for the sup over every horizon.
    """
    ts, js = adaptive_delay_grid(eps, horizon, dt_cap)

    def one_chunk(stream: RngStream, count: int):
        res = _delayed_engine(
            stream.generator,
            ts,
            js,
            np.full(count, x0),
            np.full(count, l0),
            np.full(count, xh0),
            np.full(count, lh0),
        )
        sq = res.supd**2
        return sq.sum(), np.square(sq).sum(), int(np.isfinite(res.t2).sum())

    parts = run_chunked(one_chunk, rng, n, workers)
    total = sum(p[0] for p in parts)
    total_sq = sum(p[1] for p in parts)
    coupled = sum(p[2] for p in parts)
    mean = total / n
    var = max(0.0, (total_sq - n * mean * mean) / (n - 1)) if n > 1 else 0.0
    return SupDistanceResult(eps, mean, math.sqrt(var / n), coupled / n, n)


# ---------------------------------------------------------------------------
# stage calibration
# ---------------------------------------------------------------------------


class CalibrationResult(NamedTuple):
    epsilons: list[float]
    bootstrap_se: list[float]
    n_samples: int


def calibrate_stage_epsilons(
    rng: RngStream,
    n_max: int,
    dt: float,
    n_replicates: int = 20_000,
    n_bootstrap: int = 200,
    safety: float = 0.8,
    horizon: float = 1e5,
    growth: float = 1.02,
    workers: int = 1,
) -> CalibrationResult:
    """Stage kernels eps_n with P(stage time > 4^-n) <= 4^-n by construction.

    Brownian scaling makes the coupling time from a worst-case start of
    scale eps equal to eps^2 times the time T^ from the unit worst-case
    start (0, 0, -2, -1), so one sample of T^ calibrates every stage:
    eps_n solves P(T^ > 4^-n / eps^2) = 4^-n, found by bisection on the
    bootstrap-averaged empirical tail, then shrunk by `safety` to absorb
    the delay overhead the scaling argument ignores.  The tail is sampled
    on a geometrically growing step (exact in law at any step; hit times
    recorded at step right endpoints, which only inflates the quantile and
    keeps the calibration conservative).
    """
    if n_max < 1:
        raise InvalidParameterError("n_max must be >= 1")
    if not (0.0 < safety <= 1.0):
        raise InvalidParameterError("safety factor must lie in (0, 1]")
    needed = 10 * 4**n_max
    if n_replicates < needed:
        raise CalibrationFailureError(
            f"tail at level 4^-{n_max} needs >= {needed} samples, got {n_replicates}"
        )
    times = sample_coupling_times(
        rng.substream(0),
        WORST_CASE_CONFIG,
        n_replicates,
        dt,
        horizon,
        workers=workers,
        growth=growth,
    )
    times = np.sort(times)
    p_min = 4.0 ** (-n_max)
    censored = int(np.isinf(times).sum())
    if censored / n_replicates > 0.5 * p_min:
        raise CalibrationFailureError(
            f"{censored}/{n_replicates} runs outlived the horizon; tail at "
            f"level {p_min} is unresolved, raise the horizon"
        )

    boot_gen = rng.substream(1).generator
    resamples = np.sort(
        times[boot_gen.integers(0, n_replicates, size=(n_bootstrap, n_replicates))],
        axis=1,
    )

    def smoothed_tail(x: float) -> float:
        # average over bootstrap resamples of P(T^ > x): the grand mean
        return float(np.mean(resamples > x))

    epsilons: list[float] = []
    ses: list[float] = []
    for n in range(1, n_max + 1):
        budget = 4.0 ** (-n)
        lo, hi = 1e-6, 0.499999
        if smoothed_tail(budget / hi**2) <= budget:
            root = hi
        else:
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if smoothed_tail(budget / mid**2) <= budget:
                    lo = mid
                else:
                    hi = mid
            root = lo
        # per-resample roots give the quantile uncertainty
        k_q = min(n_replicates - 1, int(math.ceil((1.0 - budget) * n_replicates)))
        q_b = resamples[:, k_q]
        if np.any(np.isinf(q_b)):
            raise CalibrationFailureError(
                f"bootstrap tail at level {budget} reaches censored samples"
            )
        roots_b = np.minimum(np.sqrt(budget / q_b), 0.499999)
        eps_n = min(safety * root, 0.499999)
        epsilons.append(eps_n)
        ses.append(float(safety * roots_b.std(ddof=1)))

    return CalibrationResult(epsilons, ses, n_replicates)


# ---------------------------------------------------------------------------
# staged concatenation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageRecord:
    """One stage of one attempt: kernel, budget, runtime, and the gap
    |x - xh| + |l - lh| at the stage end."""

    n: int
    epsilon: float
    budget: float
    duration: float
    achieved_gap: float
    defaulted: bool


@dataclass
class StageLedger:
    """Outcome of one staged-coupling run.

    stages holds the successful attempt's records (or the last attempt's,
    when the restart cap was hit); restart_count is the number of defaulted
    attempts before it; total_stages_run counts stages across all attempts.
    """

    stages: list[StageRecord] = field(default_factory=list)
    total_time: float = 0.0
    restart_count: int = 0
    total_stages_run: int = 0
    coupled: bool = False


def _run_attempt_batch(
    gen, width, start, starth, grids, epsilons, merge_tol
):
    """One batched pool of independent attempts through the stage sequence.

    Returns (success flags, elapsed times, per-attempt stage records).
    An attempt advances to stage n only when stage n-1 coupled in budget;
    it succeeds at the first stage whose end gap is within merge_tol.
    """
    x = np.full(width, start[0])
    l = np.full(width, start[1])
    xh = np.full(width, starth[0])
    lh = np.full(width, starth[1])
    elapsed = np.zeros(width)
    alive = np.ones(width, dtype=bool)
    merged = np.zeros(width, dtype=bool)
    records: list[list[StageRecord]] = [[] for _ in range(width)]

    for n, ((ts, js), budget) in enumerate(grids, start=1):
        mask = alive & ~merged
        if not mask.any():
            break
        sel = np.where(mask)[0]
        res = _delayed_engine(gen, ts, js, x[sel], l[sel], xh[sel], lh[sel])
        coupled_now = np.isfinite(res.t2)
        duration = np.where(coupled_now, res.t2, budget)
        gap = np.abs(res.x - res.xh) + np.abs(res.l - res.lh)
        x[sel], l[sel] = res.x, res.l
        xh[sel], lh[sel] = res.xh, res.lh
        elapsed[sel] += duration
        for i, a in enumerate(sel):
            records[a].append(
                StageRecord(
                    n=n,
                    epsilon=epsilons[n - 1],
                    budget=float(budget),
                    duration=float(duration[i]),
                    achieved_gap=float(gap[i]),
                    defaulted=not bool(coupled_now[i]),
                )
            )
        alive[sel] &= coupled_now
        merged[sel[coupled_now & (gap <= merge_tol)]] = True

    return merged, elapsed, records


def concatenated_batch(
    rng: RngStream,
    start: tuple[float, float],
    starth: tuple[float, float],
    dt: float,
    n_runs: int,
    epsilons=None,
    stage1_horizon: float = 2.0,
    merge_tol: float = 0.05,
    restart_cap: int = 60,
) -> list[StageLedger]:
    """n_runs independent staged couplings.

    Stage 1 runs the delayed coupling from the configured starts until the
    reference couples (budget `stage1_horizon`; running out defaults the
    attempt).  Later stages restart the construction from the current pair
    states with kernel eps_n and budget 4^-n; the reference of each new
    stage starts at the delayed copy's state, which is the jump adjustment.
    After any stage whose end gap |x - xh| + |l - lh| is within merge_tol
    the copies are declared exactly coupled and snapped together.  A
    defaulted attempt restarts the whole sequence with fresh randomness,
    up to restart_cap attempts per run.

    Every attempt starts fresh from the same states, so attempts are
    exchangeable; they are simulated in pooled batches and consumed in a
    fixed order (each run takes attempts until its first success), which
    is distributed exactly as sequential restarting but runs the expensive
    stage grids once per pool.
    """
    if dt <= 0.0:
        raise InvalidParameterError("dt must be positive")
    if n_runs < 1:
        raise InvalidParameterError("need n_runs >= 1")
    if epsilons is None:
        epsilons = calibrate_stage_epsilons(rng.substream(2**40), 2, dt).epsilons
    epsilons = [float(e) for e in epsilons]
    if not epsilons:
        raise InvalidParameterError("need at least one stage kernel")
    for e in epsilons:
        _check_eps(e)

    start = (float(start[0]), float(start[1]))
    starth = (float(starth[0]), float(starth[1]))

    # per-stage grids are shared by all attempts; build once
    grids = []
    for n, eps_n in enumerate(epsilons, start=1):
        budget = stage1_horizon if n == 1 else 4.0 ** (-n)
        grids.append((adaptive_delay_grid(eps_n, budget, dt), budget))

    ledgers = [StageLedger() for _ in range(n_runs)]
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
        succ, elapsed, records = _run_attempt_batch(
            rng.substream(batch_i).generator,
            width, start, starth, grids, epsilons, merge_tol,
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
                pending.pop(0)
            else:
                led.restart_count += 1
                if led.restart_count >= restart_cap:
                    raise NonTerminationError(
                        f"a run defaulted {restart_cap} attempts in a row"
                    )

    return ledgers


def concatenated_coupling(
    rng: RngStream,
    start: tuple[float, float],
    starth: tuple[float, float],
    dt: float,
    **kwargs,
) -> StageLedger:
    """One staged coupling run; see concatenated_batch for the scheme."""
    return concatenated_batch(rng, start, starth, dt, 1, **kwargs)[0]
