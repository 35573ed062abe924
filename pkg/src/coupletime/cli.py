"""Experiment harness: deterministic seeds in, CSV tables and SVG plots out.

Every subcommand is a pure function of (config, package version).  Random
numbers come from counter-based streams indexed by replicate, so the
--workers flag changes wall-clock time and nothing else, and rerunning a
command reproduces its outputs byte for byte.  Each run writes a
manifest.json recording the config hash, the version, the wall clock and
a sha256 per output file.

Exit codes: 0 success, 2 invalid config or arguments, 3 numeric or
quadrature failure, 4 failed rows in `check`.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bkr import (
    bkr_invariant_report,
    concatenated_bkr_batch,
    sample_variant_couplings,
    simulate_bkr,
    variant_coupling,
)
from .csvio import write_csv
from .delayed import (
    delay_bound_constant,
    estimate_sign_flip_probability,
    sign_flip_probability,
    sup_distance_experiment,
)
from .errors import (
    CalibrationFailureError,
    IncompletePathError,
    InvalidGridError,
    InvalidParameterError,
    InvalidStateError,
    NonTerminationError,
    NumericFailureError,
)
from .levy import sample_levy_endpoints
from .maximal import ShiftedJointLaw, joint_cdf, overlap_integral
from .reflection import (
    CouplingConfig,
    estimate_coupling_cdf,
    estimate_m1_tail,
    m1_tail,
    mgf_closed_form,
    mgf_quadrature,
    phi_drift,
    rao_blackwell_mgf,
    run_reflection_sync,
)
from .streams import RngStream
from .svg import line_chart, region_chart

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECK = 4

# Fixed stream index per consumer so no two commands (or two phases of one
# command) ever share a random stream.
STREAM_MGF = 0
STREAM_MAXIMAL = 1
STREAM_DELAY = 2
STREAM_BKR_RUNS = 3
STREAM_BKR_PATH = 4
STREAM_PATHS = 5
STREAM_CHECK = 6

MGF_COLUMNS = ("alpha", "closed_form", "quadrature", "mc", "mc_se")
MAXIMAL_COLUMNS = ("t", "overlap", "immersed_cdf", "se")
DELAY_COLUMNS = ("eps", "mean_sup_sq", "bound", "se")
BKR_RUN_COLUMNS = ("t1", "t2", "restarts", "total_time")
BKR_PATH_COLUMNS = ("t", "x", "y", "k", "xt", "yt", "kt", "j")
PATHS_COLUMNS = ("t", "b", "s", "bt", "st", "j")
CHECK_COLUMNS = ("name", "value", "reference", "tolerance", "passed")

# The drift checks use a fixed sample size: one Gaussian draw per
# replicate makes 10^5 of them cheaper than a single diffusion path.
PHI_CHECK_N = 100_000
PHI_CHECK_START = (2.0, 0.5)
PHI_CHECK_HORIZON = 0.01


@dataclass
class ExperimentConfig:
    """Everything a subcommand needs, JSON-serializable and hashable.

    seed feeds the counter-based streams (one fixed stream index per
    command), replicates sizes the Monte Carlo batches, dt is the base
    step of every discretized path.  The grids and start tuples are
    per-command inputs; bkr_runs is separate from replicates because one
    staged planar run costs as much as thousands of scalar paths.
    """

    seed: int = 1729
    replicates: int = 2000
    dt: float = 1e-3
    alpha_grid: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    t_grid: tuple = (0.25, 0.5, 0.75, 1.0, 1.5, 2.0)
    eps_grid: tuple = (0.02, 0.05, 0.1)
    mgf_start: tuple = (1.0, 1.0, 0.0, 0.0)
    maximal_start: tuple = (1.0, 1.0, 0.0, 0.0)
    delay_start: tuple = (0.25, 0.5, 0.5, 0.25)
    bkr_start: tuple = (1.0, 0.2)
    bkr_start_tilde: tuple = (0.85, 0.25)
    bkr_runs: int = 20
    paths_start: tuple = (1.0, 1.0, 0.0, 0.0)
    output_dir: str = "out"

    def __post_init__(self):
        for f in fields(self):
            if f.type == "tuple":
                setattr(self, f.name, tuple(getattr(self, f.name)))

    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise InvalidParameterError(f"seed must be an integer, got {self.seed!r}")
        if not 0 <= self.seed < 2**64:
            raise InvalidParameterError(f"seed must fit in 64 bits, got {self.seed}")
        if not isinstance(self.replicates, int) or self.replicates < 1:
            raise InvalidParameterError(f"replicates must be >= 1, got {self.replicates!r}")
        if not isinstance(self.bkr_runs, int) or self.bkr_runs < 1:
            raise InvalidParameterError(f"bkr_runs must be >= 1, got {self.bkr_runs!r}")
        if not (isinstance(self.dt, float) and math.isfinite(self.dt) and self.dt > 0.0):
            raise InvalidParameterError(f"dt must be positive and finite, got {self.dt!r}")
        for name in ("alpha_grid", "t_grid", "eps_grid"):
            grid = getattr(self, name)
            if len(grid) == 0:
                raise InvalidParameterError(f"{name} must not be empty")
            for v in grid:
                if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                    raise InvalidParameterError(f"{name} entries must be positive, got {v!r}")
        for name, width in (
            ("mgf_start", 4),
            ("maximal_start", 4),
            ("delay_start", 4),
            ("bkr_start", 2),
            ("bkr_start_tilde", 2),
            ("paths_start", 4),
        ):
            start = getattr(self, name)
            if len(start) != width:
                raise InvalidParameterError(f"{name} needs {width} numbers, got {start!r}")
            for v in start:
                if not (isinstance(v, (int, float)) and math.isfinite(v)):
                    raise InvalidParameterError(f"{name} entries must be finite, got {v!r}")
        if not isinstance(self.output_dir, str) or not self.output_dir:
            raise InvalidParameterError("output_dir must be a non-empty string")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise InvalidParameterError("config file must hold a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            v = data[f.name]
            if f.type == "tuple":
                if not isinstance(v, (list, tuple)):
                    raise InvalidParameterError(f"{f.name} must be a list, got {v!r}")
                kwargs[f.name] = tuple(
                    float(x) if isinstance(x, (int, float)) and not isinstance(x, bool) else x
                    for x in v
                )
            elif f.type == "float" and isinstance(v, int) and not isinstance(v, bool):
                kwargs[f.name] = float(v)
            else:
                kwargs[f.name] = v
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("ascii")).hexdigest()


@dataclass
class RunManifest:
    """What a run produced: config hash, version, wall clock, checksums.

    Two runs with equal config_hash and version have equal `outputs`;
    wall_clock_s is informational and excluded from that guarantee.
    """

    config_hash: str
    version: str
    wall_clock_s: float
    outputs: dict

    def write(self, out_dir: Path) -> None:
        payload = {
            "config_hash": self.config_hash,
            "version": self.version,
            "wall_clock_s": self.wall_clock_s,
            "outputs": dict(sorted(self.outputs.items())),
        }
        (out_dir / "manifest.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n"
        )


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_svg(out_dir: Path, name: str, text: str) -> str:
    (out_dir / name).write_text(text)
    return name


def _nan(x) -> float:
    return float(x) if x is not None else float("nan")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_mgf(cfg: ExperimentConfig, out_dir: Path, workers: int):
    """Closed form vs quadrature vs Rao-Blackwellized Monte Carlo."""
    start = CouplingConfig(*cfg.mgf_start).normalized()
    if start.is_singular:
        raise InvalidParameterError(
            "initial condition is singular: the copies start equal, the "
            "coupling time is 0 and every rate is trivially 1; pick a start "
            "with a positive gap"
        )
    rng = RngStream(cfg.seed, STREAM_MGF)
    rows = []
    worst = 0.0
    for i, alpha in enumerate(cfg.alpha_grid):
        closed = mgf_closed_form(start.gap, alpha).value
        quad = mgf_quadrature(0.5 * start.gap, alpha)
        mc = rao_blackwell_mgf(
            rng.substream(i), start, alpha, cfg.replicates, cfg.dt, workers=workers
        )
        if closed > 0.0:
            worst = max(worst, abs(closed - quad) / closed)
        rows.append((alpha, closed, quad, mc.estimate, mc.standard_error))
    write_csv(out_dir / "mgf.csv", MGF_COLUMNS, rows)

    a_lo, a_hi = min(cfg.alpha_grid), max(cfg.alpha_grid)
    dense = np.geomspace(a_lo, a_hi, 97)
    closed_dense = [mgf_closed_form(start.gap, a).value for a in dense]
    xs = [r[0] for r in rows]
    mc_vals = [r[3] for r in rows]
    ses = [r[4] for r in rows]
    svg = line_chart(
        [
            ("closed form", dense, closed_dense),
            ("Monte Carlo", xs, mc_vals),
        ],
        title=f"coupling-time transform, gap {start.gap:g}",
        xlabel="alpha",
        ylabel="E[exp(-alpha T)]",
        bands=[(xs, [m - 3 * s for m, s in zip(mc_vals, ses)],
                [m + 3 * s for m, s in zip(mc_vals, ses)])],
    )
    files = ["mgf.csv", _write_svg(out_dir, "mgf.svg", svg)]
    print(f"mgf: {len(rows)} alphas, max closed-vs-quadrature rel err {worst:.3e}")
    return files, EXIT_OK


def cmd_maximal_compare(cfg: ExperimentConfig, out_dir: Path, workers: int):
    """Immersed coupling probability against the matched-law ceiling."""
    start = CouplingConfig(*cfg.maximal_start).normalized()
    ts = sorted(cfg.t_grid)
    ceil = [overlap_integral(start, t).coupling_prob for t in ts]
    est = estimate_coupling_cdf(
        RngStream(cfg.seed, STREAM_MAXIMAL), start, ts, cfg.replicates, cfg.dt,
        workers=workers,
    )
    rows = list(zip(ts, ceil, est.cdf.tolist(), est.se.tolist()))
    write_csv(out_dir / "maximal.csv", MAXIMAL_COLUMNS, rows)

    svg = line_chart(
        [
            ("matched-law ceiling", ts, ceil),
            ("immersed coupling", ts, est.cdf.tolist()),
        ],
        title="probability of having coupled by t",
        xlabel="t",
        ylabel="P(coupled)",
        bands=[(ts, (est.cdf - 3 * est.se).tolist(), (est.cdf + 3 * est.se).tolist())],
    )
    files = ["maximal.csv", _write_svg(out_dir, "maximal.svg", svg)]

    margins = [(c - e) / s if s > 0 else math.inf for c, e, s in
               zip(ceil, est.cdf.tolist(), est.se.tolist())]
    k = int(np.argmax(margins))
    print(f"maximal-compare: ceiling exceeds the immersed coupling by "
          f"{margins[k]:.1f} SE at t={ts[k]:g} (largest margin)")
    return files, EXIT_OK


def cmd_delay_demo(cfg: ExperimentConfig, out_dir: Path, workers: int):
    """Mean squared sup-distance of the delayed coupling vs the linear bound."""
    x0, l0, xh0, lh0 = cfg.delay_start
    const = delay_bound_constant()
    rng = RngStream(cfg.seed, STREAM_DELAY)
    rows = []
    for i, eps in enumerate(sorted(cfg.eps_grid)):
        res = sup_distance_experiment(
            rng.substream(i), eps, x0, l0, xh0, lh0,
            dt_cap=cfg.dt, n=cfg.replicates, workers=workers,
        )
        rows.append((eps, res.mean_sup_sq, const * eps, res.se))
    write_csv(out_dir / "delay.csv", DELAY_COLUMNS, rows)

    xs = [r[0] for r in rows]
    means = [r[1] for r in rows]
    ses = [r[3] for r in rows]
    svg = line_chart(
        [
            ("mean sup^2", xs, means),
            (f"{const:.3f} eps", xs, [r[2] for r in rows]),
        ],
        title="delayed-coupling distance vs kernel size",
        xlabel="eps",
        ylabel="E[sup^2]",
        bands=[(xs, [m - 3 * s for m, s in zip(means, ses)],
                [m + 3 * s for m, s in zip(means, ses)])],
    )
    files = ["delay.csv", _write_svg(out_dir, "delay.svg", svg)]
    print(f"delay-demo: {len(rows)} kernel sizes, all means within the bound "
          f"by {min(r[2] - r[1] for r in rows):.3f} or more")
    return files, EXIT_OK


def cmd_bkr(cfg: ExperimentConfig, out_dir: Path, workers: int):
    """Staged planar couplings: per-run ledgers plus one region diagram."""
    ledgers = concatenated_bkr_batch(
        RngStream(cfg.seed, STREAM_BKR_RUNS),
        tuple(cfg.bkr_start), tuple(cfg.bkr_start_tilde), cfg.dt, cfg.bkr_runs,
    )
    rows = [
        (_nan(led.t1), _nan(led.t2), led.restart_count, led.total_time)
        for led in ledgers
    ]
    write_csv(out_dir / "bkr_runs.csv", BKR_RUN_COLUMNS, rows)

    run = variant_coupling(
        RngStream(cfg.seed, STREAM_BKR_PATH),
        tuple(cfg.bkr_start), tuple(cfg.bkr_start_tilde), cfg.dt,
    )
    path_rows = list(zip(
        run.t.tolist(), run.x.tolist(), run.y.tolist(), run.k.tolist(),
        run.xt.tolist(), run.yt.tolist(), run.kt.tolist(), run.j.tolist(),
    ))
    write_csv(out_dir / "bkr_path.csv", BKR_PATH_COLUMNS, path_rows)

    ell0 = abs(run.x[0]) + abs(run.y[0])
    ell1 = abs(run.x[-1]) + abs(run.y[-1])
    svg = region_chart(
        [("primary", run.x, run.y), ("mirror", run.xt, run.yt)],
        levels=sorted({run.h, ell0, ell1}),
        title="planar coupling in the square geometry",
    )
    files = ["bkr_runs.csv", "bkr_path.csv", _write_svg(out_dir, "bkr_region.svg", svg)]

    restarts = [led.restart_count for led in ledgers]
    print(f"bkr: {sum(led.coupled for led in ledgers)}/{len(ledgers)} runs coupled, "
          f"restarts median {sorted(restarts)[len(restarts) // 2]}, max {max(restarts)}; "
          f"path outcome {run.outcome}")
    return files, EXIT_OK


def cmd_paths(cfg: ExperimentConfig, out_dir: Path, workers: int):
    """One reflection/synchronized sample plus a planar region diagram."""
    start = CouplingConfig(*cfg.paths_start).normalized()
    run = run_reflection_sync(RngStream(cfg.seed, STREAM_PATHS), start, cfg.dt)
    rows = list(zip(
        run.t.tolist(), run.b.tolist(), run.s.tolist(),
        run.bt.tolist(), run.st.tolist(), run.j.tolist(),
    ))
    write_csv(out_dir / "paths.csv", PATHS_COLUMNS, rows)

    svg = line_chart(
        [
            ("B", run.t, run.b),
            ("B copy", run.t, run.bt),
            ("S", run.t, run.s),
            ("S copy", run.t, run.st),
        ],
        title=f"reflect then synchronize ({run.outcome})",
        xlabel="t",
        ylabel="level",
    )
    files = ["paths.csv", _write_svg(out_dir, "paths.svg", svg)]

    planar = simulate_bkr(
        RngStream(cfg.seed, STREAM_PATHS).substream(1),
        cfg.bkr_start[0], cfg.bkr_start[1], cfg.dt, horizon=2.0,
    )
    ell_end = abs(planar.x[-1]) + abs(planar.y[-1])
    region = region_chart(
        [("path", planar.x, planar.y)],
        levels=sorted({planar.h, 2.0 * planar.h, ell_end}),
        title="planar diffusion on growing squares",
    )
    files.append(_write_svg(out_dir, "region.svg", region))
    print(f"paths: coupling outcome {run.outcome}, "
          f"t1={_nan(run.t1):.4g} t2={_nan(run.t2):.4g}; planar level grew to {ell_end:.3f}")
    return files, EXIT_OK


def cmd_check(cfg: ExperimentConfig, out_dir: Path, workers: int):
    """Cross-module battery; each row is |value - reference| <= tolerance.

    One-sided conditions are encoded as value = max(0, violation) against
    reference 0 at tolerance 0, so the CSV stays uniform.
    """
    rng = RngStream(cfg.seed, STREAM_CHECK)
    n = cfg.replicates
    dt = cfg.dt
    rows = []

    def row(name: str, value: float, reference: float, tol: float) -> None:
        passed = abs(value - reference) <= tol
        rows.append((name, float(value), float(reference), float(tol), passed))

    def z(est: float, ref: float, se: float) -> float:
        # every z-scored summary here lives in [0, 1], so when a small
        # replicate count produces a degenerate zero SE, fall back to the
        # worst-case binomial scale instead of dividing by zero
        return (est - ref) / (se if se > 0.0 else 0.5 / math.sqrt(n))

    # reflection: transform identity, Monte Carlo agreement, excursion law
    gap = 1.0
    rel = max(
        abs(mgf_closed_form(gap, a).value - mgf_quadrature(0.5 * gap, a))
        / mgf_closed_form(gap, a).value
        for a in (0.25, 1.0, 4.0)
    )
    row("mgf_identity_relerr", rel, 0.0, 1e-8)

    start = CouplingConfig(1.0, 1.0, 0.0, 0.0)
    mc = rao_blackwell_mgf(rng.substream(0), start, 1.0, n, dt, workers=workers)
    closed = mgf_closed_form(start.gap, 1.0).value
    row("mgf_mc_z", z(mc.estimate, closed, mc.standard_error), 0.0, 4.0)

    phat, pse = estimate_m1_tail(rng.substream(1), 0.5, 0.5, n, dt, workers=workers)
    row("m1_tail_z", z(phat, m1_tail(0.5, 0.5), pse), 0.0, 4.0)

    # maximal: mass, tail value, and internal overlap consistency
    law = ShiftedJointLaw(0.0, 0.0, 1.0)
    row("joint_mass", joint_cdf(40.0, 40.0, law), 1.0, 1e-6)
    row("sup_tail_abs_err",
        abs((1.0 - joint_cdf(1.0, 1.0, law)) - 0.31731050786291415), 0.0, 1e-6)
    ov = overlap_integral(start, 1.0)
    row("overlap_tv_identity", abs(ov.coupling_prob + ov.tv - 1.0), 0.0, 1e-8)
    est = estimate_coupling_cdf(rng.substream(2), start, [1.0], n, dt, workers=workers)
    margin = (ov.coupling_prob - float(est.cdf[0])) / float(est.se[0])
    row("overlap_margin_short", max(0.0, 3.0 - margin), 0.0, 0.0)

    # levy transform: simulated supremum tail against the closed tail
    _, s_end = sample_levy_endpoints(rng.substream(3), 0.0, 0.0, 1.0, n)
    emp = float(np.mean(s_end > 1.0))
    se = math.sqrt(max(emp * (1.0 - emp), 1e-12) / n)
    row("levy_tail_z", (emp - 0.31731050786291415) / se, 0.0, 4.0)

    # delayed coupling: carried constant, sign-flip law, linear bound
    row("delay_constant_abs_err",
        abs(delay_bound_constant() - 105.55729027431316), 0.0, 1e-9)
    t_sf, eps_sf = 0.2, 0.05
    fhat, fse = estimate_sign_flip_probability(
        rng.substream(4), t_sf, eps_sf, n, workers=workers)
    row("sign_flip_z", (fhat - sign_flip_probability(t_sf, eps_sf)) / fse, 0.0, 4.0)
    eps = max(cfg.eps_grid)
    sup = sup_distance_experiment(
        rng.substream(5), eps, *cfg.delay_start, dt_cap=dt, n=n, workers=workers)
    row("delay_bound_slack",
        max(0.0, sup.mean_sup_sq - delay_bound_constant() * eps - 3.0 * sup.se),
        0.0, 0.0)

    # planar diffusion: step identity, level monotonicity, switch protection
    rep = bkr_invariant_report(rng.substream(6), 1.0, 0.5, dt, 2.0, 64, workers=workers)
    tol_ell = 5.0 * math.sqrt(dt)
    row("bkr_step_identity", float(np.max(rep.identity_err)), 0.0, 0.0)
    row("bkr_ell_backstep",
        max(0.0, -float(np.min(rep.min_ell_step)) - tol_ell), 0.0, 0.0)
    row("bkr_ell_floor",
        max(0.0, 2.0 * rep.h - tol_ell - float(np.min(rep.min_ell))), 0.0, 0.0)
    row("bkr_switch_violations", float(np.sum(rep.switch_violations)), 0.0, 0.0)

    stats = sample_variant_couplings(
        rng.substream(7), tuple(cfg.bkr_start), tuple(cfg.bkr_start_tilde), dt,
        200, horizon=1e12, growth=1.02, workers=workers)
    row("variant_uncoupled", float(200 - np.sum(stats.coupled)), 0.0, 0.0)
    row("variant_domination_bad", float(200 - np.sum(stats.dom_ok)), 0.0, 0.0)
    row("variant_post_t1_err", float(np.max(stats.post_t1_err)), 0.0, 0.0)

    # drift diagnostic and worker invariance
    u0, v0 = PHI_CHECK_START
    refl = phi_drift(rng.substream(8), u0, v0, PHI_CHECK_HORIZON, PHI_CHECK_N,
                     "reflection", workers=workers)
    sync = phi_drift(rng.substream(9), u0, v0, PHI_CHECK_HORIZON, PHI_CHECK_N,
                     "synchronized", workers=workers)
    row("phi_reflection_z", refl.drift / refl.se, 0.0, 3.0)
    row("phi_sync_margin", max(0.0, sync.drift / sync.se + 3.0), 0.0, 0.0)
    again = phi_drift(rng.substream(8), u0, v0, PHI_CHECK_HORIZON, PHI_CHECK_N,
                      "reflection", workers=workers + 3)
    row("workers_invariance", abs(refl.drift - again.drift), 0.0, 0.0)

    write_csv(out_dir / "check.csv", CHECK_COLUMNS, rows)
    n_bad = sum(1 for r in rows if not r[4])
    for r in rows:
        mark = "ok  " if r[4] else "FAIL"
        print(f"  {mark} {r[0]:<24} value={r[1]:.6g} ref={r[2]:.6g} tol={r[3]:.3g}")
    print(f"check: {len(rows) - n_bad}/{len(rows)} rows passed")
    return ["check.csv"], EXIT_OK if n_bad == 0 else EXIT_CHECK


COMMANDS = {
    "mgf": cmd_mgf,
    "maximal-compare": cmd_maximal_compare,
    "delay-demo": cmd_delay_demo,
    "bkr": cmd_bkr,
    "paths": cmd_paths,
    "check": cmd_check,
}

_SCHEMAS = {
    "mgf": "mgf.csv: " + ", ".join(MGF_COLUMNS),
    "maximal-compare": "maximal.csv: " + ", ".join(MAXIMAL_COLUMNS),
    "delay-demo": "delay.csv: " + ", ".join(DELAY_COLUMNS),
    "bkr": ("bkr_runs.csv: " + ", ".join(BKR_RUN_COLUMNS)
            + "; bkr_path.csv: " + ", ".join(BKR_PATH_COLUMNS)),
    "paths": "paths.csv: " + ", ".join(PATHS_COLUMNS),
    "check": "check.csv: " + ", ".join(CHECK_COLUMNS),
}

_HELP = {
    "mgf": "Coupling-time transform: closed form, quadrature and Monte Carlo "
           "per alpha in alpha_grid.",
    "maximal-compare": "Immersed coupling probability vs the matched-law "
                       "ceiling over t_grid, with the margin in SE units.",
    "delay-demo": "Mean squared sup-distance of the delayed coupling per eps "
                  "in eps_grid, against the linear bound.",
    "bkr": "Staged couplings of the planar diffusion: one ledger row per "
           "run, one sampled pair of paths, one region diagram.",
    "paths": "A single reflect-then-synchronize sample path and a planar "
             "region diagram, for eyeballing.",
    "check": "Deterministic cross-module battery; exits 4 if any row fails. "
             "Floats in all CSV output carry 17 significant digits.",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coupletime",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"coupletime {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(
            name,
            help=_HELP[name],
            description=_HELP[name] + "\n\nOutput schema -> " + _SCHEMAS[name],
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.add_argument("--config", metavar="PATH", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--workers", type=int, default=1,
                       help="thread count; affects wall clock only, never results")
        p.add_argument("--out", metavar="DIR",
                       help="output directory (COUPLETIME_OUT overrides)")
        if name == "mgf":
            p.add_argument("--alpha", type=float, action="append", metavar="A",
                           help="override alpha_grid (repeatable)")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise InvalidParameterError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidParameterError(f"config is not valid JSON: {exc}") from exc
        cfg = ExperimentConfig.from_dict(data)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "alpha", None):
        cfg = replace(cfg, alpha_grid=tuple(args.alpha))
    cfg.validate()
    return cfg


def resolve_out_dir(args: argparse.Namespace, cfg: ExperimentConfig) -> Path:
    out = os.environ.get("COUPLETIME_OUT") or args.out or cfg.output_dir
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        out_dir = resolve_out_dir(args, cfg)
        if args.workers < 1:
            raise InvalidParameterError(f"workers must be >= 1, got {args.workers}")
        t0 = time.monotonic()
        files, code = COMMANDS[args.command](cfg, out_dir, args.workers)
        manifest = RunManifest(
            config_hash=cfg.config_hash(),
            version=__version__,
            wall_clock_s=time.monotonic() - t0,
            outputs={name: _sha256_file(out_dir / name) for name in files},
        )
        manifest.write(out_dir)
        return code
    except (InvalidParameterError, InvalidStateError, InvalidGridError) as exc:
        print(f"coupletime: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailureError, CalibrationFailureError, NonTerminationError,
            IncompletePathError) as exc:
        print(f"coupletime: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
