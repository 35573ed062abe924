"""Chart between (|X|, L) and (B, S), and exact-in-law (B, S) skeletons."""

import io
import math

import numpy as np
import pytest
from scipy import stats

from coupletime import InvalidParameterError, InvalidStateError, RngStream, TimeGrid
from coupletime.levy import (
    DiffusionState,
    LevyPair,
    from_levy,
    sample_levy_endpoints,
    simulate_levy_path,
    to_levy,
    write_path_csv,
)
from coupletime.maximal import ShiftedJointLaw

from law_oracles import chi_square_joint

P_SUP_ABOVE_ONE = 0.31731050786291415  # 2 * Phi(-1), reflection principle


def test_to_levy_values():
    assert to_levy(DiffusionState(0.0, 0.0)) == LevyPair(0.0, 0.0)
    assert to_levy(DiffusionState(1.0, 1.0)) == LevyPair(0.0, 1.0)
    assert to_levy(DiffusionState(-2.0, 3.0)) == LevyPair(1.0, 3.0)


def test_from_levy_values_and_roundtrip():
    assert from_levy(LevyPair(0.0, 0.0), +1) == DiffusionState(0.0, 0.0)
    assert from_levy(LevyPair(0.0, 1.0), -1) == DiffusionState(-1.0, 1.0)
    rng = RngStream(21, 0)
    for _ in range(50):
        # Dyadic coordinates make s - (s - b) exact, so the round trip is
        # bit-for-bit; general floats agree to within one rounding step.
        b = round(float(rng.normal()) * 256.0) / 256.0
        s = max(b, 0.0) + abs(round(float(rng.normal()) * 256.0)) / 256.0
        sign = -1 if rng.uniform() < 0.5 else 1
        p = LevyPair(b, s)
        assert to_levy(from_levy(p, sign)) == p
    for _ in range(50):
        b = float(rng.normal())
        s = max(b, 0.0) + abs(float(rng.normal()))
        p = LevyPair(b, s)
        q = to_levy(from_levy(p, +1))
        assert q.s == p.s
        assert q.b == pytest.approx(p.b, rel=1e-12, abs=1e-15)
    # A pair carrying an older floor keeps the (b, s) chart but refreshes
    # the floor on the return trip.
    p = LevyPair(0.5, 2.0, s_floor=1.0)
    q = to_levy(from_levy(p, -1))
    assert (q.b, q.s, q.s_floor) == (0.5, 2.0, 2.0)


def test_state_and_pair_validation():
    with pytest.raises(InvalidStateError):
        DiffusionState(0.0, -1e-9)
    with pytest.raises(InvalidStateError):
        DiffusionState(math.inf, 0.0)
    with pytest.raises(InvalidStateError):
        LevyPair(1.0, 0.5)
    with pytest.raises(InvalidStateError):
        LevyPair(0.0, 1.0, s_floor=2.0)
    with pytest.raises(InvalidParameterError):
        from_levy(LevyPair(0.0, 1.0), 0)


def test_simulate_levy_path_invariants():
    rng = RngStream(21, 1)
    grid = TimeGrid(0.0, 1e-3, 2000)
    path = simulate_levy_path(rng, 0.3, 0.5, grid)
    assert len(path) == 2001
    assert path.s_floor == 0.5
    assert np.all(np.diff(path.s) >= 0.0)
    assert np.all(path.s[1:] >= np.maximum(path.s[:-1], path.b[1:]))
    assert np.all(path.s - path.b >= 0.0)
    pr = path.pair(1200)
    assert pr.s_floor == 0.5 and pr.s >= pr.b


def test_simulate_levy_path_rejects_floor_below_driver():
    with pytest.raises(InvalidStateError):
        simulate_levy_path(RngStream(21, 2), 1.0, 0.5, TimeGrid(0.0, 0.1, 10))


def test_high_floor_dominates():
    rng = RngStream(21, 3)
    grid = TimeGrid(0.0, 0.01, 100)
    for i in range(20):
        path = simulate_levy_path(rng.substream(i), 0.0, 100.0, grid)
        assert np.all(path.s == 100.0)


def test_supremum_tail_at_unit_time():
    rng = RngStream(21, 4)
    n = 20_000
    _, s = sample_levy_endpoints(rng, 0.0, 0.0, 1.0, n)
    phat = float(np.mean(s > 1.0))
    se = math.sqrt(phat * (1.0 - phat) / n)
    assert abs(phat - P_SUP_ABOVE_ONE) < 3.0 * se


def test_endpoint_joint_law_matches_closed_density():
    rng = RngStream(21, 5)
    n = 20_000
    b, s = sample_levy_endpoints(rng, 0.0, 0.0, 1.0, n)
    law = ShiftedJointLaw(0.0, 0.0, 1.0)
    b_edges = np.array([-2.5, -1.6, -1.0, -0.6, -0.3, 0.0, 0.3, 0.6, 1.0, 1.6])
    s_edges = np.array([0.0, 0.15, 0.35, 0.6, 0.9, 1.25, 1.7, 2.4])
    _, pvalue = chi_square_joint(b, s, law, b_edges, s_edges)
    assert pvalue > 1e-3


def test_sample_levy_endpoints_validation():
    rng = RngStream(21, 6)
    with pytest.raises(InvalidStateError):
        sample_levy_endpoints(rng, 1.0, 0.0, 1.0, 10)
    with pytest.raises(InvalidParameterError):
        sample_levy_endpoints(rng, 0.0, 0.0, 0.0, 10)
    with pytest.raises(InvalidParameterError):
        sample_levy_endpoints(rng, 0.0, 0.0, 1.0, 10, n_steps=0)


def test_write_path_csv_roundtrips_at_full_precision():
    rng = RngStream(21, 7)
    path = simulate_levy_path(rng, 0.0, 0.0, TimeGrid(0.0, 0.125, 8))
    buf = io.StringIO()
    write_path_csv(path, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,b,s"
    assert len(lines) == 10
    for k, line in enumerate(lines[1:]):
        t, b, s = (float(v) for v in line.split(","))
        assert t == path.t[k] and b == path.b[k] and s == path.s[k]
