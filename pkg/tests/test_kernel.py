"""Exact-in-law bridge primitives: maxima, crossings, local time, passage MGF.

Each sampler has a closed conditional law, so besides spot values we can
integrate out the endpoint and compare against unconditional Brownian
formulas (dual-route checks with independent oracles).
"""

import math

import numpy as np
import pytest
from scipy import stats

from coupletime import InvalidGridError, InvalidParameterError, RngStream
from coupletime.streams import (
    bridge_local_time,
    bridge_maximum,
    bridge_maximum_from_uniform,
    bridge_minimum,
    crossing_probability,
    first_passage_mgf,
    local_time_from_uniform,
)


def test_bridge_maximum_median_and_ks():
    # For a bridge from 0 to 0 over h=1, P(M >= m) = exp(-2 m^2).
    rng = RngStream(11, 0)
    n = 100_000
    zeros = np.zeros(n)
    m = bridge_maximum(rng, zeros, zeros, 1.0)
    assert m.shape == (n,)
    assert np.all(m >= 0.0)
    median_exact = math.sqrt(math.log(2.0) / 2.0)
    assert abs(np.median(m) - median_exact) < 5e-3
    stat = stats.kstest(m, lambda x: 1.0 - np.exp(-2.0 * x * x)).statistic
    assert stat < 0.01


def test_bridge_maximum_dominates_endpoints():
    rng = RngStream(11, 1)
    x0 = rng.normal(500)
    x1 = x0 + rng.normal(500)
    m = bridge_maximum(rng, x0, x1, 0.7)
    assert np.all(m >= np.maximum(x0, x1))


def test_bridge_maximum_degenerates_with_step():
    rng = RngStream(11, 2)
    m = bridge_maximum(rng, 0.2, 0.5, 1e-12)
    assert m >= 0.5
    assert m - 0.5 < 1e-9


def test_bridge_maximum_from_uniform_is_quantile():
    # u = 1/2 recovers the median of the conditional law.
    m = bridge_maximum_from_uniform(0.0, 0.0, 1.0, 0.5)
    assert m == pytest.approx(math.sqrt(math.log(2.0) / 2.0), rel=1e-12)
    # P(M >= m) at the returned point reproduces u.
    u = 0.137
    m = bridge_maximum_from_uniform(0.3, -0.1, 0.8, u)
    back = math.exp(-2.0 * (m - 0.3) * (m + 0.1) / 0.8)
    assert back == pytest.approx(u, rel=1e-12)


def test_bridge_minimum_mirrors_maximum():
    a = bridge_minimum(RngStream(12, 0), 0.0, 0.0, 1.0)
    b = bridge_maximum(RngStream(12, 0), 0.0, 0.0, 1.0)
    assert a == -b
    rng = RngStream(12, 1)
    x0 = rng.normal(400)
    x1 = x0 + rng.normal(400)
    lo = bridge_minimum(rng, x0, x1, 0.5)
    assert np.all(lo <= np.minimum(x0, x1))


def test_bridge_maximum_rejects_bad_step():
    with pytest.raises(InvalidGridError):
        bridge_maximum(RngStream(12, 2), 0.0, 0.0, 0.0)
    with pytest.raises(InvalidGridError):
        bridge_minimum(RngStream(12, 2), 0.0, 0.0, -1.0)


def test_crossing_probability_values():
    # Endpoints straddling the level, or sitting on it, cross surely.
    assert crossing_probability(-1.0, 1.0, 0.0, 1.0) == 1.0
    assert crossing_probability(0.0, 0.7, 0.0, 1.0) == 1.0
    # Same side: exp(-2 (l-x0)(l-x1)/h).
    p = crossing_probability(0.5, 0.5, 0.0, 1.0)
    assert p == pytest.approx(math.exp(-0.5), rel=1e-12)
    p = crossing_probability(1.0, 2.0, 0.5, 2.0)
    assert p == pytest.approx(math.exp(-2.0 * 0.5 * 1.5 / 2.0), rel=1e-12)
    assert 0.0 <= crossing_probability(8.0, 8.0, 0.0, 1e-4) <= 1.0


def test_crossing_probability_integrates_to_hitting_probability():
    # Averaging the conditional crossing probability over the endpoint law
    # must give the unconditional hitting probability 2 Phi(-|x0|/sqrt(h)).
    rng = RngStream(13, 0)
    n = 200_000
    x0, h = 0.7, 1.0
    x1 = x0 + rng.normal(n) * math.sqrt(h)
    p = crossing_probability(x0, x1, 0.0, h)
    target = 2.0 * stats.norm.cdf(-x0 / math.sqrt(h))
    se = p.std(ddof=1) / math.sqrt(n)
    assert abs(p.mean() - target) < 3.0 * se


def test_local_time_positive_iff_bridge_crosses():
    # The u-threshold for {L > 0} is exactly the crossing probability.
    x0, x1, h = 0.4, 0.9, 1.3
    p = crossing_probability(x0, x1, 0.0, h)
    u = np.array([p * 0.5, p * 0.999, min(1.0 - 1e-12, p * 1.001), 0.9999])
    lt = local_time_from_uniform(x0, x1, h, u)
    assert lt[0] > 0.0 and lt[1] > 0.0
    assert lt[2] == 0.0 and lt[3] == 0.0


def test_local_time_mean_matches_tanaka():
    # E[L_h] = E|B_h| - |x0| with B_h ~ N(x0, h), by Tanaka's formula.
    rng = RngStream(13, 1)
    n = 200_000
    x0, h = 0.3, 0.8
    x1 = x0 + rng.normal(n) * math.sqrt(h)
    lt = bridge_local_time(rng, np.full(n, x0), x1, h)
    s = math.sqrt(h)
    z = x0 / s
    mean_abs = x0 * (2.0 * stats.norm.cdf(z) - 1.0) + 2.0 * s * stats.norm.pdf(z)
    target = mean_abs - abs(x0)
    se = lt.std(ddof=1) / math.sqrt(n)
    assert abs(lt.mean() - target) < 3.0 * se


def test_local_time_is_nonnegative_and_step_checked():
    rng = RngStream(13, 2)
    x0 = rng.normal(1000)
    x1 = x0 + rng.normal(1000)
    lt = bridge_local_time(rng, x0, x1, 0.25)
    assert np.all(lt >= 0.0)
    with pytest.raises(InvalidGridError):
        bridge_local_time(rng, 0.0, 1.0, 0.0)


def test_first_passage_mgf_values():
    assert first_passage_mgf(0.0, 3.0) == 1.0
    assert first_passage_mgf(2.5, 0.0) == 1.0
    assert first_passage_mgf(1.0, 0.5) == pytest.approx(math.exp(-1.0), rel=1e-14)
    out = first_passage_mgf(np.array([0.0, 1.0, 2.0]), 0.5)
    assert out.shape == (3,)
    assert out[0] == 1.0
    assert out[2] == pytest.approx(math.exp(-2.0), rel=1e-14)


def test_first_passage_mgf_rejects_negative_arguments():
    with pytest.raises(InvalidParameterError):
        first_passage_mgf(-0.1, 1.0)
    with pytest.raises(InvalidParameterError):
        first_passage_mgf(1.0, -0.5)
