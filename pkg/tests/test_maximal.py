"""Joint (B, S) law, overlap mass, and the maximal-coupling envelope.

The closed joint law is validated by independent scipy quadrature of its
own pieces (masses must assemble to 1) and the overlap results are pinned
against values computed once from that law, then compared with the
two-stage construction, which the envelope must dominate.
"""

import math

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import dblquad, quad

from coupletime import InvalidParameterError, InvalidStateError, RngStream
from coupletime.maximal import (
    ShiftedJointLaw,
    continuous_mass,
    joint_cdf,
    joint_density,
    line_mass_density,
    maximal_mgf,
    overlap_integral,
)
from coupletime.reflection import (
    CouplingConfig,
    estimate_coupling_cdf,
    mgf_closed_form,
)

CFG = CouplingConfig(1.0, 1.0, 0.0, 0.0)
OVERLAP_AT_1 = 0.2935846969908794  # overlap_integral(CFG, 1), pinned
MAXIMAL_MGF_AT_1 = 0.22647140703783383  # maximal_mgf(CFG, 1), pinned
P_SUP_ABOVE_ONE = 0.31731050786291415  # 2 * Phi(-1)


def test_law_validation():
    with pytest.raises(InvalidStateError):
        ShiftedJointLaw(1.0, 0.5, 1.0)
    with pytest.raises(InvalidParameterError):
        ShiftedJointLaw(0.0, 0.0, 0.0)
    with pytest.raises(InvalidStateError):
        ShiftedJointLaw(math.inf, math.inf, 1.0)


def test_joint_density_support_and_value():
    law = ShiftedJointLaw(0.0, 0.0, 1.0)
    assert joint_density(0.0, -0.1, law) == 0.0
    assert joint_density(0.6, 0.5, law) == 0.0
    # reflection-principle density written through the normal pdf
    b, s = -0.3, 0.4
    w = 2.0 * s - b
    assert joint_density(b, s, law) == pytest.approx(
        2.0 * w * stats.norm.pdf(w), rel=1e-12
    )
    shifted = ShiftedJointLaw(0.7, 0.9, 2.0)
    assert joint_density(0.5, 0.8, shifted) == 0.0  # below the floor
    assert joint_density(0.5, 1.1, shifted) > 0.0


def test_masses_assemble_to_one():
    # continuous part + line atom integrate to total mass 1
    law = ShiftedJointLaw(0.0, 0.5, 1.0)
    cont, cerr = dblquad(
        lambda b, s: joint_density(b, s, law),
        law.s0,
        law.s0 + 9.0,
        lambda s: 2.0 * law.s0 - s - 9.0,
        lambda s: s,
    )
    line, lerr = quad(lambda b: line_mass_density(b, law), law.s0 - 9.0, law.s0)
    assert cont == pytest.approx(continuous_mass(law), abs=1e-7)
    assert line == pytest.approx(1.0 - continuous_mass(law), abs=1e-8)
    assert cont + line == pytest.approx(1.0, abs=1e-6)
    assert cerr + lerr < 1e-7


def test_line_mass_vanishes_without_floor_gap():
    law = ShiftedJointLaw(0.0, 0.0, 1.0)
    assert line_mass_density(-0.5, law) == 0.0
    law = ShiftedJointLaw(0.0, 0.5, 1.0)
    assert line_mass_density(0.7, law) == 0.0  # beyond the barrier
    assert line_mass_density(0.0, law) > 0.0


def test_supremum_tail_closed_form():
    law = ShiftedJointLaw(0.0, 1.0, 1.0)
    assert continuous_mass(law) == pytest.approx(P_SUP_ABOVE_ONE, rel=1e-12)


def test_joint_cdf_monotone_and_consistent():
    law = ShiftedJointLaw(0.0, 0.3, 1.0)
    assert joint_cdf(0.0, 0.2, law) == 0.0  # s below the floor
    grid = np.linspace(-1.5, 2.5, 9)
    vals = np.array([[joint_cdf(b, s, law) for b in grid] for s in grid])
    assert np.all(np.diff(vals, axis=0) >= -1e-12)
    assert np.all(np.diff(vals, axis=1) >= -1e-12)
    assert joint_cdf(40.0, 40.0, law) == pytest.approx(1.0, abs=1e-12)
    # rectangle probability agrees with direct integration of both pieces
    b_hi, s_hi = 0.2, 0.9
    cont, _ = dblquad(
        lambda b, s: joint_density(b, s, law),
        law.s0,
        s_hi,
        lambda s: 2.0 * law.s0 - s - 9.0,
        lambda s: min(b_hi, s),
    )
    line, _ = quad(lambda b: line_mass_density(b, law), law.s0 - 9.0, b_hi)
    assert joint_cdf(b_hi, s_hi, law) == pytest.approx(cont + line, abs=1e-6)


def test_overlap_of_identical_laws_is_full():
    res = overlap_integral(CouplingConfig(1.0, 1.0, 1.0, 1.0), 1.0)
    assert res.coupling_prob == pytest.approx(1.0, abs=2e-6)
    assert res.tv == 1.0 - res.coupling_prob


def test_overlap_vanishes_at_short_horizon():
    res = overlap_integral(CFG, 1e-4)
    assert res.coupling_prob < 1e-8


def test_overlap_pinned_value_and_monotonicity():
    res = overlap_integral(CFG, 1.0)
    assert res.coupling_prob == pytest.approx(OVERLAP_AT_1, abs=1e-8)
    assert res.quadrature_error < 1e-6
    vals = [overlap_integral(CFG, t).coupling_prob for t in (0.5, 1.0, 2.0, 4.0)]
    assert all(v2 > v1 for v1, v2 in zip(vals, vals[1:]))
    with pytest.raises(InvalidParameterError):
        overlap_integral(CFG, 0.0)


def test_overlap_with_shared_floor_counts_line_mass():
    # equal floors above both drivers: the killed laws overlap on the line
    cfg = CouplingConfig(0.5, 1.0, 0.0, 1.0)
    res = overlap_integral(cfg, 1.0)
    assert 0.0 < res.coupling_prob < 1.0
    # dropping the line contribution would lose at least the overlap of the
    # two killed densities at the lower driver
    law1 = ShiftedJointLaw(0.5, 1.0, 1.0)
    law2 = ShiftedJointLaw(0.0, 1.0, 1.0)
    line_only, _ = quad(
        lambda b: min(line_mass_density(b, law1), line_mass_density(b, law2)),
        -8.0,
        1.0,
    )
    assert res.coupling_prob > line_only > 0.0


def test_overlap_dominates_any_construction():
    est = estimate_coupling_cdf(RngStream(41, 0), CFG, (1.0, 2.0), 4000, 1e-3)
    for t, c, se in zip(est.t, est.cdf, est.se):
        assert overlap_integral(CFG, float(t)).coupling_prob > c - 3.0 * se


def test_maximal_mgf_pinned_value_and_domination():
    got = maximal_mgf(CFG, 1.0)
    assert got.value == pytest.approx(MAXIMAL_MGF_AT_1, abs=2e-3)
    assert got.error < 2e-3
    closed = mgf_closed_form(1.0, 1.0).value
    assert got.value - 5.0 * got.error > closed
    # crude lower bound from monotone overlap: value >= e^{-alpha} * overlap(1)
    assert got.value >= math.exp(-1.0) * OVERLAP_AT_1
    assert got.value <= 1.0


def test_maximal_mgf_monotone_in_alpha():
    vals = [maximal_mgf(CFG, a).value for a in (0.5, 1.0, 4.0)]
    assert vals[0] > vals[1] > vals[2] > 0.0
    with pytest.raises(InvalidParameterError):
        maximal_mgf(CFG, 0.0)
