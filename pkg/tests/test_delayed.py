"""Delay kernel, delayed coupling solver, and the staged concatenation."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from coupletime import (
    CalibrationFailureError,
    InvalidGridError,
    InvalidParameterError,
    NonTerminationError,
    RngStream,
)
from coupletime.delayed import (
    adaptive_delay_grid,
    calibrate_stage_epsilons,
    concatenated_batch,
    concatenated_coupling,
    delay_bound_constant,
    estimate_sign_flip_probability,
    psi,
    sigma,
    sign_flip_probability,
    sign_flip_probability_from_delay,
    solve_delayed_coupling,
    sup_distance_experiment,
    uniform_delay_grid,
)

DELAY_BOUND = 105.55729027431316  # delay_bound_constant(), pinned


def test_psi_values_and_continuity():
    assert psi(0.0, 0.1) == pytest.approx(1e-3, rel=1e-14)
    assert psi(0.05, 0.1) == pytest.approx(1e-3, rel=1e-14)  # flat zone
    assert psi(0.1, 0.1) == pytest.approx(1e-3, rel=1e-14)  # continuous at eps
    assert psi(1.0, 0.1) == pytest.approx(1e-3 / 1.9**3, rel=1e-14)
    out = psi(np.array([0.0, 0.1, 1.0]), 0.1)
    assert out.shape == (3,)
    ts = np.linspace(0.0, 5.0, 400)
    assert np.all(np.diff(psi(ts, 0.1)) <= 0.0)  # nonincreasing
    with pytest.raises(InvalidParameterError):
        psi(1.0, 0.5)
    with pytest.raises(InvalidParameterError):
        psi(1.0, 0.0)
    with pytest.raises(InvalidParameterError):
        psi(-0.1, 0.1)


def test_sigma_values_and_monotonicity():
    assert sigma(0.0, 0.1) == 0.0
    assert sigma(5e-4, 0.1) == 0.0  # clamped while psi exceeds t
    assert sigma(1.0, 0.1) == pytest.approx(1.0 - 1e-3 / 1.9**3, rel=1e-14)
    ts = np.linspace(0.0, 3.0, 1000)
    sg = sigma(ts, 0.1)
    assert np.all(np.diff(sg) >= 0.0)
    assert np.all(sg[1:] < ts[1:])  # strictly lagged for t > 0


def test_sign_flip_probability_values():
    assert sign_flip_probability_from_delay(1.0, 0.5) == pytest.approx(0.25, rel=1e-14)
    with pytest.raises(InvalidParameterError):
        sign_flip_probability_from_delay(1.0, 0.0)
    with pytest.raises(InvalidParameterError):
        sign_flip_probability_from_delay(0.5, 0.5)
    # the configured kernel decays, so flips become rare at long times
    assert sign_flip_probability(1e6, 0.1) < 1e-4
    assert sign_flip_probability(1.0, 0.2) == pytest.approx(
        math.atan(math.sqrt(psi(1.0, 0.2) / (1.0 - psi(1.0, 0.2)))) / math.pi,
        rel=1e-14,
    )
    with pytest.raises(InvalidParameterError):
        sign_flip_probability(1e-4, 0.1)  # inside the clamped zone


def test_sign_flip_monte_carlo():
    p_closed = sign_flip_probability(1.0, 0.2)
    p, se = estimate_sign_flip_probability(RngStream(51, 2), 1.0, 0.2, 20_000)
    assert abs(p - p_closed) < 3.0 * se
    with pytest.raises(InvalidParameterError):
        estimate_sign_flip_probability(RngStream(51, 2), 1e-4, 0.1, 100)


def test_delay_bound_constant_pinned_and_reproduced():
    c = delay_bound_constant()
    assert c == pytest.approx(DELAY_BOUND, abs=1e-9)
    # independent evaluation after the shift v = u + 1
    val, err = quad(lambda v: 1.0 / math.sqrt(4.0 * v**3 - 1.0), 1.0, np.inf)
    assert err < 1e-8
    assert c == pytest.approx(64.0 * (1.0 + 2.0 / math.pi * val), abs=1e-8)


def test_flip_mass_stays_below_bound_scale():
    # The integrated flip probability over the kernel tail, in units of
    # eps, must stay below the non-unit share C/64 - 1 of the bound
    # constant; the arctan form is what keeps this uniform in eps.
    cap = DELAY_BOUND / 64.0 - 1.0
    for eps in (0.05, 0.1, 0.2):
        val, err = quad(
            lambda t: sign_flip_probability(t, eps), eps, np.inf, limit=400
        )
        assert err < 1e-6
        assert 0.0 < val / eps < cap


def test_uniform_delay_grid_structure_and_refusal():
    ts, js = uniform_delay_grid(0.1, 1e-3, 0.1)
    assert ts[0] == 0.0 and ts[-1] == pytest.approx(0.1, rel=1e-12)
    assert np.allclose(np.diff(ts), 1e-3)
    assert np.all(js <= np.arange(len(ts) - 1))  # causality
    # js floors the lagged clock onto the grid from below
    assert np.all(ts[js] <= sigma(ts[1:], 0.1) + 1e-12)
    # far past eps the kernel drops below dt and the scheme would need
    # signs from the future
    with pytest.raises(InvalidGridError):
        uniform_delay_grid(0.1, 1e-3, 1.0)
    with pytest.raises(InvalidGridError):
        uniform_delay_grid(0.1, 0.0, 1.0)
    with pytest.raises(InvalidGridError):
        uniform_delay_grid(0.1, 0.2, 0.1)


def test_adaptive_delay_grid_follows_kernel():
    eps, horizon, cap = 0.1, 1.0, 1e-3
    ts, js = adaptive_delay_grid(eps, horizon, cap)
    assert ts[0] == 0.0 and ts[-1] == horizon
    steps = np.diff(ts)
    assert np.all(steps > 0.0)
    assert np.all(steps <= cap + 1e-15)
    assert np.all(sigma(ts[1:], eps) <= ts[:-1] + 1e-12)
    assert np.all(js <= np.arange(len(ts) - 1))
    # the step tracks the kernel, so the grid undercuts the uniform grid
    # pinned at the kernel minimum (the saving grows with the horizon)
    assert len(ts) < horizon / psi(horizon, eps)
    with pytest.raises(InvalidGridError):
        adaptive_delay_grid(0.1, 0.0, 1e-3)
    with pytest.raises(InvalidGridError):
        adaptive_delay_grid(0.1, 1.0, -1e-3)


def test_solve_delayed_coupling_refuses_coarse_grid():
    with pytest.raises(InvalidGridError):
        solve_delayed_coupling(RngStream(52, 0), 0.2, 0.1, 0.0, 0.0, 0.2, 1e-3, 2.0)
    with pytest.raises(InvalidParameterError):
        solve_delayed_coupling(RngStream(52, 0), math.nan, 0.1, 0.0, 0.0, 0.2, 1e-3, 1.0)


def test_solve_delayed_coupling_coupled_run():
    run = solve_delayed_coupling(RngStream(52, 0), 0.2, 0.1, 0.0, 0.0, 0.2, 1e-3, 1.0)
    assert run.coupled and run.t1 is not None
    assert 0.0 < run.t1 <= run.t2
    assert run.eps == 0.2
    n = len(run.t)
    assert all(len(a) == n for a in (run.x, run.l, run.xh, run.lh, run.bref, run.j))
    # every step consumed only signs from strictly earlier grid points
    assert np.all(run.sign_access <= np.arange(len(run.sign_access)))
    # control switches once, at t1
    assert run.j[0] == -1 and run.j[-1] == 1
    assert np.all(np.diff(run.j) >= 0)
    switch = int(np.argmax(run.j == 1))
    assert run.t[switch] == pytest.approx(run.t1, rel=1e-12)
    # local times never decrease; the driver chart is consistent
    assert np.all(np.diff(run.l) >= 0.0) and np.all(np.diff(run.lh) >= 0.0)
    assert np.array_equal(run.b, run.l - np.abs(run.x))
    # the reference moves with the base driver (mirrored, then together)
    assert np.allclose(np.abs(np.diff(run.bref)), np.abs(np.diff(run.b)), atol=1e-12)
    assert np.max(np.abs(run.bh - run.bref)) == run.sup_distance


def test_solve_delayed_coupling_horizon_exhausted():
    run = solve_delayed_coupling(RngStream(52, 5), 0.2, 0.1, 0.0, 0.0, 0.2, 1e-3, 1.0)
    assert not run.coupled and run.t2 is None
    assert len(run.t) == 1001
    assert run.sup_distance > 0.0


def test_sup_distance_experiment_bound():
    eps = 0.1
    res = sup_distance_experiment(RngStream(53, 0), eps, 0.25, 0.5, 0.5, 0.25, n=1000)
    assert res.eps == eps and res.n == 1000
    assert 0.0 < res.coupled_fraction <= 1.0
    assert res.se > 0.0
    assert res.mean_sup_sq + 3.0 * res.se < delay_bound_constant() * eps


def test_calibrate_stage_epsilons_smoke():
    cal = calibrate_stage_epsilons(RngStream(55, 0), 2, 1e-3, n_replicates=4000)
    assert len(cal.epsilons) == 2 and len(cal.bootstrap_se) == 2
    assert 0.0 < cal.epsilons[1] < cal.epsilons[0] < 0.5
    assert all(se > 0.0 and math.isfinite(se) for se in cal.bootstrap_se)
    assert cal.n_samples == 4000


def test_calibrate_stage_epsilons_validation():
    rng = RngStream(55, 1)
    with pytest.raises(InvalidParameterError):
        calibrate_stage_epsilons(rng, 0, 1e-3)
    with pytest.raises(InvalidParameterError):
        calibrate_stage_epsilons(rng, 1, 1e-3, safety=0.0)
    with pytest.raises(CalibrationFailureError):
        calibrate_stage_epsilons(rng, 3, 1e-3, n_replicates=100)


def test_concatenated_batch_ledgers():
    merge_tol = 0.01
    leds = concatenated_batch(
        RngStream(54, 1),
        (0.1, 0.1),
        (0.05, 0.05),
        1e-3,
        4,
        epsilons=[0.2, 0.1, 0.05, 0.05],
        stage1_horizon=0.5,
        merge_tol=merge_tol,
        restart_cap=300,
    )
    assert len(leds) == 4
    for led in leds:
        assert led.coupled
        assert led.stages, "successful attempt must carry stage records"
        assert led.total_stages_run >= len(led.stages)
        assert led.restart_count >= 0
        for rec in led.stages:
            assert not rec.defaulted
            assert rec.budget == (0.5 if rec.n == 1 else 4.0 ** (-rec.n))
            assert 0.0 < rec.duration <= rec.budget + 1e-12
            assert rec.epsilon == [0.2, 0.1, 0.05, 0.05][rec.n - 1]
        assert led.stages[-1].achieved_gap <= merge_tol
        # stage numbering is consecutive from 1
        assert [rec.n for rec in led.stages] == list(
            range(1, len(led.stages) + 1)
        )
        assert led.total_time == pytest.approx(
            sum(rec.duration for rec in led.stages), rel=1e-12
        )
    # the tail budgets form the convergent series sum 4^-n <= 1/3
    assert sum(4.0 ** (-n) for n in range(2, 6)) < 1.0 / 3.0


def test_concatenated_batch_restart_cap():
    with pytest.raises(NonTerminationError):
        concatenated_batch(
            RngStream(54, 2),
            (0.1, 0.1),
            (0.05, 0.05),
            1e-3,
            1,
            epsilons=[0.2],
            stage1_horizon=0.25,
            merge_tol=0.0,  # unreachable: forces defaults until the cap
            restart_cap=2,
        )


def test_concatenated_batch_validation():
    rng = RngStream(54, 3)
    with pytest.raises(InvalidParameterError):
        concatenated_batch(rng, (0.1, 0.1), (0.05, 0.05), 0.0, 1, epsilons=[0.2])
    with pytest.raises(InvalidParameterError):
        concatenated_batch(rng, (0.1, 0.1), (0.05, 0.05), 1e-3, 0, epsilons=[0.2])
    with pytest.raises(InvalidParameterError):
        concatenated_batch(rng, (0.1, 0.1), (0.05, 0.05), 1e-3, 1, epsilons=[])
    with pytest.raises(InvalidParameterError):
        concatenated_batch(rng, (0.1, 0.1), (0.05, 0.05), 1e-3, 1, epsilons=[0.7])


def test_concatenated_coupling_single_run():
    led = concatenated_coupling(
        RngStream(54, 4),
        (0.1, 0.1),
        (0.05, 0.05),
        1e-3,
        epsilons=[0.2, 0.1],
        stage1_horizon=0.5,
        merge_tol=0.3,
    )
    assert led.coupled and led.stages[-1].achieved_gap <= 0.3
