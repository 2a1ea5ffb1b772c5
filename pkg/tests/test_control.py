import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aft.control import (TRACE_HEADER, ControlGains, ControllerState, ControlTarget,
                         SimulatedPlant, angular_weights, control_step, equilibrium_config,
                         random_shape_target, run_closed_loop, tip_to_shape, write_trace_csv)
from aft.kinematics import RobotConfig, tip_position
from aft.sim import CHAMBER_ANGLES, PressureMap

angles = st.floats(-math.pi, math.pi)


# -- angular weighting -----------------------------------------------------

def test_weights_along_first_chamber():
    np.testing.assert_allclose(angular_weights(0.0), [1.0, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(angular_weights(0.0, "rectified-cosine"), [1.0, 0.0, 0.0], atol=1e-15)


@given(angles)
def test_offset_cosine_resultant_is_unit_direction(phi):
    w = angular_weights(phi)
    assert np.all(w >= 0)
    assert np.count_nonzero(w > 1e-12) <= 2
    v = w @ np.column_stack([np.cos(CHAMBER_ANGLES), np.sin(CHAMBER_ANGLES)])
    np.testing.assert_allclose(v, [math.cos(phi), math.sin(phi)], atol=1e-12)


@given(angles)
def test_rectified_cosine_is_biased(phi):
    w = angular_weights(phi, "rectified-cosine")
    assert np.all(w >= 0)
    v = w @ np.column_stack([np.cos(CHAMBER_ANGLES), np.sin(CHAMBER_ANGLES)])
    err = abs(math.remainder(math.atan2(v[1], v[0]) - phi, 2 * math.pi))
    # roughly the right way, but pulled toward the nearest chamber
    assert err < math.pi / 6 + 1e-12


def test_rectified_cosine_bias_example():
    w = angular_weights(1.0, "rectified-cosine")
    v = w @ np.column_stack([np.cos(CHAMBER_ANGLES), np.sin(CHAMBER_ANGLES)])
    assert abs(math.atan2(v[1], v[0]) - 1.0) > 0.05


def test_unknown_weighting():
    with pytest.raises(ValueError):
        angular_weights(0.0, "square")
    with pytest.raises(ValueError):
        ControlGains(weighting="square")


# -- targets ---------------------------------------------------------------

def test_target_validation():
    with pytest.raises(ValueError):
        ControlTarget("shape")
    with pytest.raises(ValueError):
        ControlTarget("shape", shape=(1.0, 0.0), tip=(0, 0, 0.4))
    with pytest.raises(ValueError):
        ControlTarget("shape", shape=(-1.0, 0.0))
    with pytest.raises(ValueError):
        ControlTarget("shape", shape=(1.0, 0.0, 2.0))
    with pytest.raises(ValueError):
        ControlTarget("tip", tip=(0.0, 0.1))
    with pytest.raises(ValueError):
        ControlTarget("tip", shape=(1.0, 0.0))
    with pytest.raises(ValueError):
        ControlTarget("pose", tip=(0, 0, 0.4))


def test_target_roundtrip(rng):
    for t in (random_shape_target(rng), ControlTarget.tip_target([0.01, -0.02, 0.39])):
        assert ControlTarget.from_dict(t.to_dict()) == t


def test_random_shape_target_range(rng):
    for _ in range(50):
        t = random_shape_target(rng)
        assert np.all((t.kappas >= 1.0) & (t.kappas <= 6.0))
        assert np.all(np.abs(t.phis) <= math.pi)


# -- PI law ----------------------------------------------------------------

def _state(integ, gains=ControlGains()):
    return ControllerState(np.array(integ, float), np.zeros(6), gains)


def test_zero_error_keeps_integral():
    est = RobotConfig.from_tuples([(3.0, 0.4, 0.2), (2.0, -1.0, 0.2)])
    target = ControlTarget.shape_target([3.0, 2.0], [0.4, -1.0])
    p, s = control_step(_state([0.1, 0.05]), est, target, dt=0.4)
    np.testing.assert_array_equal(s.integrator, [0.1, 0.05])
    g = ControlGains()
    np.testing.assert_allclose(p[:3], g.ki * 0.1 * angular_weights(0.4), atol=1e-12)


def test_equilibrium_is_stationary():
    pm = PressureMap()
    target = ControlTarget.shape_target([3.0, 2.0], [0.4, -1.0])
    eq = equilibrium_config(target, pm)
    for seg, k, phi in zip(eq.segments, target.kappas, target.phis):
        assert seg.kappa == pytest.approx(k, rel=1e-12)
        assert seg.phi == pytest.approx(phi, abs=1e-12)
    g = ControlGains()
    # integral that sustains the equilibrium pressures with zero error
    state = _state(target.kappas / (pm.kappa_gain * g.ki))
    p, s = control_step(state, eq, target, dt=0.4)
    np.testing.assert_allclose(pm(p).to_params(), eq.to_params(), atol=1e-12)
    # the estimate matches the target up to round-off
    np.testing.assert_allclose(s.integrator, state.integrator, atol=1e-14)


def test_equilibrium_rejects_tip():
    with pytest.raises(ValueError):
        equilibrium_config(ControlTarget.tip_target([0, 0, 0.4]))


@given(st.lists(st.floats(0, 10), min_size=2, max_size=2), st.lists(angles, min_size=2, max_size=2),
       st.lists(st.floats(0, 10), min_size=2, max_size=2), st.lists(st.floats(-20, 20), min_size=2, max_size=2))
def test_pressures_in_range(kt, phis, ke, integ):
    target = ControlTarget.shape_target(kt, phis)
    est = RobotConfig.from_tuples([(k, 0.0, 0.2) for k in ke])
    p, _ = control_step(_state(integ), est, target, dt=0.4)
    assert np.all((p >= 0) & (p <= 100))


def test_anti_windup():
    g = ControlGains()
    target = ControlTarget.shape_target([20.0, 0.0], [0.0, 0.0])
    est = RobotConfig.straight([0.2, 0.2])
    s = ControllerState.initial(g)
    for _ in range(200):
        p, s = control_step(s, est, target, dt=0.4)
    assert s.saturated and p[0] == pytest.approx(100.0)
    # the integrator stops where the output reaches the limit
    assert g.kp * 20.0 + g.ki * s.integrator[0] == pytest.approx(g.u_max)
    # so reversing the error unsaturates within one step
    back = ControlTarget.shape_target([0.0, 0.0], [0.0, 0.0])
    p, s = control_step(s, RobotConfig.from_tuples([(8.0, 0.0, 0.2), (0.0, 0.0, 0.2)]), back, dt=0.4)
    assert p[0] < 100.0


# -- tip targets -----------------------------------------------------------

def test_tip_to_shape_reaches_tip():
    truth = RobotConfig.from_tuples([(3.0, 0.4, 0.21), (2.0, -1.0, 0.2)])
    goal = tip_position(truth)
    got = tip_to_shape(RobotConfig.straight([0.21, 0.2]), goal, kappa_max=8.0)
    np.testing.assert_array_equal(got.lengths, [0.21, 0.2])
    # the curvature penalty trades a small tip offset for the least-bent solution
    assert np.linalg.norm(tip_position(got) - goal) < 5e-4
    assert all(s.kappa <= 8.0 + 1e-12 for s in got.segments)
    exact = tip_to_shape(RobotConfig.straight([0.21, 0.2]), goal, kappa_max=8.0, regularization=1e-12)
    assert np.linalg.norm(tip_position(exact) - goal) < 1e-6


def test_tip_to_shape_straight_goal_is_straight():
    est = RobotConfig.straight([0.2, 0.2])
    got = tip_to_shape(est, [0.0, 0.0, 0.4])
    assert max(s.kappa for s in got.segments) < 1e-6


# -- plant -----------------------------------------------------------------

def test_plant_lag_closed_form(surface, front_camera):
    plant = SimulatedPlant(surface, front_camera, dt=0.4, time_constant=0.5)
    a = 1 - math.exp(-0.4 / 0.5)
    cmd = np.array([60.0, 0, 0, 0, 30.0, 0])
    for n in range(1, 8):
        plant.apply(cmd)
        np.testing.assert_allclose(plant.pressures, cmd * (1 - (1 - a) ** n), rtol=1e-12)


def test_plant_without_lag(surface, front_camera):
    plant = SimulatedPlant(surface, front_camera, time_constant=0.0)
    plant.apply([10.0, 0, 0, 0, 0, 0])
    np.testing.assert_array_equal(plant.pressures, [10.0, 0, 0, 0, 0, 0])
    with pytest.raises(ValueError):
        SimulatedPlant(surface, front_camera, dt=0.0)


def test_plant_observation_seeded(surface, front_camera):
    from aft.sim import NoiseSpec
    plant = SimulatedPlant(surface, front_camera, noise=NoiseSpec(1e-3, 0.05, 0.1), seed=3)
    a, b, c = plant.observe(2), plant.observe(2), plant.observe(3)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert a.timestamp == pytest.approx(0.8)
    assert len(a) != len(c) or not np.array_equal(a.positions, c.positions)


# -- closed loop -----------------------------------------------------------

def _loop(surface, camera, model, params, target, n):
    plant = SimulatedPlant(surface, camera)
    return run_closed_loop(plant, target, n, model, params)


def test_loop_holds_rest(surface, front_camera, model, params):
    trace = _loop(surface, front_camera, model, params, ControlTarget.shape_target([0.0, 0.0], [0.0, 0.0]), 5)
    assert all(np.all(r.pressures < 1.0) for r in trace.rows)
    assert trace.steady_state(3)["shape_error"] < 1e-3


def test_loop_reduces_shape_error(surface, front_camera, model, params):
    target = ControlTarget.shape_target([3.0, 2.0], [0.5, -1.0])
    trace = _loop(surface, front_camera, model, params, target, 25)
    errs = [r.shape_error for r in trace.rows]
    assert errs[-1] < 0.1 * errs[0]
    assert trace.steady_state()["shape_error"] < 0.01
    assert trace.steady_state()["tracking_lost"] == 0


def test_integrator_reaches_limit_without_stalling():
    # a large integration step must not freeze the output below the limit
    g = ControlGains()
    target = ControlTarget.shape_target([15.0, 0.0], [0.0, 0.0])
    est = RobotConfig.from_tuples([(6.0, 0.0, 0.2), (0.0, 0.0, 0.2)])
    p, s = control_step(_state([4.9, 0.0]), est, target, dt=0.4)
    assert p[0] == pytest.approx(100.0) and s.saturated


def test_loop_saturates_on_unreachable(surface, front_camera, model, params):
    target = ControlTarget.shape_target([15.0, 0.0], [0.0, 0.0])
    trace = _loop(surface, front_camera, model, params, target, 15)
    assert trace.steady_state()["saturated"]
    assert trace.rows[-1].pressures[0] == pytest.approx(100.0)


def test_trace_csv(surface, front_camera, model, params, tmp_path):
    trace = _loop(surface, front_camera, model, params, ControlTarget.tip_target([0.0, 0.0, 0.4]), 3)
    write_trace_csv(tmp_path / "t.csv", trace)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == TRACE_HEADER and len(rows) == 4
    assert all(len(r) == len(TRACE_HEADER) for r in rows)
    # tip targets have no shape reference
    assert rows[1][TRACE_HEADER.index("shape_error")] == ""
