import math

import numpy as np
import pytest

from mesotraffic.model import Boundary, LatticeConfig, ModelParams, TrafficState, VehicleState
from mesotraffic.simulator import (
    Empty,
    Explicit,
    Incident,
    ScenarioSpec,
    Signal,
    UniformRing,
    apply_slowdown,
    entry_speed,
    inject_arrival,
    initial_state,
    run,
    sample_speed,
    speed_distribution,
    step,
)

CFG = LatticeConfig()
PARAMS = ModelParams()


def test_speed_distribution_hand_example():
    # v_max = 2, V = 1, theta0 = 1 in lattice units
    cfg = LatticeConfig(L=10, delta_l=1.0, delta_t=1.0, v_max=2)
    probs = speed_distribution(1.0, ModelParams(theta0=1.0), cfg)
    z = 1 + 2 / math.e
    np.testing.assert_allclose(probs, [1 / math.e / z, 1 / z, 1 / math.e / z], rtol=1e-12)
    np.testing.assert_allclose(probs, [0.21194, 0.57612, 0.21194], atol=1e-5)


def test_speed_distribution_zero_temperature():
    probs = speed_distribution(2.4, ModelParams(theta0=1e-6), CFG)
    assert probs.argmax() == 2 and probs[2] == pytest.approx(1.0)


def test_sample_speed_frequencies():
    rng = np.random.default_rng(1)
    draws = np.array([sample_speed(3, PARAMS, CFG, rng) for _ in range(20000)])
    expected = speed_distribution(2 / 1.1, PARAMS, CFG)
    observed = np.bincount(draws, minlength=5) / len(draws)
    np.testing.assert_allclose(observed, expected, atol=0.015)


def test_apply_slowdown():
    rng = np.random.default_rng(0)
    assert all(apply_slowdown(3, 0.0, rng) == 3 for _ in range(100))
    assert all(apply_slowdown(0, 1.0, rng) == 0 for _ in range(100))
    n, p2 = 100_000, 0.1
    slowed = sum(apply_slowdown(3, p2, rng) == 2 for _ in range(n))
    sigma = math.sqrt(n * p2 * (1 - p2))
    assert abs(slowed - n * p2) < 3 * sigma


def test_entry_speed_rounding():
    assert entry_speed(math.inf, PARAMS, CFG) == 4
    assert entry_speed(1, PARAMS, CFG) == 0
    assert entry_speed(3, PARAMS, CFG) == 2  # 2 / 1.1 = 1.82


def test_inject_arrival_guards():
    rng = np.random.default_rng(0)
    occupied = TrafficState(0, [0], [1], [0])
    assert len(inject_arrival(occupied, ModelParams(p1=1.0), CFG, rng)) == 1
    empty = TrafficState.empty()
    out = inject_arrival(empty, ModelParams(p1=1.0), CFG, rng)
    assert out.cells.tolist() == [1] and out.speeds.tolist() == [4]
    assert len(inject_arrival(empty, ModelParams(p1=0.0), CFG, rng)) == 0


def test_single_free_vehicle_advances_vmax():
    state = TrafficState(0, [0], [10], [4])
    nxt = step(state, ModelParams(p1=0.0), CFG, np.random.default_rng(0))
    assert nxt.cells.tolist() == [14]


def test_follower_stays_behind_stopped_leader():
    state = TrafficState(0, [0, 1], [20, 19], [0, 3])
    params = ModelParams(p1=0.0, theta0=1e-6, p2=0.0)
    nxt = step(state, params, CFG, np.random.default_rng(0))
    assert nxt.cells.tolist() == [20, 19]
    assert nxt.speeds.tolist() == [4, 0]  # free leader draws v_max, gap of 1 gives V = 0


def test_full_ring_never_moves():
    cfg = LatticeConfig(L=12)
    spec = ScenarioSpec(cfg, ModelParams(boundary=Boundary.PERIODIC), 30, UniformRing(12))
    data = run(spec, 3)
    for state in data.states():
        assert sorted(state.cells.tolist()) == list(range(1, 13))


def test_ring_conserves_vehicles():
    spec = ScenarioSpec(CFG, ModelParams(boundary=Boundary.PERIODIC), 200, UniformRing(25))
    data = run(spec, 0)
    assert np.all(np.bincount(data.k) == 25)
    assert len(data.ids()) == 25


def test_run_is_deterministic(tmp_path):
    spec = ScenarioSpec(CFG, PARAMS, 120, incidents=(Incident(40, 20, cell=50),))
    a, b = run(spec, 11), run(spec, 11)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert not np.array_equal(run(spec, 12).cell, a.cell)


def test_zero_steps_is_initial_state():
    state = (VehicleState(0, 30, 2), VehicleState(1, 10, 1))
    data = run(ScenarioSpec(CFG, PARAMS, 0, Explicit(state)), 0)
    assert data.n_steps == 1
    assert data.cell.tolist() == [30, 10]


def test_incident_holds_vehicle():
    spec = ScenarioSpec(CFG, ModelParams(p1=0.0), 40, Explicit((VehicleState(7, 20, 4),)),
                        incidents=(Incident(5, 10, veh_id=7),))
    data = run(spec, 0)
    for k in range(5, 15):
        assert data.state_at(k).speeds.tolist() == [0]
    assert data.state_at(16).cells[0] > data.state_at(15).cells[0]


def test_free_flow_fixed_point():
    # vanishing noise, no slow-downs and plenty of room: everyone reaches v_max
    init = Explicit(tuple(VehicleState(i, 90 - 10 * i, 0) for i in range(5)))
    data = run(ScenarioSpec(CFG, ModelParams(theta0=1e-3, p1=0.0, p2=0.0), 4, init), 0)
    for k in range(1, 5):
        assert np.all(data.state_at(k).speeds == 4)


def test_signal_holds_queue_at_stop_line():
    spec = ScenarioSpec(LatticeConfig(L=30), ModelParams(p1=1.0), 60, signal=Signal(40, 20, 1))
    data = run(spec, 0)
    for k in range(1, 41):
        state = data.state_at(k)
        assert state.k == k and (len(state) == 0 or state.cells[0] <= 30)
    assert len(data.lifetimes()) > 0
    exits = [e for _, e in data.lifetimes().values() if e is not None]
    assert exits and min(exits) > 40


def test_signal_phases():
    sig = Signal(red=3, green=2, cycles=2)
    assert [sig.is_red(k) for k in range(12)] == [True] * 3 + [False] * 2 + [True] * 3 + [False] * 4


def test_scenario_validation():
    with pytest.raises(ValueError):
        ScenarioSpec(CFG, PARAMS, 10, UniformRing(5))  # ring on a free road
    with pytest.raises(ValueError):
        ScenarioSpec(CFG, ModelParams(boundary=Boundary.PERIODIC), 10, UniformRing(CFG.L + 1))
    with pytest.raises(ValueError):
        ScenarioSpec(CFG, PARAMS, 10, incidents=(Incident(20, 5, cell=3),))
    with pytest.raises(ValueError):
        ScenarioSpec(CFG, ModelParams(boundary=Boundary.PERIODIC), 10, signal=Signal(1, 1, 1))


def test_uniform_ring_initial_spacing():
    spec = ScenarioSpec(CFG, ModelParams(boundary=Boundary.PERIODIC), 1, UniformRing(30))
    state = initial_state(spec)
    state.validate(CFG)
    gaps = -np.diff(state.cells)
    assert gaps.min() >= 3 and gaps.max() <= 4
    assert isinstance(ScenarioSpec(CFG, PARAMS, 1).initial, Empty)
