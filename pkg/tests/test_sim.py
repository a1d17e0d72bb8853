import copy
import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from swarm_mpc.ocp import OcpConfig
from swarm_mpc.scenario_io import load_scenario
from swarm_mpc.sim import (AgentSpec, InitialInfeasible, Scenario, SimLog, beta_sweep,
                           min_distance_trace, run, verify_log)

BLOCKING = Path(__file__).parent / "fixtures" / "blocking.json"

BIKE = {"T_s": 0.1, "L": 0.8, "a_max": 3.0, "delta_max": 1.0, "v_max": 2.0}


def bike(i, x0, ref, comm=3.0):
    return AgentSpec(i, "bicycle", np.asarray(x0, float), np.asarray(ref, float), comm, 1.0, BIKE)


@pytest.fixture(scope="module")
def blocking_log():
    scen = load_scenario(BLOCKING)
    scen.steps = 15
    return scen, run(scen)


def test_zero_steps_logs_initial_state_only():
    scen = Scenario([bike(0, [0, 0, 0, 0, 0], [5, 0, 0, 0, 0])], OcpConfig(N=8), steps=0)
    log = run(scen)
    assert len(log.steps) == 1
    assert np.array_equal(log.steps[0].agents[0].x, scen.agents[0].x0)
    assert log.steps[0].agents[0].u is None


def test_single_bicycle_reaches_reference():
    ref = np.array([5.0, 0.0, 0.0, 0.0, 0.0])
    scen = Scenario([bike(0, [0, 0, 0, 0, 0], ref)], OcpConfig(N=10, max_iter=20), steps=150)
    log = run(scen)
    err = np.linalg.norm(log.states(0) - ref, axis=1)
    assert np.min(err) <= 0.1
    assert verify_log(log, scen) == []


def test_distant_agents_match_single_runs():
    cfg = OcpConfig(N=8, max_iter=20)
    a = bike(0, [0, 0, 0, 0, 0], [3, 0, 0, 0, 0])
    b = bike(1, [0, 20, 0, 0, 0], [3, 20, 0, 0, 0])
    both = run(Scenario([a, b], cfg, steps=25))
    for spec in (a, b):
        alone = run(Scenario([spec], cfg, steps=25))
        assert np.array_equal(both.states(spec.id), alone.states(spec.id))


def test_run_log_verifies_clean(blocking_log):
    scen, log = blocking_log
    assert verify_log(log, scen) == []
    assert np.all(min_distance_trace(log) > 0.6 - 1e-6)


def test_tampered_position_flagged(blocking_log):
    scen, log = blocking_log
    bad = copy.deepcopy(log)
    bad.steps[5].agents[0].x[:2] = bad.steps[5].agents[1].x[:2] + np.array([0.1, 0.0])
    kinds = {(f["k"], f["kind"]) for f in verify_log(bad, scen)}
    assert (5, "distance") in kinds


def test_inflated_safe_cost_flagged(blocking_log):
    scen, log = blocking_log
    bad = copy.deepcopy(log)
    bad.steps[4].agents[0].J_s = bad.steps[4].agents[0].J_s_bound + 1.0
    kinds = {(f["k"], f["kind"]) for f in verify_log(bad, scen)}
    assert (4, "safe_cost_chain") in kinds


def test_mismatched_scenario_reported(blocking_log):
    scen, log = blocking_log
    other = copy.deepcopy(scen)
    other.agents = other.agents[:1]
    assert verify_log(log, other)[0]["kind"] == "mismatch"


def test_lyapunov_chain_holds(blocking_log):
    _, log = blocking_log
    for prev, cur in zip(log.steps[:-2], log.steps[1:-1]):
        for i, a in cur.agents.items():
            if a.J_s_bound is not None:
                assert a.J_s <= a.J_s_bound + 1e-6
                assert a.J_s_bound <= prev.agents[i].J_s + 1e-9


def test_run_is_deterministic():
    scen = load_scenario(BLOCKING)
    scen.steps = 5
    assert run(scen).to_csv() == run(scen).to_csv()


def test_json_round_trip(blocking_log):
    _, log = blocking_log
    text = json.dumps(log.to_json())
    back = SimLog.from_json(json.loads(text))
    assert back.to_csv() == log.to_csv()
    assert json.dumps(back.to_json()) == text


def test_csv_header_and_rows(blocking_log):
    _, log = blocking_log
    lines = log.to_csv().splitlines()
    assert lines[0].startswith("k,id,x0,x1,x2,x3,u0,u1,cluster,J_t,J_s,J_s_bound")
    assert len(lines) == 1 + 2 * len(log.steps)
    # k = 0 has no bound yet
    assert lines[1].split(",")[11] == "inf"


def test_initial_collision_rejected():
    a = bike(0, [0, 0, 0, 0, 0], [5, 0, 0, 0, 0])
    b = bike(1, [1.5, 0, 0, 0, 0], [6, 0, 0, 0, 0])
    with pytest.raises(ValueError):
        run(Scenario([a, b], OcpConfig(N=5), steps=3))


def test_infeasible_first_problem_raised():
    # moving at full speed towards a parked neighbour, too close to brake
    spec = {"T_s": 0.2, "a_max": 0.2, "v_max": 1.0}
    a = AgentSpec(0, "double_integrator", np.array([0.0, 0.0, 1.0, 0.0]),
                  np.array([0.0, 0.0, 0.0, 0.0]), 3.0, 0.25, spec)
    b = AgentSpec(1, "double_integrator", np.array([0.65, 0.0, 0.0, 0.0]),
                  np.array([0.65, 0.0, 0.0, 0.0]), 3.0, 0.25, spec)
    with pytest.raises(InitialInfeasible):
        run(Scenario([a, b], OcpConfig(N=6), steps=3))


def test_beta_sweep_rows():
    scen = load_scenario(BLOCKING)
    rows = beta_sweep(scen, [1, 16])
    assert [r.beta for r in rows] == [1.0, 16.0]
    for r in rows:
        assert r.gap == pytest.approx(r.offset - r.reachable_offset, abs=0.0)
        assert r.gap >= -1e-9


def test_clean_run_has_no_warnings():
    scen = dataclasses.replace(load_scenario(BLOCKING), steps=2)
    assert run(scen).warnings == []
