from dataclasses import replace

import numpy as np
import pytest

from conftest import closed_loop, initial_plan, scenario
from oracles import inside_polygon
from secureplan.dynamics import RobotState
from secureplan.geometry import ConvexPolygon, signed_distance
from secureplan.planner import SolverParams
from secureplan.sensor import BeliefMap
from secureplan.simulator import (
    REACT,
    ScenarioError,
    SimParams,
    _polygons_touch,
    collision_check,
    monte_carlo_safety,
    plan_is_safe,
    random_unknown_box,
    run,
)


def test_collision_check_cases():
    box = ConvexPolygon.box(1, -1, 1.2, 1)
    assert collision_check(RobotState(1.1, 0, 0), [box])
    assert not collision_check(RobotState(0.5, 0, 0), [box])
    assert not collision_check(RobotState(0.5, 0, 0), [])
    # a long step straight through a thin wall
    thin = ConvexPolygon.box(-0.01, -1, 0.01, 1)
    assert collision_check(RobotState(1, 0, 0), [thin], prev=RobotState(-1, 0, 0))
    assert not collision_check(RobotState(1, 0, 0), [thin])


def test_sim_params_validation():
    with pytest.raises(ValueError):
        SimParams(dt=0.0)
    with pytest.raises(ValueError):
        SimParams(plan_authority=1.5)


def test_scenario_validation():
    sc = scenario("blind_corner")
    with pytest.raises(ScenarioError):
        replace(sc, start=RobotState(3.0, 1.2, 0)).validate()
    # a wall across the whole world leaves no path
    cut = ConvexPolygon.box(1.0, -1.0, 1.2, 4.0)
    with pytest.raises(ScenarioError):
        replace(sc, true_obstacles=[cut], provided_obstacles=[]).validate()


def test_prior_scan_respects_occlusion():
    sc = scenario("blind_corner")
    belief = sc.initial_belief()
    hidden = sc.unknown_obstacles[0]
    assert not any(o.same_as(hidden, 1e-9) for o in belief.known_obstacles)
    assert not (belief.rasterize(hidden) & belief.observed_free).any()
    # the start cell and the straight corridor ahead are observed
    assert belief.observed_free[belief.cell_index(sc.start.position)]
    assert belief.observed_free[belief.cell_index([1.5, 0.0])]


def test_plan_is_safe_examples():
    sc = scenario("blind_corner")
    belief = sc.initial_belief()
    sol = initial_plan("blind_corner", True)
    assert plan_is_safe(sol, belief, 0.0, sc.reactive, sc.sensor)
    # an obstacle on the planned path
    mid = sol.X[sol.K // 2, :2]
    blocked = belief.copy()
    blocked.add_obstacle(ConvexPolygon.box(*(mid - 0.1), *(mid + 0.1)))
    assert not plan_is_safe(sol, blocked, 0.0, sc.reactive, sc.sensor)
    # nothing observed yet
    blind = BeliefMap(sc.bounds, known_obstacles=list(belief.known_obstacles))
    assert not plan_is_safe(sol, blind, 0.0, sc.reactive, sc.sensor)
    # past the end of the plan there is nothing left to check
    assert plan_is_safe(sol, blind, sol.t_f + 1.0, sc.reactive, sc.sensor)


def test_random_unknown_box_is_valid(rng):
    sc = scenario("blind_corner").without_unknowns()
    for _ in range(10):
        box = random_unknown_box(sc, rng)
        assert all(not _polygons_touch(box, o) for o in sc.true_obstacles)
        assert min(signed_distance(p, box) for p in (sc.start.position, sc.goal)) >= 0.5
        replace(sc, true_obstacles=sc.true_obstacles + [box]).validate()


def test_monte_carlo_without_trials():
    out = monte_carlo_safety(scenario("empty"), 0)
    assert out["n_trials"] == 0 and out["collisions"] == 0 and out["trials"] == []
    with pytest.raises(ValueError):
        monte_carlo_safety(scenario("empty"), -1)


@pytest.mark.parametrize("secure", [False, True])
def test_empty_world_reaches_goal(secure):
    sc = scenario("empty")
    tr = closed_loop("empty", secure)
    assert tr.goal_reached and tr.status == "goal-reached" and not tr.collision
    assert np.linalg.norm(tr.states[-1, :2] - sc.goal) <= 0.01
    assert not tr.detections and not tr.stops
    assert all(r.mode != REACT for r in tr.records)


def test_run_is_deterministic():
    a = run(scenario("empty"), secure=False, seed=3)
    b = run(scenario("empty"), secure=False, seed=3)
    assert len(a.records) == len(b.records)
    assert np.array_equal(a.states, b.states)
    assert [r.mode for r in a.records] == [r.mode for r in b.records]


def test_robot_at_rest_without_a_plan_stays_put():
    sc = replace(scenario("empty"), solver=SolverParams(max_iter=1, restarts=0, al_outer=0))
    tr = run(sc, secure=False)
    assert not tr.plans[0].converged
    assert tr.status == "infeasible" and not tr.records and not tr.collision


def _react_onsets(tr):
    onsets = []
    for prev, cur in zip(tr.records, tr.records[1:]):
        if cur.mode == REACT and prev.mode != REACT:
            onsets.append(prev.t)
    return onsets


@pytest.mark.slow
@pytest.mark.parametrize("secure", [False, True])
def test_mode_discipline_and_belief_consistency(secure):
    sc = scenario("blind_corner")
    tr = closed_loop("blind_corner", secure)
    det_times = [ev.time for ev in tr.detections]
    for t in _react_onsets(tr):
        assert any(abs(t - d) < 1e-9 for d in det_times)
    if tr.records and tr.records[0].mode == REACT:
        pytest.fail("reacting before any detection")
    grid = BeliefMap(sc.bounds)
    centers = grid.centers()
    for known, free in tr.beliefs.values():
        pts = centers[free]
        for o in known:
            assert not inside_polygon(pts, o, tol=-1e-9).any()


@pytest.mark.slow
@pytest.mark.parametrize("name", ["needle_050", "needle_020", "empty", "blind_corner"])
def test_secure_suite_never_collides(name):
    tr = closed_loop(name, True)
    assert all(p.converged for p in tr.plans)
    assert not tr.collision
    assert tr.status in ("goal-reached", "infeasible-after-detection")
