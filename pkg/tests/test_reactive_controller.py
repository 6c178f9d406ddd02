import numpy as np
import pytest

from secureplan.dynamics import ModelParams, RobotState
from secureplan.geometry import ConvexPolygon, point_polygon_distance
from secureplan.reactive_controller import NonConvergentManeuverError, ReactParams, react_step, run_maneuver, run_maneuvers
from secureplan.reactive_set import default_calibration, evaluate, wall_family

WALL_AHEAD = ConvexPolygon.box(1.0, -2.0, 1.1, 2.0)


def test_at_rest_far_obstacle_gives_no_control():
    x = RobotState(0, 0, 0)
    u = react_step(x, x, ConvexPolygon.box(40, 40, 41, 41))
    assert np.hypot(u.linear_accel, u.angular_accel) <= 1e-3


def test_wall_ahead_brakes_hard():
    m = ModelParams()
    x = RobotState(0, 0, 0, 1.0)
    u = react_step(x, x, WALL_AHEAD, model=m)
    assert u.linear_accel <= -0.9 * m.a_max


def test_maneuver_from_rest_is_a_single_point():
    res = run_maneuver(RobotState(0.3, 0.2, 1.0), WALL_AHEAD)
    assert len(res.states) == 1 and res.converged


def test_stops_before_wall():
    res = run_maneuver(RobotState(0, 0, 0, 1.0), WALL_AHEAD)
    final = res.positions[-1]
    assert final[0] < 1.0
    assert point_polygon_distance(final, WALL_AHEAD) > 0.4
    assert all(point_polygon_distance(p, WALL_AHEAD) > 0 for p in res.positions)


def test_obstacle_behind_stays_within_forward_semi_axis():
    rs = default_calibration()
    x0 = RobotState(0, 0, 0, 1.0)
    res = run_maneuver(x0, ConvexPolygon.box(-1.5, -1, -1.2, 1))
    _, axes = rs.body_params(1.0, 0.0)
    assert np.linalg.norm(res.positions[-1]) <= axes[0]


@pytest.mark.parametrize("v,w", [(0.5, 0.0), (1.0, 1.0), (2.0, -2.0), (1.5, 0.5)])
def test_calibration_family_paths_inside_reactive_set(v, w):
    rs = default_calibration()
    x0 = RobotState(0, 0, 0, v, w)
    family = wall_family()
    results = run_maneuvers(np.tile(x0.as_array(), (len(family), 1)), family)
    e = evaluate(rs, x0)
    major = e.semi_axes().max()
    for r in results:
        assert r.converged
        assert np.all(e.contains(r.positions, tol=1e-9))
        assert np.linalg.norm(r.positions - x0.position, axis=1).max() <= major + np.linalg.norm(e.center)


def test_termination_and_control_feasibility_on_grid_corners():
    m = ModelParams()
    family = wall_family()[::4]
    starts = [(0, 0, 0, v, w) for v in (0.0, 1.0, 2.0) for w in (-2.0, 0.0, 2.0)]
    starts = np.array([s for s in starts for _ in family], dtype=float)
    results = run_maneuvers(starts, family * 9, model=m)
    for r in results:
        assert r.converged and r.times[-1] <= 10.0
        assert np.all(np.abs(r.controls[:, 0]) <= m.a_max)
        assert np.all(np.abs(r.controls[:, 1]) <= m.alpha_max)


def test_time_cap_raises():
    rp = ReactParams(time_cap=0.1)
    with pytest.raises(NonConvergentManeuverError):
        run_maneuver(RobotState(0, 0, 0, 1.0), WALL_AHEAD, rp)


def test_params_validation():
    with pytest.raises(ValueError):
        ReactParams(horizon=1)
    with pytest.raises(ValueError):
        ReactParams(weight_anchor=-1.0)
