import numpy as np
import pytest

from conftest import closed_loop, scenario
from oracles import random_polygon
from secureplan.dynamics import RobotState
from secureplan.geometry import ConvexPolygon
from secureplan.sensor import (
    BeliefMap,
    SensorParams,
    detect,
    fov_polygon,
    read_pgm,
    update_belief,
    visible,
    visible_points,
)


def test_fov_example_triangle():
    p = fov_polygon(RobotState(0, 0, 0), SensorParams(2.0, np.pi / 3))
    assert p.n_faces == 3
    expected = np.array([[0, 0], [1, -np.sqrt(3)], [1, np.sqrt(3)]])
    assert np.allclose(p.vertices, expected)


def test_fov_rotates_with_heading():
    a = fov_polygon(RobotState(0, 0, 0))
    b = fov_polygon(RobotState(0, 0, np.pi / 2))
    rot = a.vertices @ np.array([[0, 1], [-1, 0]])
    assert np.allclose(b.vertices, rot)


def test_fov_area_and_range(rng):
    for _ in range(20):
        sp = SensorParams(rng.uniform(0.5, 3), rng.uniform(0.1, 1.5))
        x = RobotState(*rng.uniform(-2, 2, 2), rng.uniform(-np.pi, np.pi))
        p = fov_polygon(x, sp)
        assert p.area == pytest.approx(sp.range**2 * np.sin(sp.half_angle) * np.cos(sp.half_angle), abs=1e-9)
        far = x.position + (sp.range + 1e-6) * np.array([np.cos(x.heading), np.sin(x.heading)])
        assert not p.contains(far)
        pts = x.position + rng.uniform(-4, 4, size=(500, 2))
        outside = np.linalg.norm(pts - x.position, axis=1) > sp.range
        assert not visible_points(pts[outside], x, [], sp).any()


def test_sensor_params_validation():
    with pytest.raises(ValueError):
        SensorParams(range=0.0)
    with pytest.raises(ValueError):
        SensorParams(half_angle=np.pi / 2)


def test_visible_examples():
    x = RobotState(0, 0, 0)
    assert visible([0, 0], x, [])
    wall = ConvexPolygon.box(0.4, -0.5, 0.5, 0.5)
    assert visible([0.8, 0.0], x, [])
    assert not visible([0.8, 0.0], x, [wall])


def _ray_march_visible(p, x: RobotState, obstacles, sp: SensorParams) -> bool:
    """1 mm ray march; a point counts as blocked if a march point is strictly inside an obstacle."""
    if not fov_polygon(x, sp).contains(p):
        return False
    d = np.linalg.norm(p - x.position)
    n = max(2, int(np.ceil(d / 1e-3)) + 1)
    march = x.position + np.linspace(0, 1, n)[:, None] * (p - x.position)
    for o in obstacles:
        slack = o.offsets[None, :] - march @ o.normals.T
        if np.any(np.all(slack > 1e-12, axis=1)):
            return False
    return True


def test_visible_matches_ray_march(rng):
    sp = SensorParams()
    disagreements = 0
    for _ in range(50):
        obstacles = [random_polygon(rng, center=rng.uniform(0.3, 1.5, 2) * [1, rng.choice([-1, 1])], scale=0.3) for _ in range(3)]
        x = RobotState(0, 0, rng.uniform(-0.6, 0.6))
        for p in rng.uniform([-0.2, -1.8], [2.0, 1.8], size=(20, 2)):
            disagreements += visible(p, x, obstacles, sp) != _ray_march_visible(p, x, obstacles, sp)
    assert disagreements == 0


def test_detect_examples():
    belief = BeliefMap((-1, -2, 3, 2))
    x = RobotState(0, 0, 0)
    assert detect(x, [], belief) == []
    wall = ConvexPolygon.box(0.5, -1.5, 0.6, 1.5)
    hidden = ConvexPolygon.box(0.8, -0.2, 1.0, 0.2)
    belief.add_obstacle(wall)
    assert detect(x, [wall, hidden], belief) == []
    ev = detect(x, [hidden], belief, time=1.5)
    assert len(ev) == 1 and ev[0].obstacle is hidden and ev[0].time == 1.5


def test_detection_completeness():
    belief = BeliefMap((-1, -3, 4, 3))
    x = RobotState(0, 0, 0)
    # only a corner pokes 3 cm into the FOV edge
    s = np.sin(np.pi / 3)
    c = np.cos(np.pi / 3)
    corner = np.array([c, s]) * 1.0 + np.array([s, -c]) * 0.03
    box = ConvexPolygon.from_vertices(corner + np.array([[0, 0], [0.3, 0], [0.3, 0.3], [0, 0.3]]))
    assert len(detect(x, [box], belief)) == 1


def test_update_belief_rasterizes_fov_and_is_idempotent():
    belief = BeliefMap((-1, -2.5, 3, 2.5))
    x = RobotState(0.1, 0.2, 0.3)
    update_belief(belief, x, [], [])
    assert np.array_equal(belief.observed_free, belief.rasterize(fov_polygon(x)))
    before = belief.observed_free.copy()
    update_belief(belief, x, [], [])
    assert np.array_equal(before, belief.observed_free)


def test_corridor_sweep_is_union_of_rasterizations():
    belief = BeliefMap((-1, -2.5, 5, 2.5))
    union = np.zeros(belief.shape, dtype=bool)
    counts = []
    for s in np.linspace(0, 3, 13):
        x = RobotState(s, 0.1 * np.sin(s), 0.2 * np.cos(s))
        update_belief(belief, x, [], [])
        union |= belief.rasterize(fov_polygon(x))
        counts.append(belief.free_cells())
    assert np.array_equal(union, belief.observed_free)
    assert all(b >= a for a, b in zip(counts, counts[1:]))


def test_detected_obstacle_clears_cells():
    belief = BeliefMap((-1, -2.5, 3, 2.5))
    box = ConvexPolygon.box(0.7, -0.1, 0.9, 0.1)
    x = RobotState(0, 0, 0)
    update_belief(belief, x, [], [])
    assert belief.rasterize(box).any() and (belief.rasterize(box) & belief.observed_free).any()
    update_belief(belief, x, detect(x, [box], belief), [box])
    centers = belief.centers()[belief.observed_free]
    assert not box.contains(centers).any()
    assert box in belief.known_obstacles


def test_pgm_round_trip(tmp_path):
    belief = BeliefMap((-1, -1, 1, 1))
    belief.add_obstacle(ConvexPolygon.box(0.5, -0.5, 0.9, 0.5))
    update_belief(belief, RobotState(-0.9, 0, 0), [], belief.known_obstacles)
    belief.to_pgm(tmp_path / "b.pgm")
    img = read_pgm(tmp_path / "b.pgm")[::-1]
    assert np.array_equal(img == 255, belief.observed_free)
    assert np.array_equal(img == 0, belief.known_obstacle_mask())


@pytest.mark.slow
def test_blind_corner_detection_waits_for_sightline():
    sc = scenario("blind_corner")
    box = sc.unknown_obstacles[0]
    tr = closed_loop("blind_corner", False)
    assert tr.detections
    samples = box.boundary_samples(0.02)
    t_cone = next(r.t for r in tr.records if fov_polygon(RobotState.from_array(r.x), sc.sensor).contains(samples).any())
    assert tr.detections[0].time > t_cone
