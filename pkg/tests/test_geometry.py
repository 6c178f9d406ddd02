import numpy as np
import pytest

from oracles import (
    containment_instance,
    inside_polygon,
    polygon_boundary,
    random_ellipsoid,
    random_polygon,
    sampled_contained,
    sampled_intersects,
    separation_instance,
)
from secureplan.geometry import (
    ConvexPolygon,
    DegenerateEllipsoidError,
    DegenerateInputError,
    Ellipsoid,
    GeometryError,
    ellipsoid_in_polygon_margin,
    ellipsoid_polygon_separation,
    minimum_enclosing_ellipsoid,
    point_polygon_distance,
    rotation,
    segment_intersects_polygon,
    unit_ball_map,
)


def test_polygon_invariants(rng):
    for _ in range(50):
        p = random_polygon(rng)
        assert np.allclose(np.linalg.norm(p.normals, axis=1), 1.0, atol=1e-12)
        slack = p.offsets[None, :] - p.vertices @ p.normals.T
        assert np.all(slack >= -1e-9)
        # every vertex sits on exactly two face lines
        assert np.all((np.abs(slack) <= 1e-9).sum(axis=1) == 2)


def test_polygon_rejects_bad_input():
    with pytest.raises(GeometryError):
        ConvexPolygon.from_vertices([(0, 0), (1, 0)])
    with pytest.raises(GeometryError):
        ConvexPolygon.from_vertices([(0, 0), (1, 0), (2, 0)])
    with pytest.raises(GeometryError):
        ConvexPolygon.from_vertices([(0, 0), (2, 0), (1, 0.2), (2, 2), (0, 2)])


def test_clockwise_input_is_reoriented():
    p = ConvexPolygon.from_vertices([(0, 0), (0, 1), (1, 1), (1, 0)])
    assert p.area == pytest.approx(1.0)


def test_ellipsoid_area_against_monte_carlo(rng):
    e = Ellipsoid([0.3, -0.2], rotation(0.4) @ np.diag([1.2, 0.5]))
    box = 1.3
    pts = rng.uniform(-box, box, size=(200_000, 2)) + e.center
    frac = e.contains(pts).mean()
    assert frac * (2 * box) ** 2 == pytest.approx(e.area, rel=0.01)


def test_unit_ball_map_examples():
    f = unit_ball_map(Ellipsoid.circle([0, 0], 1.0))
    assert np.allclose(f.linear, np.eye(2)) and np.allclose(f.translation, 0)
    f = unit_ball_map(Ellipsoid.circle([3, 0], 2.0))
    assert np.allclose(f.linear, np.diag([0.5, 0.5]))
    assert np.allclose(f.translation, [-1.5, 0.0])


def test_unit_ball_map_boundary_and_inverse(rng):
    e = random_ellipsoid(rng)
    f = unit_ball_map(e)
    assert np.allclose(np.linalg.norm(f(e.boundary(1000)), axis=1), 1.0, atol=1e-9)
    ident = f.compose(f.inverse())
    assert np.allclose(ident.linear, np.eye(2), atol=1e-9)
    assert np.allclose(ident.translation, 0.0, atol=1e-9)


def test_singular_shape_is_rejected():
    with pytest.raises(DegenerateEllipsoidError):
        unit_ball_map(Ellipsoid([0, 0], [[1, 0], [2, 0]]))


def test_inclusion_margin_examples():
    unit = Ellipsoid.circle([0, 0], 1.0)
    assert ellipsoid_in_polygon_margin(unit, ConvexPolygon.box(-2, -2, 2, 2)) == pytest.approx(1.0)
    assert ellipsoid_in_polygon_margin(unit, ConvexPolygon.box(-1, -1, 1, 1)) == pytest.approx(0.0, abs=1e-12)


def test_inclusion_margin_implies_every_sample_inside(rng):
    n_contained = 0
    for _ in range(200):
        e, p = containment_instance(rng)
        if ellipsoid_in_polygon_margin(e, p) >= 0:
            n_contained += 1
            assert np.all(inside_polygon(e.sample(10_000, rng), p, tol=1e-9))
    assert n_contained > 10


def test_inclusion_margin_sign_matches_sampling(rng):
    for _ in range(200):
        e, p = containment_instance(rng)
        m = ellipsoid_in_polygon_margin(e, p)
        if abs(m) >= 1e-6:
            assert (m >= 0) == sampled_contained(e, p, 10_000, rng)


def test_separation_examples():
    unit = Ellipsoid.circle([0, 0], 1.0)
    assert ellipsoid_polygon_separation(unit, ConvexPolygon.box(3, -1, 4, 1)) == pytest.approx(2.0)
    assert ellipsoid_polygon_separation(unit, ConvexPolygon.box(-0.5, -0.5, 0.5, 0.5)) <= -1.0


def test_separation_sign_matches_sampling(rng):
    for _ in range(200):
        e, o = separation_instance(rng)
        m = ellipsoid_polygon_separation(e, o)
        if abs(m) >= 1e-6:
            assert (m > 0) == (not sampled_intersects(e, o, 10_000, rng))


def test_separation_rigid_invariance(rng):
    for _ in range(50):
        e, o = separation_instance(rng)
        th, t = rng.uniform(-np.pi, np.pi), rng.uniform(-3, 3, size=2)
        R = rotation(th)
        e2 = Ellipsoid(R @ e.center + t, R @ e.shape)
        assert abs(ellipsoid_polygon_separation(e2, o.moved(th, t)) - ellipsoid_polygon_separation(e, o)) < 1e-9


def _fd_check(fn, e: Ellipsoid, p: ConvexPolygon, step=1e-6):
    _, gc, gs = fn(e, p, with_grad=True)
    num_c = np.zeros(2)
    for k in range(2):
        d = np.zeros(2)
        d[k] = step
        num_c[k] = (fn(Ellipsoid(e.center + d, e.shape), p) - fn(Ellipsoid(e.center - d, e.shape), p)) / (2 * step)
    num_s = np.zeros((2, 2))
    for a in range(2):
        for b in range(2):
            d = np.zeros((2, 2))
            d[a, b] = step
            num_s[a, b] = (fn(Ellipsoid(e.center, e.shape + d), p) - fn(Ellipsoid(e.center, e.shape - d), p)) / (2 * step)
    return gc, num_c, gs, num_s


@pytest.mark.parametrize("fn", [ellipsoid_in_polygon_margin, ellipsoid_polygon_separation])
def test_margin_gradients_match_central_differences(fn, rng):
    checked = 0
    for _ in range(100):
        e, p = containment_instance(rng) if fn is ellipsoid_in_polygon_margin else separation_instance(rng)
        if fn is ellipsoid_in_polygon_margin:
            m = np.sort(p.offsets - p.normals @ e.center - np.linalg.norm(p.normals @ e.shape, axis=1))
            if m[1] - m[0] < 1e-3:
                continue  # two faces tie: nonsmooth
        gc, nc, gs, ns = _fd_check(fn, e, p)
        scale = max(1.0, np.abs(nc).max(), np.abs(ns).max())
        assert np.abs(gc - nc).max() <= 1e-4 * scale
        assert np.abs(gs - ns).max() <= 1e-4 * scale
        checked += 1
    assert checked > 50


def test_point_polygon_distance_examples(rng):
    assert point_polygon_distance([0, 0], ConvexPolygon.box(1, -1, 2, 1)) == pytest.approx(1.0)
    assert point_polygon_distance([0, 0], ConvexPolygon.box(-1, -1, 1, 1)) == 0.0
    for _ in range(20):
        p = random_polygon(rng)
        q = rng.uniform(-3, 3, size=2)
        if inside_polygon(q[None], p)[0]:
            continue
        brute = np.linalg.norm(polygon_boundary(p, 100_000, rng) - q, axis=1).min()
        assert point_polygon_distance(q, p) == pytest.approx(brute, abs=1e-4)


def test_segment_intersection(rng):
    sq = ConvexPolygon.box(-1, -1, 1, 1)
    assert segment_intersects_polygon([-2, 0], [2, 0], sq)
    assert not segment_intersects_polygon([2, 2], [3, 5], sq)
    for _ in range(1000):
        p = random_polygon(rng)
        a, b = rng.uniform(-2, 2, size=(2, 2))
        samples = a + np.linspace(0, 1, 1000)[:, None] * (b - a)
        dense = inside_polygon(samples, p, tol=0.0).any()
        exact = segment_intersects_polygon(a, b, p)
        if dense:
            assert exact
        elif exact:
            # a grazing hit that fell between two samples
            gap = min(point_polygon_distance(q, p) for q in samples)
            assert gap <= np.linalg.norm(b - a) / 999


def test_mvee_square_corners():
    e = minimum_enclosing_ellipsoid([(0, 0), (1, 0), (1, 1), (0, 1)])
    assert np.allclose(e.center, [0.5, 0.5], atol=1e-5)
    assert np.allclose(e.semi_axes(), np.sqrt(2) / 2, atol=1e-5)


def test_mvee_points_on_circle():
    t = np.linspace(0, 2 * np.pi, 37)[:-1]
    e = minimum_enclosing_ellipsoid(np.column_stack([2 + 1.5 * np.cos(t), -1 + 1.5 * np.sin(t)]))
    assert np.allclose(e.center, [2, -1], atol=1e-5)
    assert np.allclose(e.semi_axes(), 1.5, atol=1e-5)


def test_mvee_is_tight(rng):
    pts = rng.normal(size=(100, 2)) @ np.array([[1.0, 0.3], [0.0, 0.4]])
    e = minimum_enclosing_ellipsoid(pts)
    assert np.all(e.contains(pts, tol=1e-6))
    shrunk = Ellipsoid(e.center, e.shape * np.sqrt(0.95))
    assert not np.all(shrunk.contains(pts))


def test_mvee_collinear_input():
    with pytest.raises(DegenerateInputError):
        minimum_enclosing_ellipsoid([(0, 0), (1, 1), (2, 2), (3, 3)])
