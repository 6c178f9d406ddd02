"""Planar convex geometry: polygons, ellipsoids and the margins between them.

Polygons are stored in half-space form ``{y : n_k . y <= b_k}`` with unit
normals, alongside their counterclockwise vertex list. Ellipsoids are stored
as ``{c + S z : |z| <= 1}``. All margin functions optionally return analytic
gradients with respect to the ellipsoid center ``c`` and shape ``S`` so they
can be used directly as NLP constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

VERTEX_TOL = 1e-9


class GeometryError(ValueError):
    pass


class DegenerateEllipsoidError(GeometryError):
    pass


class DegenerateInputError(GeometryError):
    pass


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotation_derivative(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[-s, -c], [c, -s]])


@dataclass(frozen=True, eq=False)
class ConvexPolygon:
    """Bounded convex polygon.

    Build it with :meth:`from_vertices`; faces are derived from the vertices.
    """

    vertices: np.ndarray
    normals: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)

    @classmethod
    def from_vertices(cls, vertices: Sequence[Sequence[float]]) -> "ConvexPolygon":
        v = np.array(vertices, dtype=float).reshape(-1, 2)
        if len(v) < 3:
            raise GeometryError("a polygon needs at least 3 vertices")
        # drop closing duplicate
        if np.allclose(v[0], v[-1]):
            v = v[:-1]
        x, y = v[:, 0], v[:, 1]
        signed_area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
        if abs(signed_area) < 1e-12:
            raise GeometryError("polygon has zero area")
        if signed_area < 0:
            v = v[::-1].copy()
        edges = np.roll(v, -1, axis=0) - v
        lengths = np.linalg.norm(edges, axis=1)
        if np.any(lengths < 1e-12):
            raise GeometryError("polygon has repeated vertices")
        normals = np.column_stack([edges[:, 1], -edges[:, 0]]) / lengths[:, None]
        offsets = np.einsum("ij,ij->i", normals, v)
        poly = cls(v, normals, offsets)
        slack = offsets[None, :] - v @ normals.T
        if np.any(slack < -VERTEX_TOL):
            raise GeometryError("vertices are not in convex position")
        return poly

    @classmethod
    def box(cls, xmin: float, ymin: float, xmax: float, ymax: float) -> "ConvexPolygon":
        return cls.from_vertices([(xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax)])

    @property
    def n_faces(self) -> int:
        return len(self.offsets)

    @property
    def area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return float(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def bounds(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def contains(self, points, tol: float = 0.0) -> np.ndarray | bool:
        """Closed containment test; accepts one point or an (N, 2) array."""
        p = np.asarray(points, dtype=float)
        single = p.ndim == 1
        p = p.reshape(-1, 2)
        inside = np.all(p @ self.normals.T <= self.offsets + tol, axis=1)
        return bool(inside[0]) if single else inside

    def transformed(self, linear: np.ndarray, translation: np.ndarray) -> "ConvexPolygon":
        v = self.vertices @ np.asarray(linear).T + np.asarray(translation)
        return ConvexPolygon.from_vertices(v)

    def moved(self, theta: float, translation) -> "ConvexPolygon":
        """Rigid motion: rotate about the origin by ``theta`` then translate."""
        return self.transformed(rotation(theta), np.asarray(translation, dtype=float))

    def boundary_samples(self, spacing: float) -> np.ndarray:
        pts = []
        nv = len(self.vertices)
        for k in range(nv):
            a = self.vertices[k]
            b = self.vertices[(k + 1) % nv]
            n = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing)))
            t = np.arange(n) / n
            pts.append(a + t[:, None] * (b - a))
        return np.vstack(pts)

    def to_list(self) -> list[list[float]]:
        return [[float(x), float(y)] for x, y in self.vertices]

    def same_as(self, other: "ConvexPolygon", tol: float = 1e-12) -> bool:
        return self.vertices.shape == other.vertices.shape and bool(
            np.allclose(self.vertices, other.vertices, atol=tol, rtol=0.0)
        )


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(2))
        object.__setattr__(self, "shape", np.asarray(self.shape, dtype=float).reshape(2, 2))

    @classmethod
    def circle(cls, center, radius: float) -> "Ellipsoid":
        return cls(np.asarray(center, dtype=float), radius * np.eye(2))

    @property
    def area(self) -> float:
        return float(np.pi * abs(np.linalg.det(self.shape)))

    def boundary(self, n: int = 64) -> np.ndarray:
        t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        z = np.column_stack([np.cos(t), np.sin(t)])
        return self.center + z @ self.shape.T

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform samples from the ellipsoid's interior."""
        r = np.sqrt(rng.random(n))
        t = rng.random(n) * 2 * np.pi
        z = np.column_stack([r * np.cos(t), r * np.sin(t)])
        return self.center + z @ self.shape.T

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        z = unit_ball_map(self)(np.asarray(points, dtype=float).reshape(-1, 2))
        return np.linalg.norm(z, axis=1) <= 1.0 + tol

    def semi_axes(self) -> np.ndarray:
        return np.linalg.svd(self.shape, compute_uv=False)


@dataclass(frozen=True, eq=False)
class AffineMap2:
    linear: np.ndarray
    translation: np.ndarray

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.linear.T + self.translation

    def inverse(self) -> "AffineMap2":
        inv = np.linalg.inv(self.linear)
        return AffineMap2(inv, -inv @ self.translation)

    def compose(self, other: "AffineMap2") -> "AffineMap2":
        """``self`` after ``other``."""
        return AffineMap2(self.linear @ other.linear, self.linear @ other.translation + self.translation)


def unit_ball_map(e: Ellipsoid) -> AffineMap2:
    """Affine map sending ``e`` onto the closed unit disc: ``F(y) = S^-1 (y - c)``."""
    if abs(np.linalg.det(e.shape)) <= 1e-12:
        raise DegenerateEllipsoidError("ellipsoid shape matrix is singular")
    inv = np.linalg.inv(e.shape)
    return AffineMap2(inv, -inv @ e.center)


def face_margins(e: Ellipsoid, p: ConvexPolygon) -> np.ndarray:
    """Per-face inclusion margins ``b_k - n_k.c - |S^T n_k|`` (meters)."""
    support = np.linalg.norm(p.normals @ e.shape, axis=1)
    return p.offsets - p.normals @ e.center - support


def ellipsoid_in_polygon_margin(e: Ellipsoid, p: ConvexPolygon, with_grad: bool = False):
    """Signed inclusion margin of ``e`` in ``p``; nonnegative iff ``e`` is inside.

    With ``with_grad`` also returns gradients with respect to the center and
    the shape matrix, taken from the first minimizing face.
    """
    margins = face_margins(e, p)
    k = int(np.argmin(margins))
    value = float(margins[k])
    if not with_grad:
        return value
    n = p.normals[k]
    st_n = e.shape.T @ n
    norm = np.linalg.norm(st_n)
    grad_c = -n
    grad_s = -np.outer(n, st_n) / norm if norm > 0 else np.zeros((2, 2))
    return value, grad_c, grad_s


def _closest_point_to_origin(w: np.ndarray) -> tuple[np.ndarray, int, float]:
    """Closest boundary point of the polygon with CCW vertices ``w`` to the origin.

    Returns the point, the index of the edge start vertex and the barycentric
    weight of the end vertex.
    """
    a = w
    b = np.roll(w, -1, axis=0)
    d = b - a
    dd = np.einsum("ij,ij->i", d, d)
    t = np.clip(-np.einsum("ij,ij->i", a, d) / dd, 0.0, 1.0)
    q = a + t[:, None] * d
    dist = np.einsum("ij,ij->i", q, q)
    k = int(np.argmin(dist))
    return q[k], k, float(t[k])


def ellipsoid_polygon_separation(e: Ellipsoid, o: ConvexPolygon, with_grad: bool = False):
    """Separation of ``e`` and ``o`` measured in the ellipsoid's unit-ball frame.

    Outside: ``dist(0, F(o)) - 1`` (positive iff disjoint). When the ellipsoid
    center lies inside ``o`` the value is ``-1 - depth`` where ``depth`` is the
    unit-frame distance from the origin to the nearest face of ``F(o)``; the
    two branches meet continuously at ``-1``.
    """
    fmap = unit_ball_map(e)
    beta = o.offsets - o.normals @ e.center
    st_n = o.normals @ e.shape  # rows are (S^T n_k)^T
    nu = np.linalg.norm(st_n, axis=1)
    if np.all(beta >= 0.0):
        depth_k = beta / nu
        k = int(np.argmin(depth_k))
        value = -1.0 - float(depth_k[k])
        if not with_grad:
            return value
        grad_c = o.normals[k] / nu[k]
        grad_s = beta[k] / nu[k] ** 3 * np.outer(o.normals[k], st_n[k])
        return value, grad_c, grad_s
    w = fmap(o.vertices)
    q, _, _ = _closest_point_to_origin(w)
    dist = float(np.linalg.norm(q))
    value = dist - 1.0
    if not with_grad:
        return value
    g = q / dist
    s_inv_t_g = fmap.linear.T @ g
    grad_c = -s_inv_t_g
    grad_s = -np.outer(s_inv_t_g, q)
    return value, grad_c, grad_s


def point_polygon_distance(p, poly: ConvexPolygon, with_grad: bool = False):
    """Euclidean distance from ``p`` to ``poly`` (zero inside)."""
    p = np.asarray(p, dtype=float)
    if poly.contains(p):
        return (0.0, np.zeros(2)) if with_grad else 0.0
    q, _, _ = _closest_point_to_origin(poly.vertices - p)
    dist = float(np.linalg.norm(q))
    if not with_grad:
        return dist
    return dist, -q / dist


def signed_distance(p, poly: ConvexPolygon) -> float:
    """Distance outside, minus the depth to the nearest face inside."""
    p = np.asarray(p, dtype=float)
    slack = poly.offsets - poly.normals @ p
    if np.all(slack >= 0):
        return -float(slack.min())
    return point_polygon_distance(p, poly)


def _clip_segments(a: np.ndarray, b: np.ndarray, poly: ConvexPolygon):
    """Cyrus-Beck clipping of segments a->b against ``poly`` (vectorized)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d = b - a
    nd = d @ poly.normals.T  # (M, F)
    slack = poly.offsets[None, :] - a @ poly.normals.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t = slack / nd
    enter = np.where(nd < 0, t, -np.inf).max(axis=1)
    leave = np.where(nd > 0, t, np.inf).min(axis=1)
    parallel = np.abs(nd) <= 1e-15
    parallel_slack = np.where(parallel, slack, np.inf).min(axis=1)
    return np.maximum(enter, 0.0), np.minimum(leave, 1.0), parallel_slack


def segment_intersects_polygon(a, b, poly: ConvexPolygon, tol: float = 1e-12) -> bool:
    """True iff the closed segment [a, b] meets the closed polygon."""
    lo, hi, par = _clip_segments(np.asarray(a, float), np.asarray(b, float), poly)
    return bool(lo[0] <= hi[0] + tol and par[0] >= -tol)


def segments_cross_interior(a, points: np.ndarray, poly: ConvexPolygon, eps: float = 1e-9) -> np.ndarray:
    """For segments from ``a`` to each row of ``points``: does it pass through the open interior?

    Segments that only touch the boundary (e.g. ending on it) do not count.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    a = np.broadcast_to(np.asarray(a, dtype=float), points.shape)
    lo, hi, par = _clip_segments(a, points, poly)
    length = np.linalg.norm(points - a, axis=1)
    return ((hi - lo) * length > eps) & (par > eps)


def minimum_enclosing_ellipsoid(points, tol: float = 1e-6, max_iter: int = 10_000) -> Ellipsoid:
    """Minimum-area ellipse containing ``points``.

    Khachiyan's barycentric iteration with Todd-Yildirim away steps, run on
    the convex hull of the input. The result is rescaled so that every input
    point is contained exactly.
    """
    from scipy.spatial import ConvexHull, QhullError

    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 3:
        raise DegenerateInputError("need at least 3 points")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[-1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateInputError("points are collinear")
    try:
        hull = pts[ConvexHull(pts).vertices]
    except QhullError as exc:
        raise DegenerateInputError(str(exc)) from exc

    n, d = hull.shape
    q = np.vstack([hull.T, np.ones(n)])
    u = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        x = (q * u) @ q.T
        m = np.einsum("ij,ji->i", q.T, np.linalg.solve(x, q))
        j_add = int(np.argmax(m))
        eps_add = m[j_add] / (d + 1) - 1.0
        support = u > 0
        j_drop = int(np.where(support, m, np.inf).argmin())
        eps_drop = 1.0 - m[j_drop] / (d + 1)
        if max(eps_add, eps_drop) <= tol:
            break
        if eps_add >= eps_drop:
            beta = (m[j_add] - d - 1) / ((d + 1) * (m[j_add] - 1))
            u = (1 - beta) * u
            u[j_add] += beta
        else:
            beta = min((d + 1 - m[j_drop]) / ((d + 1) * (m[j_drop] - 1)), u[j_drop] / (1 - u[j_drop]))
            u = (1 + beta) * u
            u[j_drop] -= beta
            u[j_drop] = max(u[j_drop], 0.0)
    c = hull.T @ u
    cov = (hull.T * u) @ hull - np.outer(c, c)
    a_mat = np.linalg.inv(cov) / d
    r = pts - c
    worst = float(np.max(np.einsum("ij,jk,ik->i", r, a_mat, r)))
    if worst > 1.0:
        a_mat = a_mat / worst
    w, v = np.linalg.eigh(a_mat)
    shape = v @ np.diag(1.0 / np.sqrt(w)) @ v.T
    return Ellipsoid(c, shape)
