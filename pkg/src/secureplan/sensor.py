"""Triangular field of view, occlusion-aware visibility and the belief map.

The belief keeps two things: the list of obstacles known so far and an
occupancy grid of cells that have been seen free. Cells are tested with the
cell-center rule throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import RobotState
from .geometry import ConvexPolygon, rotation, segments_cross_interior

CELL_SIZE = 0.05
WITNESS_SPACING = 0.02


@dataclass(frozen=True)
class SensorParams:
    range: float = 2.0
    half_angle: float = np.pi / 3

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError("sensor range must be positive")
        if not 0 < self.half_angle < np.pi / 2:
            raise ValueError("half_angle must lie in (0, pi/2)")


@dataclass(frozen=True)
class DetectionEvent:
    time: float
    obstacle: ConvexPolygon
    robot_state: RobotState


def fov_template(sp: SensorParams) -> np.ndarray:
    """Body-frame triangle vertices: apex, then the two far corners."""
    c, s = sp.range * np.cos(sp.half_angle), sp.range * np.sin(sp.half_angle)
    return np.array([[0.0, 0.0], [c, -s], [c, s]])


def fov_polygon(x: RobotState, sp: SensorParams | None = None) -> ConvexPolygon:
    sp = sp or SensorParams()
    return ConvexPolygon.from_vertices(fov_template(sp) @ rotation(x.heading).T + x.position)


def _occluded(origin: np.ndarray, points: np.ndarray, obstacles: Sequence[ConvexPolygon]) -> np.ndarray:
    blocked = np.zeros(len(points), dtype=bool)
    for o in obstacles:
        lo, hi = o.bounds()[:2], o.bounds()[2:]
        # cheap reject: segment bounding boxes that miss the obstacle's box
        smin = np.minimum(points, origin)
        smax = np.maximum(points, origin)
        cand = np.all(smax >= lo, axis=1) & np.all(smin <= hi, axis=1) & ~blocked
        if cand.any():
            blocked[cand] = segments_cross_interior(origin, points[cand], o)
    return blocked


def visible_points(points, x: RobotState, true_obstacles: Sequence[ConvexPolygon], sp: SensorParams | None = None) -> np.ndarray:
    """Vectorized :func:`visible` for an (N, 2) array."""
    sp = sp or SensorParams()
    points = np.atleast_2d(np.asarray(points, dtype=float))
    ok = np.asarray(fov_polygon(x, sp).contains(points, tol=1e-12)).reshape(-1)
    if ok.any():
        idx = np.flatnonzero(ok)
        ok[idx] = ~_occluded(x.position, points[idx], true_obstacles)
    return ok


def visible(p, x: RobotState, true_obstacles: Sequence[ConvexPolygon], sp: SensorParams | None = None) -> bool:
    """Is ``p`` inside the FOV with an unobstructed sightline from the robot?"""
    return bool(visible_points(np.asarray(p, dtype=float)[None], x, true_obstacles, sp)[0])


def _is_known(o: ConvexPolygon, known: Sequence[ConvexPolygon]) -> bool:
    return any(o.same_as(k, tol=1e-9) for k in known)


def detect_region(
    x: RobotState,
    region: ConvexPolygon,
    true_obstacles: Sequence[ConvexPolygon],
    belief: "BeliefMap",
    time: float = 0.0,
) -> list[DetectionEvent]:
    """Unknown obstacles with a boundary witness in ``region`` seen from the robot position."""
    fx0, fy0, fx1, fy1 = region.bounds()
    events = []
    for o in true_obstacles:
        if _is_known(o, belief.known_obstacles):
            continue
        ox0, oy0, ox1, oy1 = o.bounds()
        if ox0 > fx1 or ox1 < fx0 or oy0 > fy1 or oy1 < fy0:
            continue
        pts = o.boundary_samples(WITNESS_SPACING)
        inside = np.asarray(region.contains(pts, tol=1e-12)).reshape(-1)
        if inside.any() and (~_occluded(x.position, pts[inside], true_obstacles)).any():
            events.append(DetectionEvent(float(time), o, x))
    return events


def detect(
    x: RobotState,
    true_obstacles: Sequence[ConvexPolygon],
    belief: "BeliefMap",
    sp: SensorParams | None = None,
    time: float = 0.0,
) -> list[DetectionEvent]:
    """One event per not-yet-known obstacle with a visible boundary witness."""
    return detect_region(x, fov_polygon(x, sp or SensorParams()), true_obstacles, belief, time)


@dataclass
class BeliefMap:
    """Known obstacles plus an occupancy grid of observed-free cells.

    ``bounds`` is ``(xmin, ymin, xmax, ymax)``; cell ``(i, j)`` has center
    ``(xmin + (j + 0.5) cell, ymin + (i + 0.5) cell)``.
    """

    bounds: tuple[float, float, float, float]
    cell: float = CELL_SIZE
    known_obstacles: list[ConvexPolygon] = field(default_factory=list)
    observed_free: np.ndarray | None = None

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin and self.cell > 0):
            raise ValueError("invalid belief bounds or cell size")
        self.shape = (int(np.ceil((ymax - ymin) / self.cell - 1e-9)), int(np.ceil((xmax - xmin) / self.cell - 1e-9)))
        if self.observed_free is None:
            self.observed_free = np.zeros(self.shape, dtype=bool)
        elif self.observed_free.shape != self.shape:
            raise ValueError("observed_free grid does not match bounds")
        self.known_obstacles = list(self.known_obstacles)
        self._blocked = np.zeros(self.shape, dtype=bool)
        for o in self.known_obstacles:
            self._blocked |= self.overlap_mask(o)
        self.observed_free &= ~self._blocked

    def copy(self) -> "BeliefMap":
        return BeliefMap(self.bounds, self.cell, list(self.known_obstacles), self.observed_free.copy())

    # grid geometry
    def centers(self, rows: slice = slice(None), cols: slice = slice(None)) -> np.ndarray:
        xmin, ymin = self.bounds[:2]
        ys = ymin + (np.arange(self.shape[0])[rows] + 0.5) * self.cell
        xs = xmin + (np.arange(self.shape[1])[cols] + 0.5) * self.cell
        X, Y = np.meshgrid(xs, ys)
        return np.stack([X, Y], axis=-1)

    def _window(self, box) -> tuple[slice, slice]:
        xmin, ymin = self.bounds[:2]
        j0 = max(0, int(np.floor((box[0] - xmin) / self.cell)) - 1)
        i0 = max(0, int(np.floor((box[1] - ymin) / self.cell)) - 1)
        j1 = min(self.shape[1], int(np.ceil((box[2] - xmin) / self.cell)) + 1)
        i1 = min(self.shape[0], int(np.ceil((box[3] - ymin) / self.cell)) + 1)
        return slice(i0, max(i0, i1)), slice(j0, max(j0, j1))

    def cell_index(self, p) -> tuple[int, int]:
        xmin, ymin = self.bounds[:2]
        return int(np.floor((p[1] - ymin) / self.cell)), int(np.floor((p[0] - xmin) / self.cell))

    def rasterize(self, poly: ConvexPolygon) -> np.ndarray:
        """Cells whose center lies in ``poly``."""
        mask = np.zeros(self.shape, dtype=bool)
        rows, cols = self._window(poly.bounds())
        c = self.centers(rows, cols)
        if c.size:
            mask[rows, cols] = poly.contains(c.reshape(-1, 2)).reshape(c.shape[:2])
        return mask

    def overlap_mask(self, poly: ConvexPolygon, tol: float = 1e-9) -> np.ndarray:
        """Cells whose closed square meets the interior of ``poly`` (separating-axis test)."""
        mask = np.zeros(self.shape, dtype=bool)
        rows, cols = self._window(poly.bounds())
        c = self.centers(rows, cols).reshape(-1, 2)
        if not len(c):
            return mask
        h = 0.5 * self.cell
        px0, py0, px1, py1 = poly.bounds()
        hit = (c[:, 0] - h < px1 - tol) & (c[:, 0] + h > px0 + tol) & (c[:, 1] - h < py1 - tol) & (c[:, 1] + h > py0 + tol)
        # lowest value of n . q over the square is n . c - h (|nx| + |ny|)
        support = c @ poly.normals.T - h * np.abs(poly.normals).sum(axis=1)
        hit &= np.all(support < poly.offsets - tol, axis=1)
        mask[rows, cols] = hit.reshape(rows.stop - rows.start, cols.stop - cols.start)
        return mask

    def known_obstacle_mask(self) -> np.ndarray:
        return self._blocked.copy()

    # updates
    def mark_visible(self, region: ConvexPolygon, origin, true_obstacles: Sequence[ConvexPolygon]) -> int:
        """Mark cells with centers in ``region`` and an unobstructed line to ``origin``."""
        mask = self.rasterize(region) & ~self._blocked & ~self.observed_free
        idx = np.argwhere(mask)
        if not len(idx):
            return 0
        pts = self.centers()[idx[:, 0], idx[:, 1]]
        ok = ~_occluded(np.asarray(origin, dtype=float), pts, true_obstacles)
        self.observed_free[idx[ok, 0], idx[ok, 1]] = True
        return int(ok.sum())

    def observe_disc(self, center, radius: float, true_obstacles: Sequence[ConvexPolygon], n_sides: int = 64) -> int:
        """Prior scan: a regular polygon inscribed in the disc, with occlusion."""
        t = 2 * np.pi * np.arange(n_sides) / n_sides
        ring = np.asarray(center, dtype=float) + radius * np.column_stack([np.cos(t), np.sin(t)])
        return self.mark_visible(ConvexPolygon.from_vertices(ring), center, true_obstacles)

    def add_obstacle(self, o: ConvexPolygon) -> None:
        if _is_known(o, self.known_obstacles):
            return
        self.known_obstacles.append(o)
        m = self.overlap_mask(o)
        self._blocked |= m
        self.observed_free &= ~m

    def free_cells(self) -> int:
        return int(self.observed_free.sum())

    def to_pgm(self, path) -> None:
        """Binary PGM, first row at the top: 255 observed free, 0 known obstacle, 128 unknown."""
        img = np.full(self.shape, 128, dtype=np.uint8)
        img[self.observed_free] = 255
        img[self._blocked] = 0
        img = img[::-1]
        with open(path, "wb") as fh:
            fh.write(f"P5\n{self.shape[1]} {self.shape[0]}\n255\n".encode("ascii"))
            fh.write(img.tobytes())


def update_belief(
    belief: BeliefMap,
    x: RobotState,
    events: Sequence[DetectionEvent],
    true_obstacles: Sequence[ConvexPolygon],
    sp: SensorParams | None = None,
) -> BeliefMap:
    """Add detected obstacles, then mark every visible cell center as free (in place)."""
    for ev in events:
        belief.add_obstacle(ev.obstacle)
    belief.mark_visible(fov_polygon(x, sp or SensorParams()), x.position, true_obstacles)
    return belief


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
