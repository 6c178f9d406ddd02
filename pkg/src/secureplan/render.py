"""SVG figures of plans and simulation frames.

Every drawn element gets an SVG id (``gid``) and an entry in a manifest that
records the geometry it was drawn from, so a figure can be checked against
the trace it claims to show.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure as MplFigure
from matplotlib.patches import Polygon as PolygonPatch

from .dynamics import RobotState
from .planner import NlpSolution
from .planner.verify import reactive_ellipse
from .reactive_set import ReactiveSetModel
from .sensor import CELL_SIZE, SensorParams, fov_polygon

KNOWN_COLOR = "#d62728"
UNKNOWN_COLOR = "black"
ELLIPSE_COLOR = "#2ca02c"
FOV_COLOR = "#1f77b4"


class Figure:
    """Axes plus the manifest of what has been drawn on them."""

    def __init__(self, bounds, title: str = ""):
        self.fig = MplFigure(figsize=(7, 7 * (bounds[3] - bounds[1]) / (bounds[2] - bounds[0]) + 0.5))
        self.ax = self.fig.add_subplot()
        self.bounds = bounds
        self.ax.set_xlim(bounds[0], bounds[2])
        self.ax.set_ylim(bounds[1], bounds[3])
        self.ax.set_aspect("equal")
        self.ax.set_xlabel("x [m]")
        self.ax.set_ylabel("y [m]")
        if title:
            self.ax.set_title(title)
        self.manifest: list[dict] = []

    def _add(self, kind: str, geometry, **extra) -> str:
        gid = f"{kind}-{sum(e['kind'] == kind for e in self.manifest)}"
        self.manifest.append({"id": gid, "kind": kind, "geometry": np.asarray(geometry, dtype=float).tolist(), **extra})
        return gid

    def polygon(self, verts, kind: str, face, edge, alpha=1.0, fill=True):
        gid = self._add(kind, verts)
        self.ax.add_patch(PolygonPatch(verts, closed=True, facecolor=face if fill else "none", edgecolor=edge, alpha=alpha, gid=gid, lw=0.8))

    def obstacles(self, known, unknown=()):
        for o in known:
            self.polygon(o.vertices, "known_obstacle", KNOWN_COLOR, KNOWN_COLOR, 0.8)
        for o in unknown:
            self.polygon(o.vertices, "unknown_obstacle", UNKNOWN_COLOR, UNKNOWN_COLOR, 0.9)

    def path(self, xy, kind: str = "path", color: str = "black", style: str = "-"):
        gid = self._add(kind, xy)
        self.ax.plot(xy[:, 0], xy[:, 1], style, color=color, lw=1.2, gid=gid)

    def ellipse(self, x: np.ndarray, rs: ReactiveSetModel, node: int):
        e = reactive_ellipse(rs, x)
        gid = self._add("reactive_ellipse", np.vstack([e.center, e.shape]), node=node)
        b = e.boundary(72)
        self.ax.add_patch(PolygonPatch(b, closed=True, facecolor=ELLIPSE_COLOR, edgecolor=ELLIPSE_COLOR, alpha=0.25, gid=gid, lw=0.6))

    def fov(self, x: np.ndarray, sp: SensorParams, node: int):
        verts = fov_polygon(RobotState.from_array(x), sp).vertices
        gid = self._add("fov", verts, node=node)
        self.ax.add_patch(PolygonPatch(verts, closed=True, facecolor="none", edgecolor=FOV_COLOR, alpha=0.6, gid=gid, lw=0.6, ls="--"))

    def arrows(self, X: np.ndarray, scale: float = 0.3):
        gid = self._add("velocity", X[:, [0, 1, 2, 3]])
        u = X[:, 3] * np.cos(X[:, 2]) * scale
        v = X[:, 3] * np.sin(X[:, 2]) * scale
        self.ax.quiver(X[:, 0], X[:, 1], u, v, angles="xy", scale_units="xy", scale=1, width=0.003, color="0.3", gid=gid)

    def marker(self, p, kind: str, style: str, color: str, size: float = 10):
        gid = self._add(kind, np.asarray(p, dtype=float).reshape(-1, 2))
        self.ax.plot([p[0]], [p[1]], style, color=color, ms=size, mew=2, gid=gid)

    def belief(self, bounds, observed_free: np.ndarray, cell: float = CELL_SIZE):
        gid = self._add("observed_free", [[int(observed_free.sum())]])
        img = np.where(observed_free, 1.0, np.nan)
        rows, cols = observed_free.shape
        extent = (bounds[0], bounds[0] + cols * cell, bounds[1], bounds[1] + rows * cell)
        self.ax.imshow(img, origin="lower", extent=extent, cmap="Greys", vmin=0, vmax=8, alpha=0.35, gid=gid, interpolation="nearest")

    def save(self, path) -> list[dict]:
        self.ax.set_xlim(self.bounds[0], self.bounds[2])
        self.ax.set_ylim(self.bounds[1], self.bounds[3])
        # fixed hash salt and no date: identical input gives identical bytes
        with matplotlib.rc_context({"svg.hashsalt": "secureplan"}):
            self.fig.savefig(path, format="svg", metadata={"Date": None})
        return self.manifest


def plan_figure(sc, sol: NlpSolution, path, known, unknown=(), title: str = "") -> list[dict]:
    """Path, node velocity arrows, reactive ellipses and every lag-th FOV."""
    f = Figure(sc.bounds, title)
    f.obstacles(known, unknown)
    f.path(sol.X[:, :2])
    f.arrows(sol.X)
    for i, x in enumerate(sol.X):
        f.ellipse(x, sc.reactive, i)
    step = max(sol.lag, 1)
    for i in range(0, sol.K, step):
        f.fov(sol.X[i], sc.sensor, i)
    f.marker(sc.start.position, "start", "o", "tab:blue")
    f.marker(sc.goal, "goal", "o", "tab:green", 14)
    return f.save(path)


def frame_figure(sc, trace, upto: int, path, title: str = "", detection=None) -> list[dict]:
    """Simulation state after record ``upto``: belief, realized path, current plan."""
    t = trace.records[upto].t if trace.records else 0.0
    snaps = [k for k in trace.beliefs if k <= t + 1e-9]
    known, free = trace.beliefs[max(snaps)] if snaps else (sc.provided_obstacles, None)
    f = Figure(sc.bounds, title)
    if free is not None:
        f.belief(sc.bounds, free)
    unknown = [o for o in sc.true_obstacles if not any(o.same_as(k, 1e-9) for k in known)]
    f.obstacles(known, unknown)
    X = trace.states[: upto + 1]
    if len(X):
        f.path(X[:, :2], "realized_path", "black")
        f.ellipse(X[-1], sc.reactive, upto)
        f.fov(X[-1], sc.sensor, upto)
    idx = trace.records[upto].plan_index if trace.records else 0
    if trace.plans:
        f.path(trace.plans[max(idx, 0)].X[:, :2], "planned_path", "tab:blue", "--")
    if detection is not None:
        f.marker(detection, "detection", "x", "red", 14)
    f.marker(sc.goal, "goal", "o", "tab:green", 14)
    return f.save(path)


def write_manifest(manifest: list[dict], path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
