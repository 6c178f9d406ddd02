"""Initial guesses: grid A* with a trapezoidal speed profile, or a resampled warm start."""

from __future__ import annotations

import heapq

import numpy as np

from ..dynamics import RobotState, wrap_angle
from ..geometry import (
    ConvexPolygon,
    Ellipsoid,
    ellipsoid_in_polygon_margin,
    ellipsoid_polygon_separation,
    rotation,
)
from ..sensor import BeliefMap, fov_polygon
from .problem import LAG_SECONDS, InfeasibleScenarioError, NlpSolution, PlanProblem
from .verify import reactive_ellipse


def distance_field(points: np.ndarray, poly: ConvexPolygon) -> np.ndarray:
    """Unsigned Euclidean distance from each point to ``poly`` (zero inside)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    a = poly.vertices
    b = np.roll(a, -1, axis=0)
    d = b - a
    rel = pts[:, None, :] - a[None]
    t = np.clip(np.einsum("pkj,kj->pk", rel, d) / np.einsum("kj,kj->k", d, d), 0.0, 1.0)
    q = rel - t[..., None] * d[None]
    dist = np.sqrt(np.einsum("pkj,pkj->pk", q, q)).min(axis=1)
    dist[poly.contains(pts)] = 0.0
    return dist


def traversable(belief: BeliefMap, clearance: float) -> np.ndarray:
    """Cells whose center is farther than ``clearance`` from every known obstacle."""
    c = belief.centers().reshape(-1, 2)
    ok = np.ones(len(c), dtype=bool)
    for o in belief.known_obstacles:
        ok &= distance_field(c, o) > clearance
    return ok.reshape(belief.shape)


_MOVES = [(di, dj, float(np.hypot(di, dj))) for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj]


def astar(free: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> list[tuple[int, int]]:
    """8-connected A* on a boolean grid; raises if no path exists."""
    rows, cols = free.shape
    if not (free[start] and free[goal]):
        raise InfeasibleScenarioError("start or goal cell is blocked in the inflated grid")
    g = np.full(free.shape, np.inf)
    parent = {}
    g[start] = 0.0
    heap = [(np.hypot(start[0] - goal[0], start[1] - goal[1]), 0.0, start)]
    closed = np.zeros(free.shape, dtype=bool)
    while heap:
        _, gc, cur = heapq.heappop(heap)
        if closed[cur]:
            continue
        closed[cur] = True
        if cur == goal:
            path = [cur]
            while cur in parent:
                cur = parent[cur]
                path.append(cur)
            return path[::-1]
        for di, dj, cost in _MOVES:
            nb = (cur[0] + di, cur[1] + dj)
            if not (0 <= nb[0] < rows and 0 <= nb[1] < cols) or not free[nb] or closed[nb]:
                continue
            # no diagonal corner cutting
            if di and dj and not (free[cur[0] + di, cur[1]] and free[cur[0], cur[1] + dj]):
                continue
            ng = gc + cost
            if ng < g[nb]:
                g[nb] = ng
                parent[nb] = cur
                heapq.heappush(heap, (ng + np.hypot(nb[0] - goal[0], nb[1] - goal[1]), ng, nb))
    raise InfeasibleScenarioError("no grid path between start and goal")


def _segment_free(belief: BeliefMap, free: np.ndarray, a: np.ndarray, b: np.ndarray) -> bool:
    n = max(2, int(np.ceil(np.linalg.norm(b - a) / (0.25 * belief.cell))) + 1)
    pts = a + np.linspace(0, 1, n)[:, None] * (b - a)
    for p in pts:
        i, j = belief.cell_index(p)
        if not (0 <= i < free.shape[0] and 0 <= j < free.shape[1]) or not free[i, j]:
            return False
    return True


def grid_path(belief: BeliefMap, start, goal, clearance: float) -> np.ndarray:
    """Shortest grid path from ``start`` to ``goal``, shortcut by line of sight."""
    free = traversable(belief, clearance)
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    cells = astar(free, belief.cell_index(start), belief.cell_index(goal))
    c = belief.centers()
    pts = np.array([start] + [c[i, j] for i, j in cells[1:-1]] + [goal])
    out = [pts[0]]
    k = 0
    while k < len(pts) - 1:
        nxt = k + 1
        for m in range(len(pts) - 1, k + 1, -1):
            if _segment_free(belief, free, pts[k], pts[m]):
                nxt = m
                break
        out.append(pts[nxt])
        k = nxt
    return np.array(out)


def _speed_profile(s: np.ndarray, v0: float, v_end: float, v_cap: np.ndarray, a: float) -> np.ndarray:
    """Fastest profile below ``v_cap`` with acceleration ``a`` (forward/backward passes).

    A start speed above the cap is brought down as fast as ``a`` allows.
    """
    v = np.minimum(v_cap, np.inf).astype(float)
    v[0] = v0
    ds = np.diff(s)
    for k in range(1, len(s)):
        up = np.sqrt(v[k - 1] ** 2 + 2 * a * ds[k - 1])
        down = np.sqrt(max(v[k - 1] ** 2 - 2 * a * ds[k - 1], 0.0))
        v[k] = min(up, max(down, v_cap[k]))
    v[-1] = min(v[-1], v_end)
    for k in range(len(s) - 2, 0, -1):
        v[k] = min(v[k], np.sqrt(v[k + 1] ** 2 + 2 * a * ds[k]))
    return v


def reactive_speed_limit(problem: PlanProblem, xy: np.ndarray, heading: np.ndarray) -> np.ndarray:
    """Largest straight-line speed at each pose whose padded reactive set clears the
    known obstacles and fits in the FOV of the pose one lag earlier."""
    rs = problem.reactive
    vs = np.linspace(0.0, min(problem.model.v_max, rs.v_range), 41)

    def fits_fov(v):
        e = reactive_ellipse(rs, np.array([0.0, 0.0, 0.0, v, 0.0]))
        back = RobotState(-v * LAG_SECONDS, 0.0, 0.0)
        return ellipsoid_in_polygon_margin(e, fov_polygon(back, problem.sensor)) >= 0

    v_vis = max([v for v in vs if fits_fov(v)], default=0.0)
    out = np.full(len(xy), v_vis)
    obstacles = problem.belief.known_obstacles
    if not obstacles:
        return out
    for k, (p, th) in enumerate(zip(xy, heading)):
        out[k] = 0.0
        for v in vs[vs <= v_vis][::-1]:
            off, ax = rs.body_params(v, 0.0)
            R = rotation(th)
            e = Ellipsoid(p + R @ off, R * (ax + problem.margin))
            if all(ellipsoid_polygon_separation(e, o) >= 0 for o in obstacles):
                out[k] = v
                break
    return out


def time_parameterize(
    path: np.ndarray, problem: PlanProblem, K: int, reactive_limit: bool = False
) -> tuple[np.ndarray, np.ndarray, float]:
    """Nodes on ``path`` with a trapezoidal speed profile at half the speed limit.

    With ``reactive_limit`` the profile is additionally capped by
    :func:`reactive_speed_limit` so that the guess nearly satisfies the
    reactive-set constraints of the secure problem.
    """
    m = problem.model
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    length = float(cum[-1])
    X = np.zeros((K, 5))
    U = np.zeros((K, 2))
    x0 = problem.start.as_array()
    if length < 1e-9:
        X[:] = x0
        X[:, 3:] = 0.0
        X[0] = x0
        return X, U, 1.0
    v0 = max(float(x0[3]), 0.0)
    s = np.linspace(0.0, length, max(200, int(length / 0.005)))
    cap = np.full(len(s), 0.5 * m.v_max)
    if reactive_limit:
        coarse = np.linspace(0.0, length, max(20, int(length / 0.05)))
        pts = np.column_stack([np.interp(coarse, cum, path[:, 0]), np.interp(coarse, cum, path[:, 1])])
        seg_idx = np.clip(np.searchsorted(cum, coarse, side="right") - 1, 0, len(seg) - 1)
        dirs = np.diff(path, axis=0)
        th = np.arctan2(dirs[seg_idx, 1], dirs[seg_idx, 0])
        lim = reactive_speed_limit(problem, pts, th)
        # a pose's limit applies a little before and after it (corners, segment joints)
        lim = np.minimum.reduce([lim, np.roll(lim, 1), np.roll(lim, -1)])
        cap = np.minimum(cap, np.interp(s, coarse, lim))
    v = np.maximum(_speed_profile(s, v0, problem.goal_speed_cap, np.maximum(cap, 0.05), m.a_max), 1e-9)
    dt = np.diff(s) / (0.5 * (v[1:] + v[:-1]))
    t = np.concatenate([[0.0], np.cumsum(dt)])
    t_f = float(t[-1])
    tk = np.linspace(0.0, t_f, K)
    sk = np.interp(tk, t, s)
    xy = np.column_stack([np.interp(sk, cum, path[:, 0]), np.interp(sk, cum, path[:, 1])])
    vk = np.interp(tk, t, v)
    d = np.gradient(xy, tk, axis=0)
    heading = np.arctan2(d[:, 1], d[:, 0])
    heading[0] = x0[2]
    # continuous heading starting at the start heading
    heading = x0[2] + np.concatenate([[0.0], np.cumsum(wrap_angle(np.diff(heading)))])
    omega = np.gradient(heading, tk)
    X[:, :2] = xy
    X[:, 2] = heading
    X[:, 3] = vk
    X[:, 4] = np.clip(omega, -m.omega_max, m.omega_max)
    X[0] = x0
    X[-1, 3:] = 0.0 if problem.goal_speed_cap == 0 else X[-1, 3:]
    U[:, 0] = np.clip(np.gradient(X[:, 3], tk), -m.a_max, m.a_max)
    U[:, 1] = np.clip(np.gradient(X[:, 4], tk), -m.alpha_max, m.alpha_max)
    return X, U, t_f


def resample(sol: NlpSolution, K: int, t_from: float = 0.0) -> tuple[np.ndarray, np.ndarray, float]:
    """Linear resampling of a solution (optionally only its tail after ``t_from``)."""
    ts = sol.times
    t_from = float(np.clip(t_from, 0.0, sol.t_f))
    t_f = sol.t_f - t_from
    if K == sol.K and t_from == 0.0:
        return sol.X.copy(), sol.U.copy(), sol.t_f
    tk = t_from + np.linspace(0.0, t_f, K)
    X = np.column_stack([np.interp(tk, ts, sol.X[:, k]) for k in range(sol.X.shape[1])])
    U = np.column_stack([np.interp(tk, ts, sol.U[:, k]) for k in range(sol.U.shape[1])])
    return X, U, max(t_f, 1e-2)


GUESS_CLEARANCES = (0.3, 0.15)


def initial_guess(
    problem: PlanProblem, warm: NlpSolution | None = None, t_from: float = 0.0, secure: bool = False
):
    """Guess ``(X, U, t_f)`` for ``problem``: resampled ``warm`` if given, else grid A*.

    The grid is inflated by the reactive floor radius plus the margin. For the
    secure problem a path with more clearance is preferred when one exists and
    the speed profile is capped by the reactive-set speed limit.
    """
    if warm is not None:
        X, U, t_f = resample(warm, problem.K, t_from)
        X[0] = problem.start.as_array()
        return X, U, t_f
    base = problem.reactive.floor + problem.margin
    clearances = [c for c in GUESS_CLEARANCES if c > base] if secure else []
    for c in clearances + [base]:
        try:
            path = grid_path(problem.belief, problem.start.position, problem.goal, c)
            break
        except InfeasibleScenarioError:
            if c == base:
                raise
    return time_parameterize(path, problem, problem.K, reactive_limit=secure)
