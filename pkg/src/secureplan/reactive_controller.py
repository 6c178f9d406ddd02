"""Short-horizon MPC evasive controller.

The controller minimizes, over a horizon of ``H`` acceleration commands,

    sum_k  w_obs / (clearance(p_k, O) + 0.05) + w_anchor * |p_k - p_anchor|^2
    + w_speed * (v_H^2 + omega_H^2)

with a projected-gradient method on box-constrained controls. The gradient is
obtained with a hand-written adjoint pass over an explicit-Euler prediction
model. Everything is vectorized over a batch of independent problems so the
reactive-set calibration can simulate whole obstacle families at once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import ModelParams, RobotState, ControlInput, clamp_speeds, rk4_step, wrap_angle
from .geometry import ConvexPolygon

log = logging.getLogger(__name__)

CLEARANCE_OFFSET = 0.05
MIN_DENOMINATOR = 0.01


class NonConvergentManeuverError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReactParams:
    horizon: int = 10
    dt: float = 0.1
    weight_obstacle: float = 1.0
    weight_anchor: float = 4.0
    weight_speed: float = 10.0
    rest_threshold: float = 1e-2
    iterations: int = 100
    sim_dt: float = 0.02
    time_cap: float = 10.0

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.dt <= 0 or self.sim_dt <= 0:
            raise ValueError("time steps must be positive")
        for name in ("weight_obstacle", "weight_anchor", "weight_speed", "rest_threshold"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def substeps(self) -> int:
        return max(1, int(round(self.dt / self.sim_dt)))


def _pack_polygons(obstacles: Sequence[ConvexPolygon]) -> np.ndarray:
    """Stack polygon vertices into (B, V, 2), padding by repeating the last vertex."""
    vmax = max(len(o.vertices) for o in obstacles)
    out = np.empty((len(obstacles), vmax, 2))
    for b, o in enumerate(obstacles):
        nv = len(o.vertices)
        out[b, :nv] = o.vertices
        out[b, nv:] = o.vertices[-1]
    return out


def _signed_clearance(p: np.ndarray, verts: np.ndarray):
    """Signed distance (negative inside) from points p (B, 2) to packed polygons, with gradient."""
    a = verts
    b = np.roll(verts, -1, axis=1)
    d = b - a
    dd = np.einsum("bvi,bvi->bv", d, d)
    rel = p[:, None, :] - a
    safe = np.where(dd > 0, dd, 1.0)
    t = np.where(dd > 0, np.clip(np.einsum("bvi,bvi->bv", rel, d) / safe, 0.0, 1.0), 0.0)
    q = a + t[..., None] * d
    diff = p[:, None, :] - q
    dist = np.linalg.norm(diff, axis=2)
    k = np.argmin(dist, axis=1)
    idx = np.arange(len(p))
    dmin = dist[idx, k]
    direction = diff[idx, k] / np.maximum(dmin, 1e-12)[:, None]
    # CCW polygon: point is inside iff it lies left of every nonzero edge
    cross = d[..., 0] * rel[..., 1] - d[..., 1] * rel[..., 0]
    inside = np.all((cross >= 0) | (dd == 0), axis=1)
    sign = np.where(inside, -1.0, 1.0)
    return sign * dmin, sign[:, None] * direction


class _BatchMPC:
    def __init__(self, anchors: np.ndarray, verts: np.ndarray, rp: ReactParams, model: ModelParams):
        self.anchors = anchors
        self.verts = verts
        self.rp = rp
        self.model = model
        self.scale = np.array([model.a_max, model.alpha_max])

    def _stage(self, p: np.ndarray, verts: np.ndarray, anchors: np.ndarray):
        rp = self.rp
        clr, g_clr = _signed_clearance(p, verts)
        den = clr + CLEARANCE_OFFSET
        clipped = den < MIN_DENOMINATOR
        den = np.maximum(den, MIN_DENOMINATOR)
        rel = p - anchors
        cost = rp.weight_obstacle / den + rp.weight_anchor * np.einsum("bi,bi->b", rel, rel)
        g = np.where(clipped[:, None], 0.0, -rp.weight_obstacle / den[:, None] ** 2 * g_clr)
        g = g + 2.0 * rp.weight_anchor * rel
        return cost, g

    def rollout(self, x0: np.ndarray, un: np.ndarray, sel=slice(None), need_grad: bool = False):
        """Predicted cost (and gradient w.r.t. normalized controls) for batch ``sel``."""
        rp = self.rp
        dt = rp.dt
        verts = self.verts[sel]
        anchors = self.anchors[sel]
        u = un * self.scale
        h = rp.horizon
        states = np.empty((h + 1,) + x0.shape)
        states[0] = x0
        total = np.zeros(len(x0))
        stage_grads = np.empty((h + 1, len(x0), 2))
        for k in range(h):
            s = states[k]
            nxt = s.copy()
            nxt[:, 0] += dt * s[:, 3] * np.cos(s[:, 2])
            nxt[:, 1] += dt * s[:, 3] * np.sin(s[:, 2])
            nxt[:, 2] += dt * s[:, 4]
            nxt[:, 3] += dt * u[:, k, 0]
            nxt[:, 4] += dt * u[:, k, 1]
            states[k + 1] = nxt
            c, g = self._stage(nxt[:, :2], verts, anchors)
            total += c
            stage_grads[k + 1] = g
        vh, wh = states[h, :, 3], states[h, :, 4]
        total += rp.weight_speed * (vh**2 + wh**2)
        if not need_grad:
            return total, None
        lam = np.zeros(x0.shape)
        lam[:, :2] = stage_grads[h]
        lam[:, 3] += 2.0 * rp.weight_speed * vh
        lam[:, 4] += 2.0 * rp.weight_speed * wh
        grad = np.empty_like(un)
        for k in range(h - 1, -1, -1):
            grad[:, k, 0] = dt * lam[:, 3]
            grad[:, k, 1] = dt * lam[:, 4]
            if k == 0:
                break
            s = states[k]
            th, v = s[:, 2], s[:, 3]
            new = lam.copy()
            new[:, 0] = lam[:, 0] + stage_grads[k][:, 0]
            new[:, 1] = lam[:, 1] + stage_grads[k][:, 1]
            new[:, 2] = lam[:, 2] + dt * (-v * np.sin(th) * lam[:, 0] + v * np.cos(th) * lam[:, 1])
            new[:, 3] = lam[:, 3] + dt * (np.cos(th) * lam[:, 0] + np.sin(th) * lam[:, 1])
            new[:, 4] = lam[:, 4] + dt * lam[:, 2]
            lam = new
        return total, grad * self.scale

    def braking_guess(self, x0: np.ndarray) -> np.ndarray:
        rp = self.rp
        un = np.zeros((len(x0), rp.horizon, 2))
        v = x0[:, 3].copy()
        w = x0[:, 4].copy()
        for k in range(rp.horizon):
            a = np.clip(-v / rp.dt, -self.model.a_max, self.model.a_max)
            al = np.clip(-w / rp.dt, -self.model.alpha_max, self.model.alpha_max)
            un[:, k, 0] = a / self.model.a_max
            un[:, k, 1] = al / self.model.alpha_max
            v = v + rp.dt * a
            w = w + rp.dt * al
        return un

    def solve(self, x0: np.ndarray, un0: np.ndarray, sel=slice(None)) -> tuple[np.ndarray, np.ndarray]:
        """Projected gradient with per-problem adaptive steps. Returns (controls, ok-mask)."""
        un = np.clip(un0, -1.0, 1.0)
        cost, grad = self.rollout(x0, un, sel, need_grad=True)
        step = np.full(len(x0), 0.05)
        active = np.ones(len(x0), dtype=bool)
        for _ in range(self.rp.iterations):
            cand = np.clip(un - step[:, None, None] * grad, -1.0, 1.0)
            delta = cand - un
            new_cost, _ = self.rollout(x0, cand, sel)
            decrease = np.einsum("bki,bki->b", grad, delta)
            accept = active & (new_cost <= cost + 1e-4 * decrease)
            if np.any(accept):
                un = np.where(accept[:, None, None], cand, un)
                cost = np.where(accept, new_cost, cost)
                step = np.where(accept, np.minimum(step * 1.5, 10.0), step)
                _, g_new = self.rollout(x0, un, sel, need_grad=True)
                grad = np.where(accept[:, None, None], g_new, grad)
            step = np.where(~accept, step * 0.5, step)
            moved = np.abs(delta).max(axis=(1, 2))
            active &= ~((moved < 1e-7) | (step < 1e-9))
            if not np.any(active):
                break
        ok = np.all(np.isfinite(un), axis=(1, 2)) & np.isfinite(cost)
        return un, ok


def _fallback_brake(x: np.ndarray, model: ModelParams) -> np.ndarray:
    return np.column_stack([-np.sign(x[:, 3]) * model.a_max, -np.sign(x[:, 4]) * model.alpha_max])


def react_step(
    x: RobotState,
    anchor: RobotState,
    obstacle: ConvexPolygon,
    rp: ReactParams | None = None,
    model: ModelParams | None = None,
) -> ControlInput:
    """First control of the evasive MPC problem."""
    rp = rp or ReactParams()
    model = model or ModelParams()
    mpc = _BatchMPC(anchor.position[None, :], _pack_polygons([obstacle]), rp, model)
    x0 = x.as_array()[None, :].astype(float)
    un, ok = mpc.solve(x0, mpc.braking_guess(x0))
    if not ok[0]:
        log.warning("reactive MPC failed at %s; braking", x)
        u = _fallback_brake(x0, model)[0]
    else:
        u = un[0, 0] * mpc.scale
    u = model.clamp_control(u)
    return ControlInput(float(u[0]), float(u[1]))


@dataclass
class ManeuverResult:
    times: np.ndarray
    states: np.ndarray  # (T, 5)
    controls: np.ndarray  # (T, 2), control applied from each state onwards
    converged: bool
    fallbacks: int = 0

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]


def run_maneuvers(
    starts: np.ndarray,
    obstacles: Sequence[ConvexPolygon],
    rp: ReactParams | None = None,
    model: ModelParams | None = None,
    anchors: np.ndarray | None = None,
) -> list[ManeuverResult]:
    """Simulate a batch of evasive maneuvers until rest or the time cap.

    Each maneuver holds its MPC control for ``rp.dt`` and integrates the plant
    with RK4 at ``rp.sim_dt``. Once the linear speed reaches rest (falls below
    ``rest_threshold`` or changes sign) the remaining angular speed is braked
    in place, which leaves the position unchanged.
    """
    rp = rp or ReactParams()
    model = model or ModelParams()
    x = np.array(starts, dtype=float).reshape(-1, 5)
    n = len(x)
    if anchors is None:
        anchors = x[:, :2].copy()
    mpc = _BatchMPC(np.asarray(anchors, dtype=float), _pack_polygons(obstacles), rp, model)
    hist_x = [[row.copy()] for row in x]
    hist_u: list[list[np.ndarray]] = [[] for _ in range(n)]
    fallbacks = np.zeros(n, dtype=int)
    v_sign = np.sign(x[:, 3])
    stopped = np.abs(x[:, 3]) < rp.rest_threshold
    done = np.hypot(x[:, 3], x[:, 4]) < rp.rest_threshold
    warm = mpc.braking_guess(x)
    max_steps = int(round(rp.time_cap / rp.sim_dt))
    steps = 0
    lim = np.array([model.a_max, model.alpha_max])

    def advance(rows: np.ndarray, u: np.ndarray) -> None:
        nxt = clamp_speeds(rk4_step(x[rows], u, rp.sim_dt), model)
        nxt[:, 2] = wrap_angle(nxt[:, 2])
        x[rows] = nxt
        for b, i in enumerate(rows):
            hist_u[i].append(u[b].copy())
            hist_x[i].append(nxt[b].copy())

    while not np.all(done) and steps < max_steps:
        mpc_rows = np.flatnonzero(~done & ~stopped)
        if len(mpc_rows):
            un, ok = mpc.solve(x[mpc_rows], warm[mpc_rows], sel=mpc_rows)
            u_mpc = un[:, 0] * mpc.scale
            if np.any(~ok):
                u_mpc[~ok] = _fallback_brake(x[mpc_rows][~ok], model)
                fallbacks[mpc_rows[~ok]] += 1
            u_mpc = model.clamp_control(u_mpc)
            shifted = np.concatenate([un[:, 1:], un[:, -1:]], axis=1)
            warm[mpc_rows] = np.where(ok[:, None, None], shifted, mpc.braking_guess(x[mpc_rows]))
        for _ in range(rp.substeps):
            rows = np.flatnonzero(~done)
            if len(rows) == 0 or steps >= max_steps:
                break
            u = np.zeros((len(rows), 2))
            in_mpc = ~stopped[rows]
            if np.any(in_mpc):
                u[in_mpc] = u_mpc[np.searchsorted(mpc_rows, rows[in_mpc])]
            spin = ~in_mpc
            if np.any(spin):
                u[spin] = np.clip(-x[rows[spin]][:, 3:5] / rp.sim_dt, -lim, lim)
            advance(rows, u)
            steps += 1
            v = x[rows, 3]
            stopped[rows] |= (np.abs(v) < rp.rest_threshold) | (np.sign(v) != v_sign[rows])
            done[rows] = np.hypot(x[rows, 3], x[rows, 4]) < rp.rest_threshold
    results = []
    for i in range(n):
        states = np.array(hist_x[i])
        ctrl = np.vstack([np.array(hist_u[i]).reshape(-1, 2), np.zeros((1, 2))])
        times = np.arange(len(states)) * rp.sim_dt
        results.append(ManeuverResult(times, states, ctrl, bool(done[i]), int(fallbacks[i])))
    return results


def run_maneuver(
    x0: RobotState,
    obstacle: ConvexPolygon,
    rp: ReactParams | None = None,
    model: ModelParams | None = None,
) -> ManeuverResult:
    """Evasive maneuver anchored at ``x0``; raises if rest is not reached in time."""
    res = run_maneuvers(x0.as_array()[None, :], [obstacle], rp, model)[0]
    if not res.converged:
        raise NonConvergentManeuverError(f"maneuver from {x0} did not reach rest within the time cap")
    return res
