"""Direct-collocation transcription with analytic first derivatives.

Decision vector ``z = [X.ravel(), U.ravel(), t_f]`` with ``X`` of shape
(K, 5) and ``U`` of shape (K, 2). Equalities are written ``c(z) = 0`` and
inequalities ``g(z) >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dynamics import N_CONTROL, N_STATE, derivative, derivative_jacobians
from ..geometry import ConvexPolygon
from ..sensor import fov_template
from .problem import PlanningError, PlanProblem

NZ_PER_NODE = N_STATE + N_CONTROL


def _rot_stack(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c, s = np.cos(theta), np.sin(theta)
    R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    dR = np.stack([np.stack([-s, -c], -1), np.stack([c, -s], -1)], -2)
    return R, dR


def signed_distance_grad(p: np.ndarray, poly: ConvexPolygon) -> tuple[float, np.ndarray]:
    """Signed point-polygon distance and its gradient (C1 outside, piecewise inside)."""
    slack = poly.offsets - poly.normals @ p
    if np.all(slack >= 0):
        k = int(np.argmin(slack))
        return -float(slack[k]), poly.normals[k].copy()
    w = poly.vertices - p
    a, b = w, np.roll(w, -1, axis=0)
    d = b - a
    t = np.clip(-np.einsum("ij,ij->i", a, d) / np.einsum("ij,ij->i", d, d), 0.0, 1.0)
    q = a + t[:, None] * d
    dist2 = np.einsum("ij,ij->i", q, q)
    k = int(np.argmin(dist2))
    dist = float(np.sqrt(dist2[k]))
    return dist, -q[k] / dist


def separation_batch(C: np.ndarray, S: np.ndarray, o: ConvexPolygon):
    """Vectorized ellipse-polygon separation (same branches as the scalar version).

    ``C`` is (K, 2), ``S`` is (K, 2, 2); returns values (K,), gradients with
    respect to the centers (K, 2) and to the shape matrices (K, 2, 2).
    """
    K = len(C)
    N, b = o.normals, o.offsets
    beta = b[None, :] - C @ N.T  # (K, F)
    st_n = np.einsum("fa,kab->kfb", N, S)  # rows (S^T n_f)^T
    nu = np.linalg.norm(st_n, axis=2)
    val = np.empty(K)
    gc = np.empty((K, 2))
    gS = np.empty((K, 2, 2))
    inside = np.all(beta >= 0.0, axis=1)
    if inside.any():
        ii = np.flatnonzero(inside)
        depth = beta[ii] / nu[ii]
        f = np.argmin(depth, axis=1)
        val[ii] = -1.0 - depth[np.arange(len(ii)), f]
        n_f = N[f]
        nu_f = nu[ii, f]
        gc[ii] = n_f / nu_f[:, None]
        gS[ii] = (beta[ii, f] / nu_f**3)[:, None, None] * np.einsum("ka,kb->kab", n_f, st_n[ii, f])
    out = np.flatnonzero(~inside)
    if len(out):
        Sinv = np.linalg.inv(S[out])
        w = np.einsum("kab,kvb->kva", Sinv, o.vertices[None, :, :] - C[out, None, :])
        a, bb = w, np.roll(w, -1, axis=1)
        d = bb - a
        t = np.clip(-np.einsum("kvj,kvj->kv", a, d) / np.einsum("kvj,kvj->kv", d, d), 0.0, 1.0)
        q = a + t[..., None] * d
        dist2 = np.einsum("kvj,kvj->kv", q, q)
        e = np.argmin(dist2, axis=1)
        qk = q[np.arange(len(out)), e]
        dist = np.sqrt(dist2[np.arange(len(out)), e])
        val[out] = dist - 1.0
        gq = qk / dist[:, None]
        sg = np.einsum("kba,kb->ka", Sinv, gq)  # S^-T g
        gc[out] = -sg
        gS[out] = -np.einsum("ka,kb->kab", sg, qk)
    return val, gc, gS


@dataclass
class RowBlocks:
    """Row ranges of the constraint blocks (for counting and reporting)."""

    defects: slice
    start: slice
    goal: slice
    goal_speed: slice
    obstacles: slice
    visibility: slice


class Transcription:
    """Constraint system of the secure (or baseline) minimum-time problem."""

    def __init__(self, problem: PlanProblem, secure: bool = True):
        if problem.lag is None:
            raise PlanningError("transcription needs a fixed lag")
        self.p = problem
        self.secure = secure
        self.K = problem.K
        self.lag = problem.lag
        self.n = NZ_PER_NODE * self.K + 1
        self.obstacles = list(problem.belief.known_obstacles)
        tmpl = ConvexPolygon.from_vertices(fov_template(problem.sensor))
        self.fov_normals = tmpl.normals
        self.fov_offsets = tmpl.offsets
        # fixed-lag pairs (i, i - lag), then interval-end pairs (i, i - lag - 1): the
        # latter keep node i inside the FOV of the witness that the dense check
        # assigns to the whole interval before it
        fixed = [(i, i - self.lag) for i in range(self.lag, self.K)]
        ends = [(i, i - self.lag - 1) for i in range(self.lag + 1, self.K)]
        self.pairs = np.array(fixed + ends, dtype=int).reshape(-1, 2)
        self.n_fixed_pairs = len(fixed)
        if not secure:
            self.pairs = self.pairs[:0]
            self.n_fixed_pairs = 0
        self.fixed_goal_speed = problem.goal_speed_cap == 0.0
        K = self.K
        n_def = N_STATE * (K - 1)
        n_gs = 2 if self.fixed_goal_speed else 0
        n_eq = n_def + N_STATE + 2 + n_gs
        # the start node is data, not a decision: its obstacle rows are constants
        # (a violated constant would make the problem infeasible), so they are left out
        n_obs = (K - 1) * len(self.obstacles)
        n_vis = len(self.fov_offsets) * len(self.pairs)
        self.blocks = RowBlocks(
            defects=slice(0, n_def),
            start=slice(n_def, n_def + N_STATE),
            goal=slice(n_def + N_STATE, n_def + N_STATE + 2),
            goal_speed=slice(n_def + N_STATE + 2, n_eq),
            obstacles=slice(0, n_obs),
            visibility=slice(n_obs, n_obs + n_vis),
        )
        self.n_eq = n_eq
        self.n_ineq = n_obs + n_vis
        self._cache_key = None
        self._cache = None
        self._start_obstacle_margin = np.inf

    # ------------------------------------------------------------------
    # layout
    def ix(self, i, k) -> int:
        return N_STATE * i + k

    def iu(self, i, k) -> int:
        return N_STATE * self.K + N_CONTROL * i + k

    @property
    def itf(self) -> int:
        return self.n - 1

    def unpack(self, z):
        z = np.asarray(z, dtype=float)
        K = self.K
        X = z[: N_STATE * K].reshape(K, N_STATE)
        U = z[N_STATE * K: NZ_PER_NODE * K].reshape(K, N_CONTROL)
        return X, U, float(z[-1])

    def pack(self, X, U, t_f) -> np.ndarray:
        return np.concatenate([np.asarray(X, float).ravel(), np.asarray(U, float).ravel(), [float(t_f)]])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        p, m = self.p, self.p.model
        K = self.K
        xmin, ymin, xmax, ymax = p.belief.bounds
        lo_x = np.tile([xmin, ymin, -np.inf, m.v_lower, -m.omega_max], (K, 1))
        hi_x = np.tile([xmax, ymax, np.inf, m.v_max, m.omega_max], (K, 1))
        v_rng = p.reactive.v_range
        lo_x[:, 3] = np.maximum(lo_x[:, 3], -v_rng)
        hi_x[:, 3] = np.minimum(hi_x[:, 3], v_rng)
        w_rng = min(m.omega_max, p.reactive.omega_range)
        lo_x[:, 4], hi_x[:, 4] = -w_rng, w_rng
        # the start is fixed by equalities (its speeds may even sit outside the box)
        lo_x[0] = -np.inf
        hi_x[0] = np.inf
        if self.fixed_goal_speed:
            # pinned by equalities; a coinciding active bound makes the QP degenerate
            lo_x[-1, 3:] = -np.inf
            hi_x[-1, 3:] = np.inf
        else:
            cap = p.goal_speed_cap
            lo_x[-1, 3:] = np.maximum(lo_x[-1, 3:], -cap)
            hi_x[-1, 3:] = np.minimum(hi_x[-1, 3:], cap)
        lo_u = np.tile([-m.a_max, -m.alpha_max], (K, 1))
        hi_u = np.tile([m.a_max, m.alpha_max], (K, 1))
        lo = np.concatenate([lo_x.ravel(), lo_u.ravel(), [1e-2]])
        hi = np.concatenate([hi_x.ravel(), hi_u.ravel(), [p.tf_max]])
        return lo, hi

    # ------------------------------------------------------------------
    def objective(self, z) -> float:
        return float(z[-1])

    def objective_grad(self, z) -> np.ndarray:
        g = np.zeros(self.n)
        g[-1] = 1.0
        return g

    def _evaluate(self, z):
        key = np.asarray(z, dtype=float).tobytes()
        if key == self._cache_key:
            return self._cache
        X, U, t_f = self.unpack(z)
        ce, Je = self._equalities(X, U, t_f)
        ci, Ji = self._inequalities(X)
        self._cache_key, self._cache = key, (ce, Je, ci, Ji)
        return self._cache

    def eq(self, z) -> np.ndarray:
        return self._evaluate(z)[0]

    def eq_jac(self, z) -> np.ndarray:
        return self._evaluate(z)[1]

    def ineq(self, z) -> np.ndarray:
        return self._evaluate(z)[2]

    def ineq_jac(self, z) -> np.ndarray:
        return self._evaluate(z)[3]

    # ------------------------------------------------------------------
    def _equalities(self, X, U, t_f):
        K = self.K
        h = t_f / (K - 1)
        c = np.zeros(self.n_eq)
        J = np.zeros((self.n_eq, self.n))
        f = derivative(X, U)
        fx, fu = derivative_jacobians(X, U)
        zeta = X[1:] - X[:-1] - 0.5 * h * (f[:-1] + f[1:])
        c[self.blocks.defects] = zeta.ravel()
        eye = np.eye(N_STATE)
        for i in range(K - 1):
            rows = slice(N_STATE * i, N_STATE * (i + 1))
            J[rows, self.ix(i, 0): self.ix(i, 0) + N_STATE] = -eye - 0.5 * h * fx[i]
            J[rows, self.ix(i + 1, 0): self.ix(i + 1, 0) + N_STATE] = eye - 0.5 * h * fx[i + 1]
            J[rows, self.iu(i, 0): self.iu(i, 0) + N_CONTROL] = -0.5 * h * fu[i]
            J[rows, self.iu(i + 1, 0): self.iu(i + 1, 0) + N_CONTROL] = -0.5 * h * fu[i + 1]
            J[rows, self.itf] = -0.5 / (K - 1) * (f[i] + f[i + 1])
        s = self.p.start.as_array()
        r0 = self.blocks.start.start
        c[self.blocks.start] = X[0] - s
        J[r0: r0 + N_STATE, 0:N_STATE] = eye
        r0 = self.blocks.goal.start
        c[self.blocks.goal] = X[-1, :2] - self.p.goal
        J[r0, self.ix(K - 1, 0)] = 1.0
        J[r0 + 1, self.ix(K - 1, 1)] = 1.0
        if self.fixed_goal_speed:
            r0 = self.blocks.goal_speed.start
            c[self.blocks.goal_speed] = X[-1, 3:5]
            J[r0, self.ix(K - 1, 3)] = 1.0
            J[r0 + 1, self.ix(K - 1, 4)] = 1.0
        return c, J

    def _reactive(self, X):
        """Body-frame reactive-set parameters (and speed derivatives) at all nodes."""
        v = np.clip(X[:, 3], -self.p.reactive.v_range, self.p.reactive.v_range)
        w = np.clip(X[:, 4], -self.p.reactive.omega_range, self.p.reactive.omega_range)
        return self.p.reactive.body_params(v, w, derivatives=True)

    def _inequalities(self, X):
        g = np.zeros(self.n_ineq)
        J = np.zeros((self.n_ineq, self.n))
        if self.n_ineq == 0:
            return g, J
        n_o = len(self.obstacles)
        g_obs = np.zeros(self.K * n_o)
        J_obs = np.zeros((self.K * n_o, self.n))
        if self.secure:
            off, ax, d_off_v, d_off_w, d_ax_v, d_ax_w = self._reactive(X)
            ax = ax + self.p.margin  # clearance floor as a uniform pad
            self._obstacle_rows_secure(X, off, ax, d_off_v, d_off_w, d_ax_v, d_ax_w, g_obs, J_obs)
            self._visibility_rows(X, off, ax - self.p.margin, d_off_v, d_off_w, d_ax_v, d_ax_w, g, J)
        else:
            self._obstacle_rows_baseline(X, g_obs, J_obs)
        g[self.blocks.obstacles] = g_obs[n_o:]
        J[self.blocks.obstacles] = J_obs[n_o:]
        self._start_obstacle_margin = float(g_obs[:n_o].min()) if n_o else np.inf
        return g, J

    def _obstacle_rows_secure(self, X, off, ax, dov, dow, dav, daw, g, J):
        n_obs = len(self.obstacles)
        R, dR = _rot_stack(X[:, 2])
        C = X[:, :2] + np.einsum("kab,kb->ka", R, off)
        S = R * ax[:, None, :]
        dC = np.stack([np.einsum("kab,kb->ka", dR, off), np.einsum("kab,kb->ka", R, dov), np.einsum("kab,kb->ka", R, dow)], 1)
        dS = np.stack([dR * ax[:, None, :], R * dav[:, None, :], R * daw[:, None, :]], 1)
        rows = np.arange(self.K) * n_obs
        cols = N_STATE * np.arange(self.K)
        for k, o in enumerate(self.obstacles):
            val, gc, gS = separation_batch(C, S, o)
            g[rows + k] = val
            J[rows + k, cols] = gc[:, 0]
            J[rows + k, cols + 1] = gc[:, 1]
            extra = np.einsum("ka,kma->km", gc, dC) + np.einsum("kab,kmab->km", gS, dS)
            for m in range(3):
                J[rows + k, cols + 2 + m] = extra[:, m]

    def _obstacle_rows_baseline(self, X, g, J):
        n_obs = len(self.obstacles)
        clear = self.p.baseline_clearance
        for i in range(self.K):
            for k, o in enumerate(self.obstacles):
                d, grad = signed_distance_grad(X[i, :2], o)
                r = i * n_obs + k
                g[r] = d - clear
                J[r, self.ix(i, 0)] = grad[0]
                J[r, self.ix(i, 1)] = grad[1]

    def _visibility_rows(self, X, off, ax, dov, dow, dav, daw, g, J):
        if not len(self.pairs):
            return
        I, Jn = self.pairs[:, 0], self.pairs[:, 1]
        n0, b0 = self.fov_normals, self.fov_offsets  # (F, 2), (F,)
        F = len(b0)
        d = X[I, :2] - X[Jn, :2]  # (P, 2)
        Rj, dRj = _rot_stack(-X[Jn, 2])  # R(-theta_j) and R'(-theta_j)
        phi = X[I, 2] - X[Jn, 2]
        Rp, dRp = _rot_stack(phi)
        Rm, dRm = _rot_stack(-phi)
        a_i, s_i = off[I], ax[I]
        local_d = np.einsum("pab,pb->pa", Rj, d)  # R(-theta_j) d
        rot_a = np.einsum("pab,pb->pa", Rp, a_i)
        drot_a = np.einsum("pab,pb->pa", dRp, a_i)
        rot_av = np.einsum("pab,pb->pa", Rp, dov[I])
        rot_aw = np.einsum("pab,pb->pa", Rp, dow[I])
        dlocal_d = -np.einsum("pab,pb->pa", dRj, d)  # d/dtheta_j of R(-theta_j) d
        m = np.einsum("pab,fb->pfa", Rm, n0)  # R(-phi) n0, (P, F, 2)
        dm = -np.einsum("pab,fb->pfa", dRm, n0)  # d/dphi
        w = s_i[:, None, :] * m
        t3 = np.linalg.norm(w, axis=2)  # (P, F)
        u = w / t3[..., None]
        val = b0[None, :] - local_d @ n0.T - rot_a @ n0.T - t3
        # n0^T R(-theta_j) = (R(theta_j) n0)^T
        world_n = np.einsum("pba,fb->pfa", Rj, n0)  # R(-theta_j)^T n0
        dt1_dthj = dlocal_d @ n0.T
        dt2_dphi = drot_a @ n0.T
        dt3_dphi = np.einsum("pfa,pfa->pf", u, s_i[:, None, :] * dm)
        dt3_ds = u * m  # (P, F, 2)
        dt2_dv = rot_av @ n0.T
        dt2_dw = rot_aw @ n0.T
        dt3_dv = np.einsum("pfa,pa->pf", dt3_ds, dav[I])
        dt3_dw = np.einsum("pfa,pa->pf", dt3_ds, daw[I])
        base = self.blocks.visibility.start
        P = len(self.pairs)
        rows = base + F * np.arange(P)[:, None] + np.arange(F)[None, :]  # (P, F)
        ci = (N_STATE * I)[:, None] + np.zeros((1, F), dtype=int)
        cj = (N_STATE * Jn)[:, None] + np.zeros((1, F), dtype=int)
        g[rows] = val - self.p.margin
        dphi = dt2_dphi + dt3_dphi
        # np.add.at accumulates, so i == j (lag 0) is handled too
        np.add.at(J, (rows, ci), -world_n[..., 0])
        np.add.at(J, (rows, ci + 1), -world_n[..., 1])
        np.add.at(J, (rows, cj), world_n[..., 0])
        np.add.at(J, (rows, cj + 1), world_n[..., 1])
        np.add.at(J, (rows, ci + 2), -dphi)
        np.add.at(J, (rows, cj + 2), dphi - dt1_dthj)
        np.add.at(J, (rows, ci + 3), -(dt2_dv + dt3_dv))
        np.add.at(J, (rows, ci + 4), -(dt2_dw + dt3_dw))

    # ------------------------------------------------------------------
    def violation(self, z) -> float:
        """Max violation over equalities, inequalities and bounds."""
        ce, _, ci, _ = self._evaluate(z)
        lo, hi = self.bounds()
        parts = [0.0]
        if len(ce):
            parts.append(float(np.max(np.abs(ce))))
        if len(ci):
            parts.append(float(np.max(-ci)))
        parts.append(float(np.max(lo - z)))
        parts.append(float(np.max(z - hi)))
        return max(parts)

    def node_margins(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Per-node obstacle margin (min over obstacles) and visibility margin (min over faces)."""
        _, _, ci, _ = self._evaluate(z)
        K = self.K
        obs = np.full(K, np.inf)
        if self.obstacles:
            obs[1:] = ci[self.blocks.obstacles].reshape(K - 1, len(self.obstacles)).min(axis=1)
            obs[0] = self._start_obstacle_margin
        vis = np.full(K, np.nan)
        if len(self.pairs):
            F = len(self.fov_offsets)
            rows = ci[self.blocks.visibility].reshape(-1, F)[: self.n_fixed_pairs]
            vis[self.pairs[: self.n_fixed_pairs, 0]] = rows.min(axis=1) + self.p.margin
        return obs, vis
