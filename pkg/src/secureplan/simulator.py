"""Closed-loop execution: plan, execute, sense, react on unsafe detections, replan.

One control step of ``dt`` is: pick the control for the current mode, integrate
the plant, check for collision, sense, update the belief, and finally decide
on a mode switch. Modes are ``PLAN_EXEC`` (following the current plan),
``REACT`` (evasive maneuver around a detected obstacle) and ``REPLAN`` (the
step on which a new plan is computed).
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dynamics import ControlInput, ModelParams, RobotState, integrate, wrap_angle
from .geometry import (
    ConvexPolygon,
    Ellipsoid,
    ellipsoid_polygon_separation,
    segment_intersects_polygon,
    signed_distance,
)
from .planner import NlpSolution, PlanningError, PlanProblem, SolverParams, plan, plan_baseline
from .planner.guess import astar, traversable
from .planner.verify import reactive_ellipse
from .reactive_controller import ReactParams, react_step
from .reactive_set import ReactiveSetModel
from .sensor import BeliefMap, DetectionEvent, SensorParams, detect, detect_region, fov_polygon, update_belief

log = logging.getLogger(__name__)

PLAN_EXEC, REACT, REPLAN = "PLAN_EXEC", "REACT", "REPLAN"
GOAL_TOL = 0.01


class ScenarioError(ValueError):
    """Scenario violates a standing assumption (e.g. no feasible path)."""


@dataclass(frozen=True)
class TrackingGains:
    """Feedback around the planned trajectory (all zeros gives pure open loop)."""

    k_long: float = 2.0
    k_lat: float = 4.0
    k_heading: float = 3.0
    k_v: float = 4.0
    k_omega: float = 4.0


@dataclass(frozen=True)
class SimParams:
    dt: float = 0.02
    t_max: float = 60.0
    wall_time_max: float | None = None
    prior_radius: float | None = None  # None: twice the sensor range
    settle_time: float = 2.0
    max_replans: int = 10
    # share of the acceleration limits the executed plans may use; the rest is
    # left to the tracking feedback (a plan braking at a_max cannot be corrected)
    plan_authority: float = 0.9
    tracking: TrackingGains = field(default_factory=TrackingGains)

    def __post_init__(self):
        if not (self.dt > 0 and self.t_max > 0 and self.settle_time >= 0):
            raise ValueError("dt, t_max must be positive and settle_time non-negative")
        if not 0 < self.plan_authority <= 1:
            raise ValueError("plan_authority must lie in (0, 1]")


@dataclass
class Scenario:
    name: str
    bounds: tuple[float, float, float, float]
    true_obstacles: list[ConvexPolygon]
    provided_obstacles: list[ConvexPolygon]
    start: RobotState
    goal: np.ndarray
    reactive: ReactiveSetModel
    model: ModelParams = field(default_factory=ModelParams)
    sensor: SensorParams = field(default_factory=SensorParams)
    solver: SolverParams = field(default_factory=SolverParams)
    controller: ReactParams = field(default_factory=ReactParams)
    sim: SimParams = field(default_factory=SimParams)
    K: int = 40
    margin: float = 0.01
    baseline_clearance: float = 0.1
    goal_speed_cap: float = 0.0
    reactive_source: str = "default"  # where the calibration came from (for saving)
    comment: str = ""

    def __post_init__(self):
        self.bounds = tuple(float(b) for b in self.bounds)
        self.goal = np.asarray(self.goal, dtype=float).reshape(2)

    @property
    def unknown_obstacles(self) -> list[ConvexPolygon]:
        return [o for o in self.true_obstacles if not any(o.same_as(p, 1e-9) for p in self.provided_obstacles)]

    def without_unknowns(self) -> "Scenario":
        """The same scenario with an accurate map (true obstacles = provided ones)."""
        return replace(self, true_obstacles=list(self.provided_obstacles))

    def validate(self) -> None:
        """Start and goal in true free space, and a path in both maps."""
        xmin, ymin, xmax, ymax = self.bounds
        for name, p in (("start", self.start.position), ("goal", self.goal)):
            if not (xmin <= p[0] <= xmax and ymin <= p[1] <= ymax):
                raise ScenarioError(f"{name} {p.tolist()} outside the world bounds")
            for o in self.true_obstacles + self.provided_obstacles:
                if signed_distance(p, o) <= 0:
                    raise ScenarioError(f"{name} {p.tolist()} lies inside an obstacle")
        clearance = self.reactive.floor
        for label, obstacles in (("true", self.true_obstacles), ("provided", self.provided_obstacles)):
            grid = BeliefMap(self.bounds, known_obstacles=obstacles)
            try:
                astar(traversable(grid, clearance), grid.cell_index(self.start.position), grid.cell_index(self.goal))
            except PlanningError as exc:
                raise ScenarioError(f"no feasible path in the {label} map: {exc}") from None

    def initial_belief(self) -> BeliefMap:
        """Provided map plus the prior observation around the start."""
        belief = BeliefMap(self.bounds, known_obstacles=list(self.provided_obstacles))
        radius = self.sim.prior_radius if self.sim.prior_radius is not None else 2.0 * self.sensor.range
        prior_scan(belief, self.start, self.true_obstacles, radius)
        update_belief(belief, self.start, detect(self.start, self.true_obstacles, belief, self.sensor), self.true_obstacles, self.sensor)
        return belief

    def problem(self, belief: BeliefMap, start: RobotState) -> PlanProblem:
        return PlanProblem(
            start=start,
            goal=self.goal,
            belief=belief,
            reactive=self.reactive,
            K=self.K,
            model=replace(
                self.model,
                a_max=self.model.a_max * self.sim.plan_authority,
                alpha_max=self.model.alpha_max * self.sim.plan_authority,
            ),
            sensor=self.sensor,
            margin=self.margin,
            goal_speed_cap=self.goal_speed_cap,
            baseline_clearance=self.baseline_clearance,
        )


def prior_scan(belief: BeliefMap, x: RobotState, true_obstacles: Sequence[ConvexPolygon], radius: float, n_sides: int = 64) -> None:
    """Observation of the disc around the start: visible obstacles become known, visible cells free."""
    t = 2 * np.pi * np.arange(n_sides) / n_sides
    disc = ConvexPolygon.from_vertices(x.position + radius * np.column_stack([np.cos(t), np.sin(t)]))
    for ev in detect_region(x, disc, true_obstacles, belief):
        belief.add_obstacle(ev.obstacle)
    belief.mark_visible(disc, x.position, true_obstacles)


@dataclass
class StepRecord:
    t: float
    x: np.ndarray
    u: np.ndarray
    mode: str
    clearance: float  # signed distance from the robot position to the nearest true obstacle
    plan_index: int


@dataclass
class SimTrace:
    scenario: str
    secure: bool
    seed: int
    records: list[StepRecord] = field(default_factory=list)
    detections: list[DetectionEvent] = field(default_factory=list)
    beliefs: dict[float, tuple[list[ConvexPolygon], np.ndarray]] = field(default_factory=dict)
    plans: list[NlpSolution] = field(default_factory=list)
    stops: list[float] = field(default_factory=list)
    collision: bool = False
    collision_state: np.ndarray | None = None
    goal_reached: bool = False
    status: str = "running"
    wall_time: float = 0.0
    fallbacks: int = 0

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    @property
    def states(self) -> np.ndarray:
        return np.array([r.x for r in self.records]).reshape(-1, 5)

    @property
    def min_clearance(self) -> float:
        return min((r.clearance for r in self.records), default=float("inf"))

    def snapshot(self, t: float, belief: BeliefMap) -> None:
        self.beliefs[round(t, 9)] = (list(belief.known_obstacles), belief.observed_free.copy())

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "mode": "secure" if self.secure else "baseline",
            "seed": self.seed,
            "status": self.status,
            "collision": self.collision,
            "goal_reached": self.goal_reached,
            "steps": len(self.records),
            "final_time": self.records[-1].t if self.records else 0.0,
            "detections": [{"time": ev.time, "obstacle": ev.obstacle.to_list()} for ev in self.detections],
            "stops": self.stops,
            "planned_t_f": [p.t_f for p in self.plans],
            "plan_status": [p.status for p in self.plans],
            "plan_start_times": [p.t0 for p in self.plans],
            "solver_wall_time": [p.wall_time for p in self.plans],
            "min_clearance": self.min_clearance,
            # a run that never moved ended where it started, at rest
            "final_speed": float(np.hypot(*self.records[-1].x[3:5])) if self.records else 0.0,
            "runtime": self.wall_time,
        }


def collision_check(x: RobotState, true_obstacles: Sequence[ConvexPolygon], prev: RobotState | None = None) -> bool:
    """Robot position inside an obstacle, or the step from ``prev`` crosses one."""
    p = x.position
    for o in true_obstacles:
        if signed_distance(p, o) <= 0:
            return True
        if prev is not None and segment_intersects_polygon(prev.position, p, o):
            return True
    return False


def _ellipse_cells(belief: BeliefMap, e: Ellipsoid) -> np.ndarray:
    """Cells (row, col) whose centers lie in the ellipse; out-of-map cells get index -1."""
    lo = e.center - np.linalg.norm(e.shape, axis=1)
    hi = e.center + np.linalg.norm(e.shape, axis=1)
    xmin, ymin, _, _ = belief.bounds
    c = belief.cell
    j = np.arange(int(np.floor((lo[0] - xmin) / c)), int(np.ceil((hi[0] - xmin) / c)) + 1)
    i = np.arange(int(np.floor((lo[1] - ymin) / c)), int(np.ceil((hi[1] - ymin) / c)) + 1)
    jj, ii = np.meshgrid(j, i)
    centers = np.column_stack([xmin + (jj.ravel() + 0.5) * c, ymin + (ii.ravel() + 0.5) * c])
    inside = e.contains(centers)
    cells = np.column_stack([ii.ravel(), jj.ravel()])[inside]
    out = (cells[:, 0] < 0) | (cells[:, 0] >= belief.shape[0]) | (cells[:, 1] < 0) | (cells[:, 1] >= belief.shape[1])
    cells[out] = -1
    return cells


def plan_is_safe(
    sol: NlpSolution,
    belief: BeliefMap,
    from_time: float,
    reactive: ReactiveSetModel,
    sensor: SensorParams | None = None,
) -> bool:
    """Remaining nodes keep their reactive sets off the known obstacles and inside
    the region that is observed free, or will be seen by earlier planned FOVs.

    The coverage of a node's reactive set is the observed-free grid plus the
    FOVs of the remaining nodes before it (occluded by the known obstacles),
    which is what the belief will contain if no further obstacle shows up.
    ``from_time`` is on the simulation clock.
    """
    sensor = sensor or SensorParams()
    t_local = from_time - sol.t0
    remaining = [i for i, t in enumerate(sol.times) if t >= t_local - 1e-9]
    if not remaining:
        return True
    cover = belief.copy()
    prev = None
    for i in remaining:
        x = sol.X[i]
        e = reactive_ellipse(reactive, x)
        if any(ellipsoid_polygon_separation(e, o) <= 0 for o in belief.known_obstacles):
            return False
        if prev is not None:
            cover.mark_visible(fov_polygon(RobotState.from_array(prev), sensor), prev[:2], belief.known_obstacles)
        cells = _ellipse_cells(belief, e)
        if len(cells) and (np.any(cells[:, 0] < 0) or not np.all(cover.observed_free[cells[:, 0], cells[:, 1]])):
            return False
        prev = x
    return True


def _tracking_control(sol: NlpSolution, x: np.ndarray, t_local: float, gains: TrackingGains, model: ModelParams) -> np.ndarray:
    """Plan feed-forward plus a cascaded unicycle tracking law."""
    ref = sol.state_at(t_local) if t_local < sol.t_f else sol.X[-1]
    u_ff = sol.control_at(t_local) if t_local < sol.t_f else np.zeros(2)
    c, s = np.cos(x[2]), np.sin(x[2])
    dx, dy = ref[0] - x[0], ref[1] - x[1]
    e_long = c * dx + s * dy
    e_lat = -s * dx + c * dy
    e_th = wrap_angle(ref[2] - x[2])
    v_d = ref[3] * np.cos(e_th) + gains.k_long * e_long
    w_d = ref[4] + ref[3] * (gains.k_lat * e_lat + gains.k_heading * np.sin(e_th))
    u = u_ff + np.array([gains.k_v * (v_d - x[3]), gains.k_omega * (w_d - x[4])])
    return model.clamp_control(u)


def _at_goal(x: np.ndarray, sc: Scenario, rest: float) -> bool:
    speed_ok = np.hypot(x[3], x[4]) <= max(sc.goal_speed_cap, rest)
    return bool(np.linalg.norm(x[:2] - sc.goal) <= GOAL_TOL and speed_ok)


def run(sc: Scenario, secure: bool = True, seed: int = 0) -> SimTrace:
    """Execute the plan/sense/react/replan loop on ``sc``."""
    sc.validate()
    wall0 = time.perf_counter()
    sp = sc.sim
    rp = sc.controller
    trace = SimTrace(scenario=sc.name, secure=secure, seed=seed)
    planner = plan if secure else plan_baseline
    belief = sc.initial_belief()
    x = sc.start
    t = 0.0
    trace.snapshot(t, belief)

    def new_plan(warm: NlpSolution | None, t_from: float) -> NlpSolution:
        sol = planner(sc.problem(belief, x), warm=warm, sp=sc.solver, t_from=t_from)
        sol.t0 = t
        trace.plans.append(sol)
        return sol

    def finish(status: str) -> SimTrace:
        trace.status = status
        trace.wall_time = time.perf_counter() - wall0
        return trace

    sol = new_plan(None, 0.0)
    mode = REPLAN
    if not sol.converged:
        if np.hypot(x.v, x.omega) < rp.rest_threshold:
            # a robot at rest with no safe plan does not move
            log.warning("initial plan did not converge (%s); staying at the start", sol.status)
            return finish("infeasible")
        log.warning("initial plan did not converge (%s); executing the best iterate", sol.status)
    anchor: RobotState | None = None
    threat: ConvexPolygon | None = None
    u_hold = np.zeros(2)
    react_steps = 0
    replans = 0
    n_steps = int(round(sp.t_max / sp.dt))
    for _ in range(n_steps):
        if sp.wall_time_max is not None and time.perf_counter() - wall0 > sp.wall_time_max:
            return finish("wall-time-cap")
        xa = x.as_array()
        if mode == REACT:
            if react_steps % rp.substeps == 0:
                u_c = react_step(x, anchor, threat, rp, sc.model)
                u_hold = u_c.as_array()
            # once stopped, only the turn rate is braked (position stays put)
            if abs(xa[3]) < rp.rest_threshold or np.sign(xa[3]) != np.sign(anchor.v):
                lim = np.array([sc.model.a_max, sc.model.alpha_max])
                u = np.clip(-xa[3:5] / sp.dt, -lim, lim)
            else:
                u = u_hold
            react_steps += 1
        else:
            u = _tracking_control(sol, xa, t - sol.t0, sp.tracking, sc.model)
        nxt = integrate(x, ControlInput(float(u[0]), float(u[1])), sp.dt, sc.model)
        collided = collision_check(nxt, sc.true_obstacles, x)
        t_next = t + sp.dt
        clearance = min((signed_distance(nxt.position, o) for o in sc.true_obstacles), default=float("inf"))
        trace.records.append(StepRecord(t_next, nxt.as_array(), np.asarray(u, dtype=float), mode, clearance, len(trace.plans) - 1))
        x, t = nxt, t_next
        if collided:
            trace.collision = True
            trace.collision_state = x.as_array()
            return finish("collision")
        if mode == REPLAN:
            mode = PLAN_EXEC
        events = detect(x, sc.true_obstacles, belief, sc.sensor, t)
        update_belief(belief, x, events, sc.true_obstacles, sc.sensor)
        if events:
            trace.detections.extend(events)
            trace.snapshot(t, belief)
            if mode == PLAN_EXEC and not plan_is_safe(sol, belief, t, sc.reactive, sc.sensor):
                mode = REACT
                anchor = x
                threat = min((ev.obstacle for ev in events), key=lambda o: signed_distance(x.position, o))
                react_steps = 0
                log.info("t=%.2f: plan unsafe after detection, reacting", t)
        xa = x.as_array()
        if mode == REACT and np.hypot(xa[3], xa[4]) < rp.rest_threshold:
            trace.stops.append(t)
            mode = REPLAN
        elif mode == PLAN_EXEC and _at_goal(xa, sc, rp.rest_threshold):
            trace.goal_reached = True
            return finish("goal-reached")
        elif mode == PLAN_EXEC and t - sol.t0 > sol.t_f + sp.settle_time:
            mode = REPLAN  # plan exhausted short of the goal
        if mode == REPLAN:
            if replans >= sp.max_replans:
                return finish("replan-limit")
            replans += 1
            warm = sol
            sol = new_plan(warm, t - warm.t0)
            if not sol.converged:
                # a stopped robot with no feasible plan stays put
                return finish("infeasible-after-detection" if trace.detections else "infeasible")
    return finish("timeout")


# ----------------------------------------------------------------------------
# Monte Carlo


def random_unknown_box(sc: Scenario, rng: np.random.Generator, side: tuple[float, float] = (0.2, 0.6), tries: int = 1000) -> ConvexPolygon:
    """A random box in the provided free space that keeps the scenario valid.

    The box must not touch any obstacle, must stay clear of the start and goal
    (by the sensor-independent distance of one reactive floor plus half a
    meter), and a path must still exist in the true map.
    """
    xmin, ymin, xmax, ymax = sc.bounds
    keep_out = 0.5 + sc.reactive.floor
    for _ in range(tries):
        a, b = rng.uniform(*side, size=2)
        cx = rng.uniform(xmin + a / 2, xmax - a / 2)
        cy = rng.uniform(ymin + b / 2, ymax - b / 2)
        box = ConvexPolygon.box(cx - a / 2, cy - b / 2, cx + a / 2, cy + b / 2)
        if any(signed_distance(p, box) < keep_out for p in (sc.start.position, sc.goal)):
            continue
        if any(_polygons_touch(box, o) for o in sc.true_obstacles + sc.provided_obstacles):
            continue
        trial = replace(sc, true_obstacles=sc.true_obstacles + [box])
        try:
            trial.validate()
        except ScenarioError:
            continue
        return box
    raise ScenarioError("could not place a random unknown obstacle")


def _polygons_touch(a: ConvexPolygon, b: ConvexPolygon) -> bool:
    # separating axis test over both face sets
    for n in np.vstack([a.normals, b.normals]):
        pa, pb = a.vertices @ n, b.vertices @ n
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


def _trial(args) -> dict:
    sc, secure, seed, k = args
    logging.getLogger("secureplan").setLevel(logging.WARNING)
    try:
        tr = run(sc, secure=secure, seed=seed)
        out = tr.summary()
    except Exception as exc:  # a crash is an outcome to report, not to hide
        out = {"status": "crash", "error": repr(exc), "collision": False, "goal_reached": False, "detections": []}
    out["trial"] = k
    out["unknown_obstacle"] = sc.unknown_obstacles[-1].to_list() if sc.unknown_obstacles else None
    return out


def monte_carlo_safety(base: Scenario, n_trials: int, seed: int = 0, secure: bool = True, workers: int = 1) -> dict:
    """Run ``n_trials`` variants of ``base``, each with one extra random unknown box."""
    if n_trials < 0:
        raise ValueError("n_trials must be non-negative")
    rng = np.random.default_rng(seed)
    jobs = []
    for k in range(n_trials):
        box = random_unknown_box(base, rng)
        sc = replace(base, name=f"{base.name}-mc{k}", true_obstacles=base.true_obstacles + [box])
        jobs.append((sc, secure, seed, k))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(_trial, jobs))
    else:
        trials = [_trial(j) for j in jobs]
    statuses = [t["status"] for t in trials]
    return {
        "n_trials": n_trials,
        "secure": secure,
        "seed": seed,
        "collisions": sum(bool(t["collision"]) for t in trials),
        "goal_reached": sum(bool(t["goal_reached"]) for t in trials),
        "infeasible_after_detection": statuses.count("infeasible-after-detection"),
        "crashes": statuses.count("crash"),
        "statuses": {s: statuses.count(s) for s in sorted(set(statuses))},
        "detections_per_trial": [len(t.get("detections", [])) for t in trials],
        "trials": trials,
    }
