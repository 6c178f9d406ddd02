"""Problem, solution and solver-parameter types for the trajectory NLP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..dynamics import N_CONTROL, N_STATE, ControlInput, ModelParams, RobotState
from ..geometry import signed_distance
from ..reactive_set import ReactiveSetModel
from ..sensor import BeliefMap, SensorParams

LAG_SECONDS = 0.4


class PlanningError(ValueError):
    """Inconsistent planning problem (e.g. goal inside an obstacle)."""


class InfeasibleScenarioError(PlanningError):
    """No grid path connects start and goal."""


@dataclass(frozen=True)
class SolverParams:
    max_iter: int = 400
    ftol: float = 1e-10
    cv_tol: float = 1e-4
    kkt_tol: float = 1e-3
    restarts: int = 3
    al_outer: int = 25
    al_rho0: float = 10.0
    al_rho_growth: float = 5.0
    al_inner_iter: int = 400
    finite_differences: bool = False

    def __post_init__(self):
        for name in ("ftol", "cv_tol", "kkt_tol", "al_rho0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iter < 1 or self.al_outer < 0:
            raise ValueError("iteration caps must be positive")


@dataclass
class PlanProblem:
    start: RobotState
    goal: np.ndarray
    belief: BeliefMap
    reactive: ReactiveSetModel
    K: int = 40
    lag: int | None = None  # None: chosen from the initial guess
    model: ModelParams = field(default_factory=ModelParams)
    sensor: SensorParams = field(default_factory=SensorParams)
    margin: float = 0.01
    goal_speed_cap: float = 0.0
    baseline_clearance: float = 0.1
    tf_max: float = 60.0

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=float).reshape(2)
        if self.K < 2:
            raise PlanningError("need at least two nodes")
        if self.lag is not None and not 0 <= 2 * self.lag <= self.K:
            raise PlanningError("lag must satisfy 0 <= 2 lag <= K")
        if self.margin < 0 or self.goal_speed_cap < 0:
            raise PlanningError("margin and goal speed cap must be non-negative")

    def validate(self) -> None:
        xmin, ymin, xmax, ymax = self.belief.bounds
        for name, p in (("start", self.start.position), ("goal", self.goal)):
            if not (xmin <= p[0] <= xmax and ymin <= p[1] <= ymax):
                raise PlanningError(f"{name} {p.tolist()} outside world bounds")
            for o in self.belief.known_obstacles:
                if signed_distance(p, o) <= 0:
                    raise PlanningError(f"{name} {p.tolist()} inside a known obstacle")

    def with_lag(self, lag: int) -> "PlanProblem":
        from dataclasses import replace

        return replace(self, lag=lag)


def lag_for(t_f: float, K: int, seconds: float = LAG_SECONDS) -> int:
    """Node lag whose duration is closest to ``seconds`` at final time ``t_f``."""
    h = t_f / (K - 1)
    return int(min(max(1, round(seconds / h)), K // 2))


@dataclass
class NlpSolution:
    X: np.ndarray  # (K, 5)
    U: np.ndarray  # (K, 2)
    t_f: float
    status: str = "converged"  # converged | max-iter | infeasible
    kkt_residual: float = float("nan")
    constraint_violation: float = float("nan")
    lag: int = 0
    iterations: int = 0
    solver: str = ""
    message: str = ""
    wall_time: float = 0.0
    t0: float = 0.0  # absolute start time of the plan (simulation clock)
    obstacle_margin: np.ndarray | None = None  # per node, min over obstacles
    visibility_margin: np.ndarray | None = None  # per node, NaN where no witness
    secure: bool = True

    @property
    def K(self) -> int:
        return len(self.X)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def h(self) -> float:
        return self.t_f / (self.K - 1) if self.K > 1 else 0.0

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_f, self.K)

    @property
    def states(self) -> list[RobotState]:
        return [RobotState.from_array(x) for x in self.X]

    @property
    def controls(self) -> list[ControlInput]:
        return [ControlInput(float(u[0]), float(u[1])) for u in self.U]

    def control_at(self, t: float) -> np.ndarray:
        """Piecewise-linear interpolation of the node controls (plan-local time)."""
        ts = self.times
        return np.array([np.interp(t, ts, self.U[:, k]) for k in range(N_CONTROL)])

    def state_at(self, t: float) -> np.ndarray:
        ts = self.times
        return np.array([np.interp(t, ts, self.X[:, k]) for k in range(N_STATE)])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.X.ravel(), self.U.ravel(), [self.t_f]])

    def to_dict(self) -> dict:
        return {
            "t_f": self.t_f,
            "status": self.status,
            "kkt_residual": self.kkt_residual,
            "constraint_violation": self.constraint_violation,
            "lag": self.lag,
            "iterations": self.iterations,
            "solver": self.solver,
            "K": self.K,
            "t0": self.t0,
            "secure": self.secure,
        }
