"""Post-hoc checks of a plan: any-earlier-witness visibility and dense resampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from ..dynamics import RobotState, derivative
from ..geometry import Ellipsoid, ellipsoid_in_polygon_margin, rotation
from ..reactive_set import ReactiveSetModel
from ..sensor import SensorParams, fov_polygon
from .problem import NlpSolution, PlanProblem


def reactive_ellipse(rs: ReactiveSetModel, x: np.ndarray) -> Ellipsoid:
    """Reactive ellipse with speeds clipped to the calibrated box (as the transcription does)."""
    v = float(np.clip(x[3], -rs.v_range, rs.v_range))
    w = float(np.clip(x[4], -rs.omega_range, rs.omega_range))
    off, ax = rs.body_params(v, w)
    R = rotation(x[2])
    return Ellipsoid(np.asarray(x[:2], dtype=float) + R @ off, R * ax)


def visibility_margin(rs: ReactiveSetModel, sp: SensorParams, x_i: np.ndarray, x_j: np.ndarray) -> float:
    return ellipsoid_in_polygon_margin(reactive_ellipse(rs, x_i), fov_polygon(RobotState.from_array(x_j), sp))


@dataclass
class WitnessReport:
    lag: int
    witnesses: dict[int, int | None] = field(default_factory=dict)  # constrained nodes i >= lag
    prefix: dict[int, int | None] = field(default_factory=dict)  # nodes 1..lag-1, informational
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(j is not None for j in self.witnesses.values())

    @property
    def failures(self) -> list[int]:
        return [i for i, j in self.witnesses.items() if j is None]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "lag": self.lag,
            "failures": self.failures,
            "witnesses": {str(i): j for i, j in self.witnesses.items()},
            "prefix": {str(i): j for i, j in self.prefix.items()},
        }


def verify_minp_constraint(sol: NlpSolution, p: PlanProblem, tol: float = 1e-4) -> WitnessReport:
    """For every node, search all earlier nodes for a FOV that contains its reactive set.

    The witness closest to ``i - lag`` is reported (the fixed-lag node when it
    works). Nodes before the lag are not constrained by the discretized
    problem (they rely on the prior observation) and are reported separately.
    """
    lag = sol.lag if sol.lag else (p.lag or 0)
    rep = WitnessReport(lag=lag, tol=tol)
    K = sol.K
    for i in range(1, K):
        order = sorted(range(i), key=lambda j: (abs(j - (i - lag)), -j))
        witness = None
        for j in order:
            if visibility_margin(p.reactive, p.sensor, sol.X[i], sol.X[j]) >= -tol:
                witness = j
                break
        (rep.witnesses if i >= max(lag, 1) else rep.prefix)[i] = witness
    return rep


@dataclass
class DiscretizationReport:
    dense_factor: int
    times: np.ndarray
    witness_nodes: np.ndarray
    margins: np.ndarray

    @property
    def min_margin(self) -> float:
        return float(np.min(self.margins)) if len(self.margins) else float("inf")

    @property
    def flagged(self) -> bool:
        return self.min_margin <= 0.0

    def to_dict(self) -> dict:
        k = int(np.argmin(self.margins)) if len(self.margins) else -1
        return {
            "dense_factor": self.dense_factor,
            "samples": int(len(self.margins)),
            "min_margin": self.min_margin,
            "argmin_time": float(self.times[k]) if k >= 0 else None,
            "flagged": self.flagged,
        }


def interpolate_states(sol: NlpSolution, t: np.ndarray) -> np.ndarray:
    """Cubic Hermite state interpolation using the dynamics at the nodes."""
    if sol.K < 2:
        return np.repeat(sol.X[:1], len(t), axis=0)
    spline = CubicHermiteSpline(sol.times, sol.X, derivative(sol.X, sol.U), axis=0)
    return spline(np.clip(t, 0.0, sol.t_f))


def check_discretization(sol: NlpSolution, p: PlanProblem, dense_factor: int = 10) -> DiscretizationReport:
    """Visibility margin between the nodes, against the witness node prescribed by the lag.

    Samples ``dense_factor * (K - 1) + 1`` uniform times; at time ``t`` the
    witness is the last node with time ``<= t - lag h``.
    """
    if dense_factor < 1:
        raise ValueError("dense_factor must be >= 1")
    K, h, lag = sol.K, sol.h, sol.lag
    n = dense_factor * (K - 1) + 1
    t = np.linspace(0.0, sol.t_f, n)
    keep = t >= lag * h - 1e-9 * max(h, 1.0)
    t = t[keep]
    X = interpolate_states(sol, t)
    # exact node hits first, then the floor of the lagged index
    idx = np.arange(n)[keep]
    node = np.where(idx % dense_factor == 0, idx // dense_factor - lag, np.floor((t - lag * h) / h + 1e-9).astype(int))
    node = np.clip(node, 0, K - 1)
    margins = np.array([visibility_margin(p.reactive, p.sensor, X[k], sol.X[j]) for k, j in enumerate(node)])
    # at the nodes themselves use the exact node states (no interpolation round-off)
    at_node = idx % dense_factor == 0
    for k in np.flatnonzero(at_node):
        i = idx[k] // dense_factor
        margins[k] = visibility_margin(p.reactive, p.sensor, sol.X[i], sol.X[node[k]])
    return DiscretizationReport(dense_factor, t, node, margins)
