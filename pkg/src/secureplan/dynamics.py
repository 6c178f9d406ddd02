"""Unicycle robot with acceleration controls.

State vector ``(x, y, heading, v, omega)``; control vector ``(a, alpha)``.
Array-level functions work on plain numpy vectors (and on stacked rows) so
the collocation code can call them on whole trajectories at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_STATE = 5
N_CONTROL = 2


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(theta, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class ModelParams:
    v_max: float = 2.0
    omega_max: float = 2.0
    a_max: float = 1.0
    alpha_max: float = 2.0
    v_min: float | None = None  # defaults to -v_max (reverse allowed)

    def __post_init__(self):
        for name in ("v_max", "omega_max", "a_max", "alpha_max"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be strictly positive, got {val}")
        if self.v_min is not None and not (-self.v_max <= self.v_min < self.v_max):
            raise ValueError("v_min must lie in [-v_max, v_max)")

    @property
    def v_lower(self) -> float:
        return -self.v_max if self.v_min is None else self.v_min

    def clamp_control(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        lim = np.array([self.a_max, self.alpha_max])
        return np.clip(u, -lim, lim)


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    heading: float
    v: float = 0.0
    omega: float = 0.0

    @classmethod
    def from_array(cls, arr) -> "RobotState":
        a = np.asarray(arr, dtype=float)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]), float(a[4]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.v, self.omega])

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def speed_norm(self) -> float:
        return float(np.hypot(self.v, self.omega))


@dataclass(frozen=True)
class ControlInput:
    linear_accel: float = 0.0
    angular_accel: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.linear_accel, self.angular_accel])


def derivative(x, u) -> np.ndarray:
    """State derivative; rows of ``x``/``u`` may be stacked."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    th, v, w = x[..., 2], x[..., 3], x[..., 4]
    return np.stack([v * np.cos(th), v * np.sin(th), w, u[..., 0], u[..., 1]], axis=-1)


def derivative_jacobians(x, u) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of :func:`derivative`, shapes (..., 5, 5) and (..., 5, 2)."""
    x = np.asarray(x, dtype=float)
    th, v = x[..., 2], x[..., 3]
    lead = x.shape[:-1]
    fx = np.zeros(lead + (N_STATE, N_STATE))
    fx[..., 0, 2] = -v * np.sin(th)
    fx[..., 0, 3] = np.cos(th)
    fx[..., 1, 2] = v * np.cos(th)
    fx[..., 1, 3] = np.sin(th)
    fx[..., 2, 4] = 1.0
    fu = np.zeros(lead + (N_STATE, N_CONTROL))
    fu[..., 3, 0] = 1.0
    fu[..., 4, 1] = 1.0
    return fx, fu


def rk4_step(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    k1 = derivative(x, u)
    k2 = derivative(x + 0.5 * dt * k1, u)
    k3 = derivative(x + 0.5 * dt * k2, u)
    k4 = derivative(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def clamp_speeds(x: np.ndarray, model: ModelParams) -> np.ndarray:
    x = np.array(x, dtype=float)
    x[..., 3] = np.clip(x[..., 3], model.v_lower, model.v_max)
    x[..., 4] = np.clip(x[..., 4], -model.omega_max, model.omega_max)
    return x


def integrate(x: RobotState, u: ControlInput, dt: float, model: ModelParams | None = None) -> RobotState:
    """One RK4 step with ``u`` held, then speed clamping and heading wrap."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    model = model or ModelParams()
    nxt = clamp_speeds(rk4_step(x.as_array(), u.as_array(), dt), model)
    nxt[2] = wrap_angle(nxt[2])
    return RobotState.from_array(nxt)


def defect(x_i, u_i, x_j, u_j, h: float) -> np.ndarray:
    """Trapezoidal collocation defect ``x_j - x_i - h/2 (f_i + f_j)``.

    Accepts stacked rows, in which case one defect per row is returned.
    """
    if np.any(np.asarray(h) <= 0):
        raise ValueError("h must be positive")
    x_i = np.asarray(x_i, dtype=float)
    x_j = np.asarray(x_j, dtype=float)
    h = np.asarray(h, dtype=float)[..., None] if np.ndim(h) else h
    return x_j - x_i - 0.5 * h * (derivative(x_i, u_i) + derivative(x_j, u_j))


def stopping_interval_1d(x1: float, v: float, u_max: float) -> tuple[float, float]:
    """Interval swept by a braking double integrator starting at ``(x1, v)``."""
    if u_max <= 0:
        raise ValueError("u_max must be positive")
    dist = v * v / (2.0 * u_max)
    if v >= 0:
        return (x1, x1 + dist)
    return (x1 - dist, x1)
