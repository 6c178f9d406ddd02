"""Speed-dependent ellipsoidal bound on the reactive controller's evasive paths.

The world-frame ellipse at state ``x`` is

    center = p + R(heading) a(v, omega),   shape = R(heading) diag(s_fwd, s_lat)

where the body-frame offset ``a`` and semi-axes ``s`` are low-order
polynomials in the speeds fitted to simulated maneuvers. ``Q = diag(s)^2`` is
diagonal and positive by construction. At rest the ellipse is the floor
circle centered on the robot.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import ModelParams, RobotState
from .geometry import ConvexPolygon, DegenerateInputError, Ellipsoid, minimum_enclosing_ellipsoid, rotation
from .reactive_controller import ReactParams, run_maneuvers

log = logging.getLogger(__name__)

FLOOR_RADIUS = 0.05
DEFAULT_INFLATION = 1.1
N_APPROACH_ANGLES = 16
WALL_LENGTH = 4.0
WALL_THICKNESS = 0.1


class CalibrationError(RuntimeError):
    pass


class ExtrapolationError(ValueError):
    pass


# basis functions in (v, w); v >= 0 here, reverse motion is mirrored
def _basis_fwd(v, w):
    return np.stack([v, v**2, v * w**2], axis=-1)


def _basis_lat(v, w):
    return np.stack([v * w, v**2 * w], axis=-1)


def _basis_axis(v, w):
    return np.stack([v, v**2, w**2, v * w**2], axis=-1)


def _dbasis_fwd(v, w):
    dv = np.stack([np.ones_like(v), 2 * v, w**2], axis=-1)
    dw = np.stack([np.zeros_like(v), np.zeros_like(v), 2 * v * w], axis=-1)
    return dv, dw


def _dbasis_lat(v, w):
    dv = np.stack([w, 2 * v * w], axis=-1)
    dw = np.stack([v, v**2], axis=-1)
    return dv, dw


def _dbasis_axis(v, w):
    dv = np.stack([np.ones_like(v), 2 * v, np.zeros_like(v), w**2], axis=-1)
    dw = np.stack([np.zeros_like(v), np.zeros_like(v), 2 * w, 2 * v * w], axis=-1)
    return dv, dw


@dataclass
class ReactiveSetModel:
    fwd_coeffs: np.ndarray
    lat_coeffs: np.ndarray
    axis_coeffs: np.ndarray  # (2, 4): forward and lateral semi-axis growth
    inflation: float = DEFAULT_INFLATION
    floor: float = FLOOR_RADIUS
    v_range: float = 2.0
    omega_range: float = 2.0

    def __post_init__(self):
        self.fwd_coeffs = np.asarray(self.fwd_coeffs, dtype=float)
        self.lat_coeffs = np.asarray(self.lat_coeffs, dtype=float)
        self.axis_coeffs = np.asarray(self.axis_coeffs, dtype=float).reshape(2, -1)
        if self.inflation < 1.0:
            raise ValueError("inflation must be >= 1")

    def check_range(self, v, w, tol: float = 1e-9) -> None:
        if np.any(np.abs(v) > self.v_range + tol) or np.any(np.abs(w) > self.omega_range + tol):
            raise ExtrapolationError(
                f"speeds outside calibrated range |v|<={self.v_range}, |omega|<={self.omega_range}"
            )

    def body_params(self, v, w, derivatives: bool = False, inflation: float | None = None):
        """Body-frame offset (..., 2) and semi-axes (..., 2), optionally with d/dv and d/dw.

        Reverse motion (v < 0) reuses the forward fit turned half a revolution.
        """
        v = np.asarray(v, dtype=float)
        w = np.asarray(w, dtype=float)
        lam = self.inflation if inflation is None else inflation
        sgn = np.where(v < 0, -1.0, 1.0)
        av = np.abs(v)
        offset = sgn[..., None] * np.stack(
            [_basis_fwd(av, w) @ self.fwd_coeffs, _basis_lat(av, w) @ self.lat_coeffs], axis=-1
        )
        grow = _basis_axis(av, w) @ self.axis_coeffs.T
        axes = self.floor + lam * grow
        if not derivatives:
            return offset, axes
        fv, fw = _dbasis_fwd(av, w)
        lv, lw = _dbasis_lat(av, w)
        xv, xw = _dbasis_axis(av, w)
        # d|v|/dv = sgn, so offset (odd) has d/dv even and axes (even) pick up sgn
        d_off_v = np.stack([fv @ self.fwd_coeffs, lv @ self.lat_coeffs], axis=-1)
        d_off_w = sgn[..., None] * np.stack([fw @ self.fwd_coeffs, lw @ self.lat_coeffs], axis=-1)
        d_ax_v = sgn[..., None] * lam * (xv @ self.axis_coeffs.T)
        d_ax_w = lam * (xw @ self.axis_coeffs.T)
        return offset, axes, d_off_v, d_off_w, d_ax_v, d_ax_w

    def to_dict(self) -> dict:
        return {
            "fwd_coeffs": self.fwd_coeffs.tolist(),
            "lat_coeffs": self.lat_coeffs.tolist(),
            "axis_coeffs": self.axis_coeffs.tolist(),
            "inflation": self.inflation,
            "floor": self.floor,
            "v_range": self.v_range,
            "omega_range": self.omega_range,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReactiveSetModel":
        return cls(**d)


def evaluate(model: ReactiveSetModel, x: RobotState, pad: float = 0.0) -> Ellipsoid:
    """World-frame reactive ellipse at ``x``; ``pad`` grows both semi-axes (meters)."""
    model.check_range(x.v, x.omega)
    offset, axes = model.body_params(x.v, x.omega)
    rot = rotation(x.heading)
    return Ellipsoid(x.position + rot @ offset, rot @ np.diag(axes + pad))


# --------------------------------------------------------------------------
# calibration


def wall_family(sensor_range: float = 2.0, offsets: Sequence[float] | None = None) -> list[ConvexPolygon]:
    """Body-frame walls at 16 approach angles and two distances."""
    offsets = offsets if offsets is not None else (0.9 * sensor_range, 0.95 * sensor_range)
    walls = []
    for k in range(N_APPROACH_ANGLES):
        phi = 2 * np.pi * k / N_APPROACH_ANGLES
        n = np.array([np.cos(phi), np.sin(phi)])
        t = np.array([-n[1], n[0]])
        for d in offsets:
            c = d * n
            half = 0.5 * WALL_LENGTH
            walls.append(
                ConvexPolygon.from_vertices(
                    [c - half * t, c + half * t, c + half * t + WALL_THICKNESS * n, c - half * t + WALL_THICKNESS * n]
                )
            )
    return walls


def simulate_reactive_paths(
    x0: RobotState,
    obstacle_family: Sequence[ConvexPolygon],
    rp: ReactParams | None = None,
    model: ModelParams | None = None,
    strict: bool = True,
):
    """Run the reactive controller from ``x0`` against each obstacle of the family.

    Obstacles are given in the body frame of ``x0`` and moved into the world.
    Returns one :class:`ManeuverResult` per obstacle.
    """
    rot = rotation(x0.heading)
    world = [o.transformed(rot, x0.position) for o in obstacle_family]
    starts = np.tile(x0.as_array(), (len(world), 1))
    paths = run_maneuvers(starts, world, rp, model)
    if strict and not all(p.converged for p in paths):
        raise CalibrationError(f"reactive controller failed to reach rest from {x0}")
    return paths


def _disc_cloud(points: np.ndarray, radius: float, n: int = 8) -> np.ndarray:
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    ring = radius * np.column_stack([np.cos(t), np.sin(t)])
    return (points[:, None, :] + ring[None, :, :]).reshape(-1, 2)


def axis_aligned_fit(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Largest-area axis-aligned ellipse centered at ``center`` containing ``points``.

    With ``d = 1/s^2`` the containment constraints are linear in ``d``; along a
    ray ``d2 = t d1`` the best ``d1`` is explicit, leaving a 1D search in ``t``.
    """
    from scipy.optimize import minimize_scalar

    w = (points - center) ** 2
    if np.all(w[:, 1] <= 1e-18):
        w[:, 1] = np.maximum(w[:, 1], 1e-18)

    def neg_logarea(log_t):
        t = np.exp(log_t)
        m = np.max(w[:, 0] + t * w[:, 1])
        return -(log_t - 2 * np.log(m))

    grid = np.linspace(-12, 12, 97)
    vals = [neg_logarea(g) for g in grid]
    g0 = grid[int(np.argmin(vals))]
    res = minimize_scalar(neg_logarea, bounds=(g0 - 0.25, g0 + 0.25), method="bounded", options={"xatol": 1e-10})
    t = np.exp(res.x)
    d1 = 1.0 / np.max(w[:, 0] + t * w[:, 1])
    d2 = t * d1
    return np.array([1.0 / np.sqrt(d1), 1.0 / np.sqrt(d2)])


@dataclass
class CalibrationReport:
    grid: list[tuple[float, float]]
    mvee: list[dict]
    targets: list[dict]
    max_violation: float
    containment_fraction: float
    inflation: float
    containment_scale: float
    rms_fit_residual: float
    max_fit_residual: float
    collisions: int
    fallbacks: int
    maneuver_time_max: float
    audit: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "grid": [list(g) for g in self.grid],
            "mvee": self.mvee,
            "targets": self.targets,
            "max_violation": self.max_violation,
            "containment_fraction": self.containment_fraction,
            "inflation": self.inflation,
            "containment_scale": self.containment_scale,
            "rms_fit_residual": self.rms_fit_residual,
            "max_fit_residual": self.max_fit_residual,
            "collisions": self.collisions,
            "fallbacks": self.fallbacks,
            "maneuver_time_max": self.maneuver_time_max,
            "audit": self.audit,
        }


def default_grid(model: ModelParams, n_v: int = 9, n_w: int = 5) -> list[tuple[float, float]]:
    vs = np.linspace(0.0, model.v_max, n_v)
    ws = np.linspace(-model.omega_max, model.omega_max, n_w)
    return [(float(v), float(w)) for v in vs for w in ws]


def _point_violation(model: ReactiveSetModel, v: float, w: float, pts: np.ndarray, inflation: float) -> float:
    """max over points of (unit-frame radius - 1) in the body frame."""
    offset, axes = model.body_params(v, w, inflation=inflation)
    z = (pts - offset) / axes
    return float(np.max(np.linalg.norm(z, axis=1)) - 1.0)


def _collides(path_xy: np.ndarray, obstacle: ConvexPolygon) -> bool:
    return bool(np.any(obstacle.contains(path_xy)))


def calibrate(
    grid: Sequence[tuple[float, float]] | None = None,
    obstacle_family: Sequence[ConvexPolygon] | None = None,
    model: ModelParams | None = None,
    rp: ReactParams | None = None,
    floor: float = FLOOR_RADIUS,
    inflation: float = DEFAULT_INFLATION,
    mvee_tol: float = 1e-6,
    max_residual_ratio: float = 0.5,
) -> tuple[ReactiveSetModel, CalibrationReport]:
    """Fit a :class:`ReactiveSetModel` to simulated evasive maneuvers.

    All grid points are simulated in a single batch from a body-frame start at
    the origin. The fitted model is then scaled (speed-dependent part only)
    until every simulated path point is inside its grid point's ellipse, and
    the result is multiplied by ``inflation``.
    """
    model = model or ModelParams()
    rp = rp or ReactParams()
    grid = list(grid) if grid is not None else default_grid(model)
    family = list(obstacle_family) if obstacle_family is not None else wall_family()
    if any(v < 0 for v, _ in grid):
        raise ValueError("calibration grid uses v >= 0; reverse motion is mirrored")

    starts = np.array([[0.0, 0.0, 0.0, v, w] for v, w in grid for _ in family])
    obstacles = [o for _ in grid for o in family]
    log.info("simulating %d maneuvers", len(starts))
    results = run_maneuvers(starts, obstacles, rp, model)
    if not all(r.converged for r in results):
        bad = [grid[i // len(family)] for i, r in enumerate(results) if not r.converged]
        raise CalibrationError(f"reactive controller did not reach rest at grid points {sorted(set(bad))}")
    collisions = sum(_collides(r.positions, o) for r, o in zip(results, obstacles))
    fallbacks = sum(r.fallbacks for r in results)

    per_point: list[np.ndarray] = []
    mvees: list[dict] = []
    targets: list[dict] = []
    for g, (v, w) in enumerate(grid):
        pts = np.vstack([r.positions for r in results[g * len(family):(g + 1) * len(family)]])
        per_point.append(pts)
        cloud = _disc_cloud(np.unique(np.round(pts, 6), axis=0), floor)
        try:
            e = minimum_enclosing_ellipsoid(cloud, tol=mvee_tol)
        except DegenerateInputError as exc:
            raise CalibrationError(f"degenerate maneuver cloud at (v={v}, w={w})") from exc
        axes = axis_aligned_fit(cloud, e.center)
        mvees.append({"v": v, "omega": w, "center": e.center.tolist(), "shape": e.shape.tolist()})
        targets.append({"v": v, "omega": w, "offset": e.center.tolist(), "axes": axes.tolist()})

    vv = np.array([t["v"] for t in targets])
    ww = np.array([t["omega"] for t in targets])
    off = np.array([t["offset"] for t in targets])
    ax = np.array([t["axes"] for t in targets])
    fwd, *_ = np.linalg.lstsq(_basis_fwd(vv, ww), off[:, 0], rcond=None)
    lat, *_ = np.linalg.lstsq(_basis_lat(vv, ww), off[:, 1], rcond=None)
    axis_rows = [_fit_monotone_axis(vv, ww, ax[:, k] - floor, model) for k in range(2)]
    fitted = ReactiveSetModel(fwd, lat, np.array(axis_rows), 1.0, floor, model.v_max, model.omega_max)
    f_off, f_ax = fitted.body_params(vv, ww)
    err = np.concatenate([(f_off - off).ravel(), (f_ax - ax).ravel()])
    residual = float(np.sqrt(np.mean(err**2)))
    if residual > max_residual_ratio * float(ax.mean()):
        raise CalibrationError(f"rms fit residual {residual:.3f} m exceeds {max_residual_ratio:g} x mean semi-axis")
    _check_positive(fitted, model)

    # smallest scale of the speed-dependent part that contains every path point
    def worst(lam):
        return max(_point_violation(fitted, v, w, pts, lam) for (v, w), pts in zip(grid, per_point))

    lo, hi = 1.0, 1.0
    while worst(hi) > 0.0:
        hi *= 1.5
        if hi > 1e3:
            raise CalibrationError("could not inflate the reactive model to contain all paths")
    if hi > 1.0:
        lo = hi / 1.5
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if worst(mid) > 0.0:
                lo = mid
            else:
                hi = mid
    scale = hi
    fitted.inflation = scale * inflation
    _check_positive(fitted, model)
    max_violation = worst(fitted.inflation)
    n_inside = sum(
        int(np.sum(_unit_radius(fitted, v, w, pts) <= 1.0 + 1e-12)) for (v, w), pts in zip(grid, per_point)
    )
    n_total = sum(len(p) for p in per_point)
    report = CalibrationReport(
        grid=[tuple(g) for g in grid],
        mvee=mvees,
        targets=targets,
        max_violation=max_violation,
        containment_fraction=n_inside / n_total,
        inflation=fitted.inflation,
        containment_scale=scale,
        rms_fit_residual=residual,
        max_fit_residual=float(np.abs(err).max()),
        collisions=int(collisions),
        fallbacks=int(fallbacks),
        maneuver_time_max=float(max(r.times[-1] for r in results)),
    )
    return fitted, report


def _fit_monotone_axis(vv, ww, target, model: ModelParams) -> np.ndarray:
    """Least squares for one semi-axis, constrained to be non-decreasing in v.

    The v-derivative of the axis basis is affine in ``(v, omega^2)``, so
    requiring it non-negative at the four corners of the calibrated box makes
    the fit monotone everywhere inside it. Together with a non-negative
    omega^2 coefficient this also keeps the axis at or above the floor.
    """
    from scipy.optimize import minimize

    B = _basis_axis(vv, ww)
    c0, *_ = np.linalg.lstsq(B, target, rcond=None)
    corners = [(v, w) for v in (0.0, model.v_max) for w in (0.0, model.omega_max)]
    D = np.array([[1.0, 2 * v, 0.0, w * w] for v, w in corners] + [[0.0, 0.0, 1.0, 0.0]])
    if np.all(D @ c0 >= 0):
        return c0
    res = minimize(
        lambda c: 0.5 * np.sum((B @ c - target) ** 2),
        c0,
        jac=lambda c: B.T @ (B @ c - target),
        constraints=[{"type": "ineq", "fun": lambda c: D @ c, "jac": lambda c: D}],
        method="SLSQP",
        options={"ftol": 1e-12, "maxiter": 200},
    )
    if not res.success or np.any(D @ res.x < -1e-9):
        raise CalibrationError(f"monotone semi-axis fit failed: {res.message}")
    return res.x


def _unit_radius(model: ReactiveSetModel, v: float, w: float, pts: np.ndarray) -> np.ndarray:
    offset, axes = model.body_params(v, w)
    return np.linalg.norm((pts - offset) / axes, axis=1)


def _check_positive(m: ReactiveSetModel, model: ModelParams) -> None:
    vs = np.linspace(0, model.v_max, 41)
    ws = np.linspace(-model.omega_max, model.omega_max, 41)
    V, W = np.meshgrid(vs, ws)
    _, axes = m.body_params(V, W)
    if np.any(axes <= 0.5 * m.floor):
        raise CalibrationError("fitted semi-axes fall below half the floor radius inside the calibrated range")


def audit(
    rs_model: ReactiveSetModel,
    n_points: int = 100,
    seed: int = 0,
    obstacle_family: Sequence[ConvexPolygon] | None = None,
    model: ModelParams | None = None,
    rp: ReactParams | None = None,
    obstacles_per_point: int = 4,
) -> dict:
    """Statistical soundness check at random off-grid speeds.

    For each random ``(v, omega)`` a few obstacles are drawn from the family
    (with a random extra rotation) and the fraction of simulated path points
    inside the evaluated ellipse is reported; violations are listed.
    """
    model = model or ModelParams()
    family = list(obstacle_family) if obstacle_family is not None else wall_family()
    rng = np.random.default_rng(seed)
    starts, obstacles, speeds = [], [], []
    for _ in range(n_points):
        v = float(rng.uniform(0.0, rs_model.v_range))
        w = float(rng.uniform(-rs_model.omega_range, rs_model.omega_range))
        for k in rng.choice(len(family), size=obstacles_per_point, replace=False):
            phi = float(rng.uniform(-np.pi / 16, np.pi / 16))
            obstacles.append(family[k].transformed(rotation(phi), np.zeros(2)))
            starts.append([0.0, 0.0, 0.0, v, w])
            speeds.append((v, w))
    results = run_maneuvers(np.array(starts), obstacles, rp, model)
    inside = total = 0
    violations = []
    for (v, w), r in zip(speeds, results):
        rad = _unit_radius(rs_model, v, w, r.positions)
        ok = rad <= 1.0 + 1e-12
        inside += int(ok.sum())
        total += len(ok)
        if not ok.all():
            violations.append({"v": v, "omega": w, "points_outside": int((~ok).sum()), "max_radius": float(rad.max())})
    return {
        "n_points": n_points,
        "n_maneuvers": len(results),
        "fraction_inside": inside / total,
        "unconverged": int(sum(not r.converged for r in results)),
        "violations": violations,
    }


def save_calibration(path, rs_model: ReactiveSetModel, report: CalibrationReport | None = None) -> None:
    doc = {"version": 1, "model": rs_model.to_dict()}
    if report is not None:
        doc["report"] = report.to_dict()
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_calibration(path) -> ReactiveSetModel:
    with open(path) as fh:
        doc = json.load(fh)
    return ReactiveSetModel.from_dict(doc["model"])


def default_calibration() -> ReactiveSetModel:
    """Calibration shipped with the package (default model and controller parameters)."""
    from importlib.resources import files

    return load_calibration(files("secureplan").joinpath("data", "calibration.json"))
