"""Scenario files (JSON, schema-checked), plan/simulation traces (CSV) and summaries."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, fields
from pathlib import Path

import jsonschema
import numpy as np

from .dynamics import ModelParams, RobotState
from .geometry import ConvexPolygon
from .planner import NlpSolution, SolverParams
from .reactive_controller import ReactParams
from .reactive_set import default_calibration, load_calibration
from .sensor import SensorParams
from .simulator import Scenario, SimParams, SimTrace, TrackingGains

TRACE_VERSION = 1


class InputError(ValueError):
    """Malformed or schema-violating input file."""


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_point = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_polygon = {"type": "array", "items": _point, "minItems": 3}


def _block(props: dict, required: tuple = ()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCENARIO_SCHEMA = _block(
    {
        "name": {"type": "string"},
        "comment": {"type": "string"},
        "world": _block({"bounds": {"type": "array", "items": _num, "minItems": 4, "maxItems": 4}}, ("bounds",)),
        "true_obstacles": {"type": "array", "items": _polygon},
        "provided_obstacles": {"type": "array", "items": _polygon},
        "start": _block({"x": _num, "y": _num, "heading": _num, "v": _num, "omega": _num}, ("x", "y", "heading")),
        "goal": _block({"position": _point, "speed_cap": _nonneg}, ("position",)),
        "model": _block({"v_max": _pos, "omega_max": _pos, "a_max": _pos, "alpha_max": _pos, "v_min": {"type": ["number", "null"]}}),
        "sensor": _block({"range": _pos, "half_angle": _pos}),
        "planner": _block(
            {
                "K": {"type": "integer", "minimum": 2},
                "margin": _nonneg,
                "baseline_clearance": _nonneg,
                "max_iter": {"type": "integer", "minimum": 1},
                "ftol": _pos,
                "cv_tol": _pos,
                "kkt_tol": _pos,
                "restarts": {"type": "integer", "minimum": 0},
                "al_outer": {"type": "integer", "minimum": 0},
            }
        ),
        "reactive": _block({"calibration": {"type": "string"}}),
        "controller": _block(
            {
                "horizon": {"type": "integer", "minimum": 2},
                "dt": _pos,
                "weight_obstacle": _nonneg,
                "weight_anchor": _nonneg,
                "weight_speed": _nonneg,
                "rest_threshold": _nonneg,
                "iterations": {"type": "integer", "minimum": 1},
                "time_cap": _pos,
            }
        ),
        "simulation": _block(
            {
                "dt": _pos,
                "t_max": _pos,
                "prior_radius": _nonneg,
                "settle_time": _nonneg,
                "max_replans": {"type": "integer", "minimum": 0},
                "plan_authority": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "tracking": _block({f.name: _nonneg for f in fields(TrackingGains)}),
            }
        ),
    },
    ("world", "true_obstacles", "provided_obstacles", "start", "goal"),
)

_SOLVER_KEYS = ("max_iter", "ftol", "cv_tol", "kkt_tol", "restarts", "al_outer")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def scenario_from_dict(doc: dict, base_dir: Path | None = None, name: str = "scenario") -> Scenario:
    try:
        jsonschema.validate(doc, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"scenario schema violation at {path}: {exc.message}") from None
    planner = doc.get("planner", {})
    sim = dict(doc.get("simulation", {}))
    tracking = TrackingGains(**sim.pop("tracking", {}))
    source = doc.get("reactive", {}).get("calibration", "default")
    try:
        if source == "default":
            reactive = default_calibration()
        else:
            p = Path(source)
            reactive = load_calibration(p if p.is_absolute() or base_dir is None else base_dir / p)
        return Scenario(
            name=doc.get("name", name),
            comment=doc.get("comment", ""),
            bounds=tuple(doc["world"]["bounds"]),
            true_obstacles=[ConvexPolygon.from_vertices(v) for v in doc["true_obstacles"]],
            provided_obstacles=[ConvexPolygon.from_vertices(v) for v in doc["provided_obstacles"]],
            start=RobotState(**{k: float(v) for k, v in doc["start"].items()}),
            goal=np.array(doc["goal"]["position"], dtype=float),
            goal_speed_cap=float(doc["goal"].get("speed_cap", 0.0)),
            reactive=reactive,
            reactive_source=source,
            model=ModelParams(**doc.get("model", {})),
            sensor=SensorParams(**doc.get("sensor", {})),
            solver=SolverParams(**{k: planner[k] for k in _SOLVER_KEYS if k in planner}),
            controller=ReactParams(**doc.get("controller", {})),
            sim=SimParams(tracking=tracking, **sim),
            K=int(planner.get("K", 40)),
            margin=float(planner.get("margin", 0.01)),
            baseline_clearance=float(planner.get("baseline_clearance", 0.1)),
        )
    except (ValueError, TypeError, OSError, KeyError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"invalid scenario: {exc}") from None


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read scenario {path}: {exc}") from None
    return scenario_from_dict(doc, path.parent, path.stem)


def scenario_to_dict(sc: Scenario) -> dict:
    """Canonical document: every block written out in full."""
    sim = asdict(sc.sim)
    sim.pop("wall_time_max")
    if sim["prior_radius"] is None:
        sim.pop("prior_radius")
    ctrl = asdict(sc.controller)
    ctrl.pop("sim_dt")
    doc = {
        "name": sc.name,
        "world": {"bounds": list(sc.bounds)},
        "true_obstacles": [o.to_list() for o in sc.true_obstacles],
        "provided_obstacles": [o.to_list() for o in sc.provided_obstacles],
        "start": {"x": sc.start.x, "y": sc.start.y, "heading": sc.start.heading, "v": sc.start.v, "omega": sc.start.omega},
        "goal": {"position": sc.goal.tolist(), "speed_cap": sc.goal_speed_cap},
        "model": asdict(sc.model),
        "sensor": asdict(sc.sensor),
        "planner": {
            "K": sc.K,
            "margin": sc.margin,
            "baseline_clearance": sc.baseline_clearance,
            **{k: getattr(sc.solver, k) for k in _SOLVER_KEYS},
        },
        "reactive": {"calibration": sc.reactive_source},
        "controller": ctrl,
        "simulation": sim,
    }
    if sc.comment:
        doc["comment"] = sc.comment
    return doc


def save_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=2, sort_keys=True) + "\n")


def packaged_scenario(name: str) -> Path:
    from importlib.resources import files

    p = Path(str(files("secureplan").joinpath("data", "scenarios", f"{name}.json")))
    if not p.exists():
        raise InputError(f"no packaged scenario named {name!r}")
    return p


def resolve_scenario(arg: str) -> Path:
    """A path, or the name of a packaged scenario."""
    p = Path(arg)
    if p.exists():
        return p
    return packaged_scenario(arg)


# ----------------------------------------------------------------------------
# traces


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return repr(float(v))


def _write_table(header: dict, columns: list[str], rows, path) -> None:
    buf = io.StringIO()
    for k, v in header.items():
        buf.write(f"# {k}: {v}\n")
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    Path(path).write_text(buf.getvalue())


def read_table(path) -> tuple[dict, list[str], list[list[str]]]:
    header, columns, rows = {}, None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition(": ")
            header[k] = v
        elif columns is None:
            columns = line.split(",")
        elif line:
            rows.append(line.split(","))
    return header, columns or [], rows


PLAN_COLUMNS = ["node", "t", "x", "y", "heading", "v", "omega", "a", "alpha", "obstacle_margin", "visibility_margin"]
SIM_COLUMNS = ["t", "x", "y", "heading", "v", "omega", "a", "alpha", "mode", "clearance", "plan"]


def write_plan_trace(sol: NlpSolution, path, scenario_hash: str, mode: str, seed: int = 0) -> None:
    header = {
        "format": "secureplan-plan",
        "version": TRACE_VERSION,
        "scenario_hash": scenario_hash,
        "seed": seed,
        "mode": mode,
        "status": sol.status,
        "t_f": repr(sol.t_f),
        "K": sol.K,
        "lag": sol.lag,
        "kkt_residual": repr(sol.kkt_residual),
        "constraint_violation": repr(sol.constraint_violation),
    }
    obs = sol.obstacle_margin if sol.obstacle_margin is not None else np.full(sol.K, np.nan)
    vis = sol.visibility_margin if sol.visibility_margin is not None else np.full(sol.K, np.nan)
    rows = ([i, t, *sol.X[i], *sol.U[i], obs[i], vis[i]] for i, t in enumerate(sol.times))
    _write_table(header, PLAN_COLUMNS, ([str(r[0])] + r[1:] for r in rows), path)


def read_plan_trace(path) -> tuple[NlpSolution, dict]:
    header, columns, rows = read_table(path)
    if header.get("format") != "secureplan-plan" or columns != PLAN_COLUMNS:
        raise InputError(f"{path} is not a plan trace")
    data = np.array([[float(v) for v in r] for r in rows])
    sol = NlpSolution(
        X=data[:, 2:7],
        U=data[:, 7:9],
        t_f=float(header["t_f"]),
        status=header["status"],
        kkt_residual=float(header["kkt_residual"]),
        constraint_violation=float(header["constraint_violation"]),
        lag=int(header["lag"]),
        obstacle_margin=data[:, 9],
        visibility_margin=data[:, 10],
        secure=header["mode"] == "secure",
    )
    return sol, header


def write_sim_trace(trace: SimTrace, path, scenario_hash: str) -> None:
    header = {
        "format": "secureplan-sim",
        "version": TRACE_VERSION,
        "scenario_hash": scenario_hash,
        "seed": trace.seed,
        "mode": "secure" if trace.secure else "baseline",
        "status": trace.status,
    }
    rows = ([r.t, *r.x, *r.u, r.mode, r.clearance, str(r.plan_index)] for r in trace.records)
    _write_table(header, SIM_COLUMNS, rows, path)


def trace_summary(trace: SimTrace, scenario_hash: str) -> dict:
    """Summary block; wall-clock numbers are kept apart so the trace itself stays reproducible."""
    s = trace.summary()
    s["scenario_hash"] = scenario_hash
    s["plans"] = [p.to_dict() for p in trace.plans]
    return s


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
