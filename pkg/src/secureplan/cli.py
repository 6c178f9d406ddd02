"""Command-line interface: calibrate, plan, simulate, compare, verify.

Exit codes: 0 success, 1 verification failure, 2 input error, 3 solver
non-convergence, 4 collision in secure mode.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .dynamics import ModelParams
from .geometry import signed_distance
from .io import (
    InputError,
    file_digest,
    load_scenario,
    read_plan_trace,
    resolve_scenario,
    trace_summary,
    write_json,
    write_plan_trace,
    write_sim_trace,
)
from .planner import PlanningError, check_discretization, plan, plan_baseline, verify_minp_constraint
from .reactive_controller import ReactParams
from .reactive_set import CalibrationError, audit, calibrate, save_calibration
from .render import frame_figure, plan_figure, write_manifest
from .simulator import ScenarioError, monte_carlo_safety, run

log = logging.getLogger("secureplan")

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_SOLVER, EXIT_COLLISION = 0, 1, 2, 3, 4
SEED_ENV = "REACTIVE_HORIZON_SEED"


def _seed(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ----------------------------------------------------------------------------
# commands


def cmd_calibrate(args) -> int:
    try:
        model = ModelParams(v_max=args.v_max, omega_max=args.omega_max, a_max=args.a_max, alpha_max=args.alpha_max)
        rp = ReactParams(weight_obstacle=args.weight_obstacle, weight_anchor=args.weight_anchor, weight_speed=args.weight_speed)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    try:
        rs, report = calibrate(model=model, rp=rp)
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if args.audit:
        report.audit = audit(rs, n_points=args.audit, model=model, rp=rp, seed=_seed(args.seed))
    save_calibration(args.out, rs, report)
    print(f"calibration written to {args.out}")
    print(f"  containment {100 * report.containment_fraction:.1f}%  inflation {report.inflation:.3f}  rms fit residual {report.rms_fit_residual:.3f} m")
    if report.audit:
        print(f"  off-grid audit: {100 * report.audit['fraction_inside']:.2f}% of path points inside")
    return EXIT_OK


def cmd_plan(args) -> int:
    path = resolve_scenario(args.scenario)
    sc = load_scenario(path)
    sc.validate()
    digest = file_digest(path)
    belief = sc.initial_belief()
    solver = plan if args.secure else plan_baseline
    t0 = time.perf_counter()
    sol = solver(sc.problem(belief, sc.start), sp=sc.solver)
    wall = time.perf_counter() - t0
    mode = "secure" if args.secure else "baseline"
    out = _out_dir(args.out)
    write_plan_trace(sol, out / "plan.csv", digest, mode)
    clearance = _min_clearance(sol.X[:, :2], belief.known_obstacles)
    write_json({**sol.to_dict(), "scenario_hash": digest, "wall_time": wall, "min_clearance": clearance}, out / "plan.json")
    manifest = plan_figure(sc, sol, out / "plan.svg", belief.known_obstacles, sc.unknown_obstacles, f"{sc.name}: {mode}, t_f = {sol.t_f:.2f} s")
    write_manifest(manifest, out / "plan.manifest.json")
    print(f"{mode} plan: status {sol.status}, t_f {sol.t_f:.3f} s, lag {sol.lag}, min clearance {clearance:.3f} m, solve {wall:.1f} s")
    return EXIT_OK if sol.converged else EXIT_SOLVER


def _min_clearance(xy: np.ndarray, obstacles) -> float:
    return float(min((signed_distance(p, o) for p in xy for o in obstacles), default=float("inf")))


def cmd_simulate(args) -> int:
    path = resolve_scenario(args.scenario)
    sc = load_scenario(path)
    seed = _seed(args.seed)
    digest = file_digest(path)
    trace = run(sc, secure=args.secure, seed=seed)
    out = _out_dir(args.out)
    write_sim_trace(trace, out / "trace.csv", digest)
    write_json(trace_summary(trace, digest), out / "summary.json")
    if not args.no_frames and trace.records:
        frames = {"start": 0, "final": len(trace.records) - 1}
        if trace.detections:
            first = trace.detections[0]
            frames["detection"] = int(np.searchsorted(trace.times, first.time - 1e-9))
        for name, k in frames.items():
            det = trace.detections[0].robot_state.position if (trace.detections and name != "start" and trace.records[k].t >= trace.detections[0].time - 1e-9) else None
            manifest = frame_figure(sc, trace, k, out / f"frame_{name}.svg", f"{sc.name}: t = {trace.records[k].t:.2f} s", det)
            write_manifest(manifest, out / f"frame_{name}.manifest.json")
    mode = "secure" if args.secure else "baseline"
    print(f"{mode} run: {trace.status}, collision {trace.collision}, detections {len(trace.detections)}, stops {len(trace.stops)}, t {trace.records[-1].t if trace.records else 0:.2f} s")
    if trace.collision and args.secure:
        return EXIT_COLLISION
    if trace.plans and not trace.plans[0].converged:
        return EXIT_SOLVER
    return EXIT_OK


def compare(sc, trials: int = 0, seed: int = 0, workers: int = 1) -> dict:
    """Plan and run both modes on ``sc`` (optionally with Monte Carlo trials)."""
    rows = {}
    for mode, secure in (("baseline", False), ("secure", True)):
        belief = sc.initial_belief()
        solver = plan if secure else plan_baseline
        t0 = time.perf_counter()
        sol = solver(sc.problem(belief, sc.start), sp=sc.solver)
        wall = time.perf_counter() - t0
        trace = run(sc, secure=secure, seed=seed)
        rows[mode] = {
            "planned_t_f": sol.t_f,
            "plan_status": sol.status,
            "solver_wall_time": wall,
            "plan_min_clearance": _min_clearance(sol.X[:, :2], belief.known_obstacles),
            "outcome": trace.status,
            "collision": trace.collision,
            "realized_min_clearance": trace.min_clearance,
        }
        if trials:
            mc = monte_carlo_safety(sc.without_unknowns(), trials, seed, secure=secure, workers=workers)
            rows[mode]["monte_carlo"] = {k: mc[k] for k in ("n_trials", "collisions", "goal_reached", "infeasible_after_detection", "crashes", "statuses")}
    base = rows["baseline"]["solver_wall_time"]
    rows["solver_time_ratio"] = rows["secure"]["solver_wall_time"] / base if base > 0 else float("nan")
    return rows


def cmd_compare(args) -> int:
    path = resolve_scenario(args.scenario)
    sc = load_scenario(path)
    sc.validate()
    rows = compare(sc, args.trials, _seed(args.seed), args.workers)
    print(f"{'':28s}{'baseline':>14s}{'secure':>14s}")
    for key, fmt in (
        ("planned_t_f", "{:14.3f}"),
        ("plan_status", "{:>14s}"),
        ("solver_wall_time", "{:14.2f}"),
        ("plan_min_clearance", "{:14.3f}"),
        ("outcome", "{:>14s}"),
        ("collision", "{!s:>14}"),
        ("realized_min_clearance", "{:14.3f}"),
    ):
        print(f"{key:28s}" + "".join(fmt.format(rows[m][key]) for m in ("baseline", "secure")))
    print(f"{'solver time ratio':28s}{rows['solver_time_ratio']:28.2f}")
    if args.trials:
        for key in ("collisions", "goal_reached", "infeasible_after_detection", "crashes"):
            print(f"{'mc ' + key:28s}" + "".join(f"{rows[m]['monte_carlo'][key]:14d}" for m in ("baseline", "secure")))
    if args.json:
        write_json(rows, args.json)
    if rows["secure"]["collision"] or (args.trials and rows["secure"]["monte_carlo"]["collisions"]):
        return EXIT_COLLISION
    return EXIT_OK


def cmd_verify(args) -> int:
    sol, header = read_plan_trace(args.trace)
    path = resolve_scenario(args.scenario)
    if header.get("scenario_hash") != file_digest(path):
        raise InputError("trace was not produced from this scenario file (hash mismatch)")
    sc = load_scenario(path)
    p = sc.problem(sc.initial_belief(), sc.start).with_lag(sol.lag)
    witness = verify_minp_constraint(sol, p)
    disc = check_discretization(sol, p, args.dense_factor)
    report = {"witness": witness.to_dict(), "discretization": disc.to_dict()}
    if args.json:
        write_json(report, args.json)
    print(f"witness search: {'pass' if witness.passed else 'FAIL'} ({len(witness.failures)} nodes without a witness)")
    print(f"dense check x{args.dense_factor}: min visibility margin {disc.min_margin:.4g} m ({'flagged' if disc.flagged else 'ok'})")
    return EXIT_OK if witness.passed and not disc.flagged else EXIT_VERIFY


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="secureplan", description="Secure minimum-time planning over an untrusted map.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="fit the reactive-set model")
    c.add_argument("--out", required=True)
    defaults = ModelParams()
    for name in ("v_max", "omega_max", "a_max", "alpha_max"):
        c.add_argument(f"--{name.replace('_', '-')}", type=float, default=getattr(defaults, name))
    rp = ReactParams()
    for name in ("weight_obstacle", "weight_anchor", "weight_speed"):
        c.add_argument(f"--{name.replace('_', '-')}", type=float, default=getattr(rp, name))
    c.add_argument("--audit", type=int, default=100, help="off-grid spot checks (0 to skip)")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_calibrate)

    def mode_flags(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--secure", dest="secure", action="store_true", default=True)
        g.add_argument("--baseline", dest="secure", action="store_false")

    p = sub.add_parser("plan", help="solve one plan on the scenario's initial belief")
    p.add_argument("scenario", help="scenario file or packaged scenario name")
    mode_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    s = sub.add_parser("simulate", help="closed-loop run")
    s.add_argument("scenario")
    mode_flags(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--no-frames", action="store_true")
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("compare", help="baseline against secure")
    m.add_argument("scenario")
    m.add_argument("--trials", type=int, default=0)
    m.add_argument("--seed", type=int)
    m.add_argument("--workers", type=int, default=1)
    m.add_argument("--json")
    m.set_defaults(func=cmd_compare)

    v = sub.add_parser("verify", help="witness search and dense visibility check of a plan trace")
    v.add_argument("trace")
    v.add_argument("--scenario", required=True)
    v.add_argument("--dense-factor", type=int, default=10)
    v.add_argument("--json")
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ScenarioError, PlanningError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
