"""Secure and baseline minimum-time planners on the belief map."""

from __future__ import annotations

import logging

from .guess import grid_path, initial_guess, resample
from .problem import (
    InfeasibleScenarioError,
    NlpSolution,
    PlanningError,
    PlanProblem,
    SolverParams,
    lag_for,
)
from .solver import kkt_residual, solve
from .transcription import Transcription
from .verify import check_discretization, verify_minp_constraint

log = logging.getLogger(__name__)

__all__ = [
    "InfeasibleScenarioError",
    "NlpSolution",
    "PlanProblem",
    "PlanningError",
    "SolverParams",
    "Transcription",
    "check_discretization",
    "grid_path",
    "initial_guess",
    "kkt_residual",
    "lag_for",
    "plan",
    "plan_baseline",
    "resample",
    "solve",
    "transcribe",
    "verify_minp_constraint",
]


def transcribe(problem: PlanProblem, secure: bool = True) -> Transcription:
    problem.validate()
    return Transcription(problem, secure=secure)


def _fix_lag(problem: PlanProblem, guess) -> PlanProblem:
    if problem.lag is not None:
        return problem
    return problem.with_lag(lag_for(guess[2], problem.K))


def _run(problem: PlanProblem, secure: bool, guess, sp: SolverParams | None) -> NlpSolution:
    problem = _fix_lag(problem, guess)
    tr = transcribe(problem, secure)
    return solve(tr, tr.pack(*guess), sp)


def plan_baseline(
    problem: PlanProblem, warm: NlpSolution | None = None, sp: SolverParams | None = None, t_from: float = 0.0
) -> NlpSolution:
    """Minimum-time plan for the point robot with no visibility constraint."""
    problem.validate()
    return _run(problem, False, initial_guess(problem, warm, t_from), sp)


def plan(
    problem: PlanProblem, warm: NlpSolution | None = None, sp: SolverParams | None = None, t_from: float = 0.0
) -> NlpSolution:
    """Secure minimum-time plan.

    Tries the given warm start (or the grid guess); if that does not converge,
    retries from the baseline solution, which is usually a better-shaped guess.
    When the lag was chosen automatically and every attempt fails, the lag is
    lengthened by one node (a longer look-back is needed when the robot must
    crawl through a tight gap) and the best attempt is used as the next guess.
    """
    problem.validate()
    guess = initial_guess(problem, warm, t_from, secure=True)
    auto_lag = problem.lag is None
    problem = _fix_lag(problem, guess)
    sol = _run(problem, True, guess, sp)
    if sol.converged:
        return sol
    attempts = [sol]
    if warm is not None:
        grid = initial_guess(problem, secure=True)
        attempts.append(_run(problem, True, grid, sp))
        if attempts[-1].converged:
            return attempts[-1]
    base = plan_baseline(problem, sp=sp)
    if base.constraint_violation <= 1e-3:
        attempts.append(_run(problem, True, resample(base, problem.K), sp))
        if attempts[-1].converged:
            return attempts[-1]
    while auto_lag and 2 * (problem.lag + 1) <= problem.K and problem.lag < 2 * lag_for(guess[2], problem.K) + 1:
        best = _best(attempts)
        problem = problem.with_lag(problem.lag + 1)
        log.info("retrying the secure plan with lag %d", problem.lag)
        attempts.append(_run(problem, True, (best.X, best.U, best.t_f), sp))
        if attempts[-1].converged:
            return attempts[-1]
    log.info("secure plan did not converge: %s", [a.status for a in attempts])
    return _best(attempts)


def _best(attempts: list[NlpSolution]) -> NlpSolution:
    return min(attempts, key=lambda a: (a.constraint_violation > 1e-4, a.constraint_violation, a.kkt_residual))
