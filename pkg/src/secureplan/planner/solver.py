"""SQP solve of the transcribed problem, with an augmented-Lagrangian fallback.

The SQP step is scipy's SLSQP (an l1-merit line search with a BFGS Hessian
approximation). It exposes no Lagrange multipliers, so first-order
optimality is measured afterwards: multipliers are estimated by
sign-constrained least squares on the near-active set and the residual of the
Lagrangian gradient is reported as the KKT residual.
"""

from __future__ import annotations

import logging
import time
import warnings

import numpy as np
from scipy.optimize import Bounds, lsq_linear, minimize

from .problem import NlpSolution, SolverParams
from .transcription import Transcription

log = logging.getLogger(__name__)

ACTIVE_TOLS = (1e-8, 1e-6, 1e-5, 1e-4)


def kkt_residual(tr: Transcription, z: np.ndarray) -> float:
    """Infinity norm of the Lagrangian gradient with least-squares multipliers.

    Several activity thresholds are tried and the smallest residual is kept;
    each is a valid stationarity estimate with complementarity slack bounded
    by the threshold.
    """
    grad = tr.objective_grad(z)
    ce, Je, ci, Ji = tr._evaluate(z)
    lo, hi = tr.bounds()
    best = np.inf
    for tol in ACTIVE_TOLS:
        act = np.flatnonzero(ci <= tol)
        at_lo = np.flatnonzero(z - lo <= tol)
        at_hi = np.flatnonzero(hi - z <= tol)
        cols = [Je.T, Ji[act].T, np.eye(tr.n)[:, at_lo], -np.eye(tr.n)[:, at_hi]]
        A = np.hstack(cols)
        n_free = Je.shape[0]
        lb = np.concatenate([np.full(n_free, -np.inf), np.zeros(A.shape[1] - n_free)])
        ub = np.full(A.shape[1], np.inf)
        if A.shape[1] == 0:
            res = np.max(np.abs(grad))
        else:
            sol = lsq_linear(A, grad, bounds=(lb, ub), method="bvls", max_iter=2000)
            res = float(np.max(np.abs(A @ sol.x - grad)))
        best = min(best, res)
        if best <= 1e-9:
            break
    return float(best)


def _slsqp(tr: Transcription, z0: np.ndarray, sp: SolverParams):
    lo, hi = tr.bounds()
    cons = []
    if tr.n_eq:
        cons.append({"type": "eq", "fun": tr.eq, "jac": None if sp.finite_differences else tr.eq_jac})
    if tr.n_ineq:
        cons.append({"type": "ineq", "fun": tr.ineq, "jac": None if sp.finite_differences else tr.ineq_jac})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = minimize(
            tr.objective,
            np.clip(z0, lo, hi),
            jac=tr.objective_grad,
            method="SLSQP",
            bounds=Bounds(lo, hi),
            constraints=cons,
            options={"maxiter": sp.max_iter, "ftol": sp.ftol},
        )
    return res


def _augmented_lagrangian(tr: Transcription, z0: np.ndarray, sp: SolverParams) -> tuple[np.ndarray, int]:
    """Bound-constrained AL iterations (L-BFGS-B inner solver)."""
    lo, hi = tr.bounds()
    z = np.clip(z0, lo, hi)
    lam = np.zeros(tr.n_eq)
    mu = np.zeros(tr.n_ineq)
    rho = sp.al_rho0
    total = 0
    for _ in range(sp.al_outer):

        def fun(zz):
            ce, Je, ci, Ji = tr._evaluate(zz)
            val = tr.objective(zz) - lam @ ce + 0.5 * rho * ce @ ce
            grad = tr.objective_grad(zz) - Je.T @ lam + rho * Je.T @ ce
            # PHR term for g >= 0
            s = np.maximum(0.0, mu - rho * ci)
            val += (s @ s - mu @ mu) / (2 * rho)
            grad -= Ji.T @ s
            return val, grad

        res = minimize(fun, z, jac=True, method="L-BFGS-B", bounds=Bounds(lo, hi),
                       options={"maxiter": sp.al_inner_iter, "ftol": 1e-14, "gtol": 1e-9})
        z = res.x
        total += int(res.nit)
        ce, _, ci, _ = tr._evaluate(z)
        lam = lam - rho * ce
        mu = np.maximum(0.0, mu - rho * ci)
        if tr.violation(z) <= 0.1 * sp.cv_tol:
            break
        rho *= sp.al_rho_growth
    return z, total


def solve(tr: Transcription, z0: np.ndarray, sp: SolverParams | None = None) -> NlpSolution:
    """Solve the transcribed problem from the guess ``z0``."""
    sp = sp or SolverParams()
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (tr.n,):
        raise ValueError(f"guess has {z0.size} entries, expected {tr.n}")
    t_start = time.perf_counter()
    res = _slsqp(tr, z0, sp)
    z, iters, solver = res.x, int(res.nit), "slsqp"
    cv, kkt = tr.violation(z), kkt_residual(tr, z)
    log.debug("slsqp status=%s nit=%d cv=%.2e kkt=%.2e", res.status, res.nit, cv, kkt)
    for _ in range(sp.restarts):
        if (cv <= sp.cv_tol and kkt <= sp.kkt_tol) or cv > 1e-2:
            break
        # a fresh start resets the quasi-Newton matrix, which is often all a stall needs
        res = _slsqp(tr, z, sp)
        z, iters = res.x, iters + int(res.nit)
        cv, kkt = tr.violation(z), kkt_residual(tr, z)
        log.debug("restart status=%s nit=%d cv=%.2e kkt=%.2e", res.status, res.nit, cv, kkt)
    if not (cv <= sp.cv_tol and kkt <= sp.kkt_tol) and sp.al_outer > 0:
        # inconsistent linearization or stalled line search: restore feasibility with
        # the augmented Lagrangian, then polish with another SQP run
        z_al, n_al = _augmented_lagrangian(tr, z if cv < tr.violation(z0) else z0, sp)
        res2 = _slsqp(tr, z_al, sp)
        cv2, kkt2 = tr.violation(res2.x), kkt_residual(tr, res2.x)
        log.debug("fallback status=%s nit=%d cv=%.2e kkt=%.2e", res2.status, res2.nit, cv2, kkt2)
        iters += n_al + int(res2.nit)
        if (cv2 <= sp.cv_tol) > (cv <= sp.cv_tol) or (
            (cv2 <= sp.cv_tol) == (cv <= sp.cv_tol) and (kkt2 if cv2 <= sp.cv_tol else cv2) < (kkt if cv <= sp.cv_tol else cv)
        ):
            z, cv, kkt, res, solver = res2.x, cv2, kkt2, res2, "augmented-lagrangian+slsqp"
    if cv <= sp.cv_tol and kkt <= sp.kkt_tol:
        status = "converged"
    elif cv <= sp.cv_tol or res.status == 9:
        status = "max-iter"
    else:
        status = "infeasible"
    X, U, t_f = tr.unpack(z)
    obs, vis = tr.node_margins(z)
    return NlpSolution(
        X=X.copy(),
        U=U.copy(),
        t_f=t_f,
        status=status,
        kkt_residual=kkt,
        constraint_violation=cv,
        lag=tr.lag,
        iterations=iters,
        solver=solver,
        message=str(res.message),
        wall_time=time.perf_counter() - t_start,
        obstacle_margin=obs,
        visibility_margin=vis,
        secure=tr.secure,
    )
