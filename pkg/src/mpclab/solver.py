"""RTI step and converged SQP on top of the embedded QP solver.

``rti_step`` performs exactly one Gauss-Newton iteration (no line search,
full step); the returned trajectories may violate the nonlinear dynamics,
which is why callers re-integrate the controls before trusting a solution.
``sqp_solve`` iterates with re-linearization and an L1 merit backtracking
line search until the KKT residual drops below tolerance; it is used for the
safe-abort problem and wherever a converged solution is required.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import dynamics as dyn
from . import ocp
from .dynamics import Array
from .ocp import HARD_AT, SAFE_ABORT, ProblemInstance
from .qp import INFEASIBLE, MAX_ITER, SOLVED, solve_qp


@dataclass
class Solution:
    """Trajectories plus solver diagnostics for one problem instance."""

    X: Array
    U: Array
    slacks: Array
    status: str
    qp_iterations: int
    solve_time: float
    cost: float
    duals: Optional[Array] = None
    sqp_iterations: int = 1


def _initial_primal(instance: ProblemInstance, layout: ocp.QpLayout) -> Array:
    slacks = ocp.soft_violations(instance, instance.X_guess)
    return layout.pack(instance.X_guess, instance.U_guess, slacks)


def _dual_if_compatible(instance: ProblemInstance, layout: ocp.QpLayout) -> Optional[Array]:
    y = instance.dual_guess
    if y is not None and np.asarray(y).size == layout.nrow:
        return np.asarray(y, dtype=float)
    return None


def rti_step(
    instance: ProblemInstance,
    qp_tol: float = 1e-6,
    qp_max_iter: int = 4000,
) -> Solution:
    """Assemble at the guess, solve one QP, take the full step."""
    start = time.perf_counter()
    layout = ocp.layout_for(instance)
    qpd = ocp.assemble_qp(instance, instance.X_guess, instance.U_guess)
    res = solve_qp(
        qpd,
        tol=qp_tol,
        max_iter=qp_max_iter,
        x0=_initial_primal(instance, layout),
        y0=_dual_if_compatible(instance, layout),
    )
    elapsed = time.perf_counter() - start
    if res.status == INFEASIBLE:
        return Solution(
            X=instance.X_guess.copy(),
            U=instance.U_guess.copy(),
            slacks=np.zeros(layout.n_soft),
            status=INFEASIBLE,
            qp_iterations=res.iterations,
            solve_time=elapsed,
            cost=float("nan"),
            duals=None,
        )
    X, U, slacks = layout.unpack(res.x)
    return Solution(
        X=X,
        U=U,
        slacks=slacks,
        status=res.status,
        qp_iterations=res.iterations,
        solve_time=elapsed,
        cost=ocp.eval_cost(instance, X, U),
        duals=res.y,
    )


def _constraint_violations(instance: ProblemInstance, X: Array, U: Array) -> Array:
    """Stacked nonnegative violations of all hard constraints at (X, U)."""
    model = instance.model
    N = instance.N
    parts = [np.abs(X[0] - instance.x_init)]
    # Dynamics defects, all stages in one batched sweep.
    parts.append(np.abs(X[1:] - dyn.step_many(model, X[:N], U)).ravel())
    half = model.n_joints
    inner = X[1:N]
    if inner.size:
        parts.append(np.maximum(model.q_min - inner[:, :half], 0.0).ravel())
        parts.append(np.maximum(inner[:, :half] - model.q_max, 0.0).ravel())
        parts.append(np.maximum(np.abs(inner[:, half:]) - model.v_max, 0.0).ravel())
    parts.append(np.maximum(np.abs(U) - model.tau_max, 0.0).ravel())
    if instance.variant.kind == HARD_AT:
        value = instance.safe_set.membership_residual(X[instance.variant.index]).value
        parts.append(np.array([max(0.0, -value)]))
    if instance.variant.kind == SAFE_ABORT:
        parts.append(np.abs(X[N] - X[N - 1]))
    return np.concatenate(parts)


def _merit(instance: ProblemInstance, X: Array, U: Array, mu: float) -> float:
    return ocp.eval_cost(instance, X, U) + mu * float(np.sum(_constraint_violations(instance, X, U)))


def sqp_solve(
    instance: ProblemInstance,
    kkt_tol: float = 1e-6,
    max_sqp_iter: int = 100,
    qp_max_iter: int = 4000,
) -> Solution:
    """Full SQP with re-linearization and L1-merit backtracking until KKT-stationary."""
    start = time.perf_counter()
    layout = ocp.layout_for(instance)
    X = instance.X_guess.copy()
    U = instance.U_guess.copy()
    y = _dual_if_compatible(instance, layout)
    qp_tol = 0.1 * kkt_tol
    mu = 10.0
    total_qp = 0
    status = MAX_ITER
    iters = 0

    for it in range(1, max_sqp_iter + 1):
        iters = it
        qpd = ocp.assemble_qp(instance, X, U)
        if y is not None:
            z = layout.pack(X, U, ocp.soft_violations(instance, X))
            stationarity = float(np.max(np.abs(qpd.P @ z + qpd.q + qpd.A.T @ y)))
            feasibility = float(np.max(_constraint_violations(instance, X, U)))
            if stationarity < kkt_tol and feasibility < kkt_tol:
                status = SOLVED
                iters = it - 1
                break
        res = solve_qp(
            qpd,
            tol=qp_tol,
            max_iter=qp_max_iter,
            x0=layout.pack(X, U, ocp.soft_violations(instance, X)),
            y0=y,
        )
        total_qp += res.iterations
        if res.status == INFEASIBLE:
            status = INFEASIBLE
            break
        X_cand, U_cand, _ = layout.unpack(res.x)
        dX, dU = X_cand - X, U_cand - U
        mu = max(mu, 2.0 * float(np.max(np.abs(res.y))) + 1.0)
        base = _merit(instance, X, U, mu)
        t = 1.0
        accepted = False
        while t >= 1e-8:
            if _merit(instance, X + t * dX, U + t * dU, mu) < base - 1e-12:
                accepted = True
                break
            t *= 0.5
        y = res.y
        if not accepted:
            # No merit progress: either converged (caught next round) or stuck.
            step_norm = max(float(np.max(np.abs(dX))), float(np.max(np.abs(dU))))
            if step_norm < kkt_tol:
                continue
            status = MAX_ITER
            break
        X = X + t * dX
        U = U + t * dU

    elapsed = time.perf_counter() - start
    slacks = np.asarray(ocp.soft_violations(instance, X))
    return Solution(
        X=X,
        U=U,
        slacks=slacks,
        status=status,
        qp_iterations=total_qp,
        solve_time=elapsed,
        cost=ocp.eval_cost(instance, X, U) if status != INFEASIBLE else float("nan"),
        duals=y,
        sqp_iterations=iters,
    )
