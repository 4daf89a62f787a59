"""Deterministic batch solving of problem instances over a bounded pool.

Results come back in request order no matter how workers are scheduled, a
crashing worker degrades to an infeasible Solution instead of killing the
batch, and worker_limit only caps concurrency: it never changes which
problems are solved or what they return, so outputs are identical for any
worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ocp
from .ocp import ProblemInstance
from .qp import INFEASIBLE
from .solver import Solution, rti_step


@dataclass(frozen=True)
class BatchRequest:
    instances: tuple[ProblemInstance, ...]
    worker_limit: int = 1

    def __post_init__(self):
        if not self.instances:
            raise ValueError("batch must contain at least one instance")
        if self.worker_limit < 1:
            raise ValueError("worker_limit must be >= 1")


def _failed_solution(instance: ProblemInstance) -> Solution:
    layout = ocp.layout_for(instance)
    return Solution(
        X=instance.X_guess.copy(),
        U=instance.U_guess.copy(),
        slacks=np.zeros(layout.n_soft),
        status=INFEASIBLE,
        qp_iterations=0,
        solve_time=0.0,
        cost=float("nan"),
    )


def _solve_one(instance: ProblemInstance, qp_tol: float, qp_max_iter: int) -> Solution:
    try:
        return rti_step(instance, qp_tol=qp_tol, qp_max_iter=qp_max_iter)
    except Exception:
        return _failed_solution(instance)


def solve_batch(
    request: BatchRequest,
    qp_tol: float = 1e-6,
    qp_max_iter: int = 4000,
    executor: Optional[Executor] = None,
) -> list[Solution]:
    """Solve every instance exactly once; results in request order."""
    if executor is None or request.worker_limit <= 1 or len(request.instances) == 1:
        return [_solve_one(inst, qp_tol, qp_max_iter) for inst in request.instances]
    futures = [
        executor.submit(_solve_one, inst, qp_tol, qp_max_iter) for inst in request.instances
    ]
    return [f.result() for f in futures]


def select_best(
    r_values: Sequence[Optional[float]],
    costs: Sequence[float],
    ps: Optional[Sequence[int]] = None,
) -> Optional[int]:
    """Index of the largest safe index; ties by lower cost, then lower p.

    None entries (and NaNs) are skipped; returns None when nothing qualifies.
    """
    if len(r_values) != len(costs):
        raise ValueError("r_values and costs must align")
    if ps is None:
        ps = list(range(len(r_values)))
    best: Optional[int] = None
    best_key = None
    for i, r in enumerate(r_values):
        if r is None or (isinstance(r, float) and math.isnan(r)):
            continue
        cost = costs[i]
        cost_key = math.inf if (cost is None or (isinstance(cost, float) and math.isnan(cost))) else cost
        key = (-float(r), cost_key, ps[i])
        if best_key is None or key < best_key:
            best = i
            best_key = key
    return best
