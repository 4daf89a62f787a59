"""The control loop: constraint scheduling, solution checking, safe abortion.

Per loop, the parallel-constraint family builds one hard-constrained problem
per selected horizon step, solves them as a batch, forward-integrates every
returned control trajectory, and adopts the solution whose integrated states
stay in the safe set furthest along the horizon. A retained trajectory plus
the safe-horizon index r provide the fallback (shift one step) and the abort
trigger. The receding baseline solves a single soft-constrained problem and
slides r; the naive baseline has no safety bookkeeping at all.

Abort threshold: the parallel family triggers at r == L, the receding
baseline at r == 1 + L; both thresholds are used as published even though
they differ by one step.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import dynamics as dyn
from . import ocp
from . import parallel
from .dynamics import Array, ModelSpec
from .ocp import CostWeights, OcpSetup, OcpVariant, ProblemInstance
from .qp import INFEASIBLE, SOLVED
from .safesets import SafeSetModel
from .solver import Solution, rti_step, sqp_solve

PARALLEL = "parallel"
UNIFORM = "uniform"
HIGH = "high"
CLOSEST = "closest"
RECEDING = "receding"
NAIVE = "naive"

STRATEGIES = (PARALLEL, UNIFORM, HIGH, CLOSEST, RECEDING, NAIVE)
PARALLEL_FAMILY = (PARALLEL, UNIFORM, HIGH, CLOSEST)


class ControllerError(ValueError):
    """Raised for invalid configurations or misuse of the loop API."""


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_time_steps(
    strategy: str,
    r: int,
    N: int,
    K: int,
    prev_violations: Optional[Array] = None,
) -> list[int]:
    """Choose the horizon steps that receive a safe-set constraint this loop.

    Always includes r-1 (the step that was certified feasible last loop)
    whenever r >= 2. Returns an ascending list of min(K, N) distinct steps
    in [1, N].
    """
    if strategy not in PARALLEL_FAMILY:
        raise ControllerError(f"no step selection for strategy {strategy!r}")
    K = min(int(K), int(N))
    if K < 1:
        raise ControllerError("K must be >= 1")
    if strategy == PARALLEL:
        return list(range(1, N + 1))
    mandatory = r - 1 if r >= 2 else None

    if strategy == CLOSEST and prev_violations is None:
        strategy = UNIFORM  # no violation history yet (first loop)

    picks: list[int] = []
    if strategy == UNIFORM:
        if mandatory is None:
            picks = [_round_half_up(j * N / K) for j in range(1, K + 1)]
        else:
            # Split the horizon at the anchor and give each side a share of
            # picks proportional to its length, spacing them evenly with the
            # last pick of each side landing on the side's endpoint.
            left_len = mandatory
            k_left = min(max(_round_half_up(K * left_len / N), 1), K)
            k_right = K - k_left
            picks = [_round_half_up(j * left_len / k_left) for j in range(1, k_left + 1)]
            right_len = N - mandatory
            picks += [mandatory + _round_half_up(j * right_len / k_right) for j in range(1, k_right + 1)]
    elif strategy == HIGH:
        if mandatory is not None:
            picks.append(mandatory)
        step = N
        while len(picks) < K and step >= 1:
            if step != mandatory:
                picks.append(step)
            step -= 1
    else:  # CLOSEST
        if mandatory is not None:
            picks.append(mandatory)
        magnitudes = np.maximum(-np.asarray(prev_violations, dtype=float)[1 : N + 1], 0.0)
        order = sorted(
            (p for p in range(1, N + 1) if p != mandatory),
            key=lambda p: (magnitudes[p - 1], -p),
        )
        picks += order[: K - len(picks)]

    chosen = sorted(set(int(p) for p in picks if 1 <= p <= N))
    if mandatory is not None and mandatory not in chosen:
        chosen.append(mandatory)
    # Rounding collisions can shrink the set; refill from the far end.
    fill = N
    while len(chosen) < K and fill >= 1:
        if fill not in chosen:
            chosen.append(fill)
        fill -= 1
    return sorted(chosen)[:K] if len(chosen) > K else sorted(chosen)


@dataclass
class CheckResult:
    """Outcome of forward-integrating a control trajectory."""

    r_p: Optional[int]
    residuals: Array  # membership residual value at every integrated state
    box_ok: bool
    X_sim: Array


def check_rollout(
    model: ModelSpec,
    safe_set: SafeSetModel,
    X_sim: Array,
    U: Array,
    from_index: int,
    check_tol: float,
) -> CheckResult:
    """Classify an already-integrated trajectory (see check_solution)."""
    N = U.shape[0]
    half = model.n_joints
    q = X_sim[:, :half]
    v = X_sim[:, half:]
    box_ok = bool(
        np.all(q >= model.q_min - check_tol)
        and np.all(q <= model.q_max + check_tol)
        and np.all(np.abs(v) <= model.v_max + check_tol)
        and np.all(np.abs(U) <= model.tau_max + check_tol)
    )
    residuals = np.array([safe_set.membership_residual(x).value for x in X_sim])
    r_p: Optional[int] = None
    if box_ok:
        lo = max(int(from_index), 0)
        for k in range(N, lo - 1, -1):
            if residuals[k] >= 0.0:
                r_p = k
                break
    return CheckResult(r_p=r_p, residuals=residuals, box_ok=box_ok, X_sim=X_sim)


def check_solution(
    model: ModelSpec,
    safe_set: SafeSetModel,
    U: Array,
    x_init: Array,
    from_index: int,
    check_tol: float = 1e-6,
) -> CheckResult:
    """Forward-integrate U from x_init and search for the last safe state.

    Returns r_p = the largest k in [from_index, N] whose integrated state
    satisfies the membership residual, or None when the integrated
    trajectory violates a box anywhere (states including the terminal one,
    and controls) or no state qualifies.
    """
    X_sim = dyn.rollout_many(model, np.asarray(x_init, float)[None], np.asarray(U, float)[None])[0]
    return check_rollout(model, safe_set, X_sim, np.asarray(U, float), from_index, check_tol)


@dataclass
class ControllerConfig:
    N: int
    dt: float
    L: int
    strategy: str
    K: int
    alpha: float
    weights: CostWeights
    check_tol: float = 1e-6
    target_q_tol: float = 1e-2
    target_v_tol: float = 1e-1
    qp_tol: float = 1e-6
    qp_max_iter: int = 4000
    kkt_tol: float = 1e-6
    sqp_max_iter: int = 100
    abort_horizon: Optional[int] = None
    worker_limit: Optional[int] = None
    log_controls: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ControllerError(f"unknown strategy {self.strategy!r}")
        if not 0 <= self.L <= self.N - 1:
            raise ControllerError("L must satisfy 0 <= L <= N-1")
        if not 1 <= self.K <= self.N:
            raise ControllerError("K must satisfy 1 <= K <= N")
        if self.dt <= 0:
            raise ControllerError("dt must be positive")


@dataclass
class LoopState:
    """Mutable per-episode controller state; owned by one control thread."""

    r: int
    X_star: Optional[Array] = None
    U_star: Optional[Array] = None
    prev_violations: Optional[Array] = None
    abort_pending: bool = False
    loop_index: int = 0
    prev_duals: Optional[Array] = None


@dataclass
class EpisodeOutcome:
    kind: str  # "completed" | "failed" | "aborted"
    steps: int
    abort_success: Optional[bool] = None


@dataclass
class AbortResult:
    """Played bridge + braking trajectory of the safe task abortion."""

    success: bool
    X: Array
    U: Array
    bridge_state: Array
    solution: Solution


class Controller:
    """Owns one control loop; not shared across episodes."""

    def __init__(
        self,
        config: ControllerConfig,
        model: ModelSpec,
        safe_set: SafeSetModel,
        x_ref: Array,
    ):
        if abs(config.dt - model.dt) > 1e-12:
            raise ControllerError("controller dt must match the model dt")
        self.config = config
        self.model = model
        self.safe_set = safe_set
        self.setup = OcpSetup(
            model=model,
            safe_set=safe_set,
            weights=config.weights,
            N=config.N,
            x_ref=np.asarray(x_ref, dtype=float),
        )
        self._executor: Optional[ThreadPoolExecutor] = None

    # -- lifecycle ---------------------------------------------------------

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _pool(self) -> Optional[ThreadPoolExecutor]:
        limit = self.effective_worker_limit()
        if limit <= 1:
            return None
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=limit)
        return self._executor

    def effective_worker_limit(self) -> int:
        if self.config.worker_limit is not None:
            return max(1, self.config.worker_limit)
        import os

        cores = os.cpu_count() or 1
        return max(1, min(self.config.K, cores))

    # -- loop pieces -------------------------------------------------------

    def initial_state(self) -> LoopState:
        return LoopState(r=self.config.N)

    def target_reached(self, x: Array) -> bool:
        """First joint at its reference and the arm close to rest."""
        n = self.model.n_joints
        dq = np.asarray(x, float)[n:]
        return (
            abs(float(x[0]) - float(self.setup.x_ref[0])) < self.config.target_q_tol
            and float(np.linalg.norm(dq)) < self.config.target_v_tol
        )

    def _cold_controls(self, x: Array) -> Array:
        q = np.asarray(x, float)[: self.model.n_joints]
        tau = dyn.inverse_dynamics(self.model, q, np.zeros_like(q), np.zeros_like(q))
        return np.clip(tau, -self.model.tau_max, self.model.tau_max)

    def warm_start(self, state: LoopState, x_t: Array) -> tuple[Array, Array]:
        """Dynamics-consistent guess: shift the retained controls, or cold-start.

        The cold start holds the state with gravity compensation and then
        refines once through the unconstrained (naive) problem: linearizing
        the safe-set rows at a pure rest hold is degenerate (the braking
        bound is clamped and the velocity-norm subgradient vanishes), so the
        presolve provides a moving trajectory for them to act on.
        """
        N = self.config.N
        if state.U_star is None:
            U = np.tile(self._cold_controls(x_t), (N, 1))
            X = np.tile(np.asarray(x_t, float), (N + 1, 1))
            presolve = rti_step(
                ocp.build(OcpVariant.naive(), x_t, (X, U), self.setup),
                qp_tol=self.config.qp_tol,
                qp_max_iter=self.config.qp_max_iter,
            )
            if presolve.status == INFEASIBLE:
                return X, U
            U = presolve.U
            X = dyn.rollout(self.model, x_t, U)
            return X, U
        U = np.vstack([state.U_star[1:], state.U_star[-1:]])
        X = dyn.rollout(self.model, x_t, U)
        return X, U

    def _shift_retained(self, state: LoopState):
        state.X_star = np.vstack([state.X_star[1:], state.X_star[-1:]])
        state.U_star = np.vstack([state.U_star[1:], state.U_star[-1:]])

    def iteration(self, state: LoopState, x_t: Array) -> tuple[Array, dict]:
        """One control loop; mutates state, returns (u_apply, log record)."""
        if state.abort_pending:
            raise ControllerError("abort pending; run_safe_abort instead of iterating")
        strategy = self.config.strategy
        if strategy in PARALLEL_FAMILY:
            return self._parallel_iteration(state, x_t)
        if strategy == RECEDING:
            return self._receding_iteration(state, x_t)
        return self._naive_iteration(state, x_t)

    def _record(self, state: LoopState, x_t, chosen_p, fallback, problems, u, extra=None) -> dict:
        rec = {
            "loop": state.loop_index,
            "strategy": self.config.strategy,
            "r": int(state.r),
            "chosen_p": chosen_p,
            "fallback": bool(fallback),
            "abort_pending": bool(state.abort_pending),
            "problems": problems,
        }
        if extra:
            rec.update(extra)
        if self.config.log_controls:
            rec["x"] = [float(v) for v in np.asarray(x_t).ravel()]
            rec["u"] = [float(v) for v in np.asarray(u).ravel()]
            if state.U_star is not None:
                rec["u_star"] = [float(v) for v in state.U_star.ravel()]
        return rec

    def _parallel_iteration(self, state: LoopState, x_t: Array) -> tuple[Array, dict]:
        cfg = self.config
        N = cfg.N
        X_g, U_g = self.warm_start(state, x_t)
        lin = dyn.linearize_traj(self.model, X_g[:N], U_g)
        K_eff = N if cfg.strategy == PARALLEL else cfg.K
        steps = select_time_steps(cfg.strategy, state.r, N, K_eff, state.prev_violations)
        instances = [
            ocp.build(
                OcpVariant.hard_at(p),
                x_t,
                (X_g, U_g),
                self.setup,
                dual_guess=state.prev_duals,
                linearization=lin,
            )
            for p in steps
        ]
        request = parallel.BatchRequest(
            instances=tuple(instances), worker_limit=self.effective_worker_limit()
        )
        sols = parallel.solve_batch(
            request, qp_tol=cfg.qp_tol, qp_max_iter=cfg.qp_max_iter, executor=self._pool()
        )

        # Forward-integrate every usable solution in one lockstep batch.
        usable = [i for i, s in enumerate(sols) if s.status != INFEASIBLE]
        checks: list[Optional[CheckResult]] = [None] * len(sols)
        if usable:
            U_stack = np.stack([sols[i].U for i in usable])
            x0_stack = np.tile(np.asarray(x_t, float), (len(usable), 1))
            X_sims = dyn.rollout_many(self.model, x0_stack, U_stack)
            for pos, i in enumerate(usable):
                checks[i] = check_rollout(
                    self.model, self.safe_set, X_sims[pos], sols[i].U, state.r, cfg.check_tol
                )

        r_values = [None if checks[i] is None else checks[i].r_p for i in range(len(sols))]
        costs = [s.cost for s in sols]
        best = parallel.select_best(r_values, costs, ps=steps)

        fallback = best is None
        if fallback:
            if state.U_star is None:
                # Loop 0 with nothing usable: hold with clipped gravity torque.
                u_hold = self._cold_controls(x_t)
                state.X_star = np.tile(np.asarray(x_t, float), (N + 1, 1))
                state.U_star = np.tile(u_hold, (N, 1))
            else:
                self._shift_retained(state)
            state.r -= 1
            chosen_p = None
        else:
            sol = sols[best]
            state.X_star = sol.X
            state.U_star = sol.U
            state.prev_duals = sol.duals
            state.prev_violations = checks[best].residuals
            state.r = int(r_values[best]) - 1
            chosen_p = int(steps[best])

        if state.r == cfg.L:
            state.abort_pending = True

        u = state.U_star[0].copy()
        problems = [
            {
                "p": int(p),
                "status": sols[i].status,
                "r_p": None if r_values[i] is None else int(r_values[i]),
                "cost": None if math.isnan(sols[i].cost) else float(sols[i].cost),
                "qp_iterations": int(sols[i].qp_iterations),
                "solve_time": float(sols[i].solve_time),
            }
            for i, p in enumerate(steps)
        ]
        record = self._record(state, x_t, chosen_p, fallback, problems, u)
        state.loop_index += 1
        return u, record

    def _receding_iteration(self, state: LoopState, x_t: Array) -> tuple[Array, dict]:
        cfg = self.config
        N = cfg.N
        X_g, U_g = self.warm_start(state, x_t)
        lin = dyn.linearize_traj(self.model, X_g[:N], U_g)
        inst = ocp.build(
            OcpVariant.receding(max(state.r, 1)),
            x_t,
            (X_g, U_g),
            self.setup,
            dual_guess=state.prev_duals,
            linearization=lin,
        )
        sol = rti_step(inst, qp_tol=cfg.qp_tol, qp_max_iter=cfg.qp_max_iter)
        fallback = sol.status == INFEASIBLE
        if fallback:
            if state.U_star is None:
                u_hold = self._cold_controls(x_t)
                state.X_star = np.tile(np.asarray(x_t, float), (N + 1, 1))
                state.U_star = np.tile(u_hold, (N, 1))
            else:
                self._shift_retained(state)
        else:
            state.X_star = sol.X
            state.U_star = sol.U
            state.prev_duals = sol.duals

        check = check_solution(
            self.model, self.safe_set, state.U_star, x_t, from_index=1, check_tol=cfg.check_tol
        )
        state.prev_violations = check.residuals
        qualified = None
        if check.box_ok:
            beyond = [k for k in range(state.r + 1, N + 1) if check.residuals[k] >= 0.0]
            if beyond:
                qualified = max(beyond)
        state.r = (qualified - 1) if qualified is not None else (state.r - 1)
        if state.r == 1 + cfg.L:
            state.abort_pending = True

        u = state.U_star[0].copy()
        problems = [
            {
                "p": int(inst.variant.index),
                "status": sol.status,
                "r_p": None if qualified is None else int(qualified),
                "cost": None if math.isnan(sol.cost) else float(sol.cost),
                "qp_iterations": int(sol.qp_iterations),
                "solve_time": float(sol.solve_time),
            }
        ]
        record = self._record(state, x_t, inst.variant.index, fallback, problems, u)
        state.loop_index += 1
        return u, record

    def _naive_iteration(self, state: LoopState, x_t: Array) -> tuple[Array, dict]:
        cfg = self.config
        N = cfg.N
        X_g, U_g = self.warm_start(state, x_t)
        lin = dyn.linearize_traj(self.model, X_g[:N], U_g)
        inst = ocp.build(
            OcpVariant.naive(),
            x_t,
            (X_g, U_g),
            self.setup,
            dual_guess=state.prev_duals,
            linearization=lin,
        )
        sol = rti_step(inst, qp_tol=cfg.qp_tol, qp_max_iter=cfg.qp_max_iter)
        fallback = sol.status == INFEASIBLE
        if fallback:
            if state.U_star is None:
                state.X_star = np.tile(np.asarray(x_t, float), (N + 1, 1))
                state.U_star = np.tile(self._cold_controls(x_t), (N, 1))
            else:
                self._shift_retained(state)
        else:
            state.X_star = sol.X
            state.U_star = sol.U
            state.prev_duals = sol.duals
        u = state.U_star[0].copy()
        problems = [
            {
                "p": None,
                "status": sol.status,
                "r_p": None,
                "cost": None if math.isnan(sol.cost) else float(sol.cost),
                "qp_iterations": int(sol.qp_iterations),
                "solve_time": float(sol.solve_time),
            }
        ]
        record = self._record(state, x_t, None, fallback, problems, u)
        state.loop_index += 1
        return u, record

    # -- safe task abortion --------------------------------------------------

    def _solve_brake(self, x_from: Array) -> Solution:
        M = self.config.abort_horizon or self.config.N
        hold_u = np.tile(self._cold_controls(x_from), (M, 1))
        hold_x = np.tile(np.asarray(x_from, float), (M + 1, 1))
        inst = ocp.build(OcpVariant.safe_abort(M), x_from, (hold_x, hold_u), self.setup)
        return sqp_solve(
            inst,
            kkt_tol=self.config.kkt_tol,
            max_sqp_iter=self.config.sqp_max_iter,
            qp_max_iter=self.config.qp_max_iter,
        )

    def _played_abort(
        self, X_bridge: Array, U_bridge: Array, bridge_state: Array, sol: Solution
    ) -> AbortResult:
        if sol.status != SOLVED:
            return AbortResult(
                success=False, X=X_bridge, U=U_bridge, bridge_state=bridge_state, solution=sol
            )
        X_brake = dyn.rollout(self.model, bridge_state, sol.U)
        X_full = np.vstack([X_bridge, X_brake[1:]])
        U_full = np.vstack([U_bridge, sol.U]) if U_bridge.size else sol.U.copy()
        tol = self.config.check_tol
        half = self.model.n_joints
        ok = bool(
            np.all(X_full[:, :half] >= self.model.q_min - tol)
            and np.all(X_full[:, :half] <= self.model.q_max + tol)
            and np.all(np.abs(X_full[:, half:]) <= self.model.v_max + tol)
            and np.all(np.abs(U_full) <= self.model.tau_max + tol)
        )
        return AbortResult(success=ok, X=X_full, U=U_full, bridge_state=bridge_state, solution=sol)

    def run_safe_abort(self, state: LoopState, x_t: Array) -> AbortResult:
        """Play the certified bridge, brake to an equilibrium alongside it.

        The retained controls U*[0..L] are played (unit-A role) while the
        stop-at-equilibrium problem is solved from the bridge endpoint in a
        worker thread (unit-B role); the handshake is the future's join.
        """
        if state.U_star is None:
            raise ControllerError("no retained trajectory to bridge the abort")
        L = self.config.L
        U_bridge = np.asarray(state.U_star[: L + 1], dtype=float)
        X_bridge = dyn.rollout(self.model, x_t, U_bridge)
        bridge_state = X_bridge[-1]
        with ThreadPoolExecutor(max_workers=1) as unit_b:
            future = unit_b.submit(self._solve_brake, bridge_state)
            sol = future.result()
        return self._played_abort(X_bridge, U_bridge, bridge_state, sol)

    def solve_abort_from(self, x: Array) -> AbortResult:
        """Brake to an equilibrium directly from x (no bridge); used at the step cap."""
        x = np.asarray(x, dtype=float)
        sol = self._solve_brake(x)
        return self._played_abort(x[None], np.zeros((0, self.model.nu)), x, sol)


def audit_r_sequence(records: list[dict], N: int, L: int, strategy: str) -> list[int]:
    """Recompute the safe-horizon sequence from logged per-problem results.

    Mirrors the update rules: adopt max r_p - 1 when any problem certified a
    safe index, otherwise decrement. Used to audit logs post hoc.
    """
    r = N
    out = []
    for rec in records:
        r_ps = [p["r_p"] for p in rec["problems"] if p["r_p"] is not None]
        if strategy == RECEDING:
            r = (max(r_ps) - 1) if r_ps else (r - 1)
        elif strategy in PARALLEL_FAMILY:
            r = (max(r_ps) - 1) if r_ps else (r - 1)
        else:
            pass  # naive: no bookkeeping
        out.append(r)
    return out
