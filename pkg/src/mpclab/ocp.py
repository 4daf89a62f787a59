"""Transcription of the MPC problem variants into multiple-shooting QP data.

Four variants share one decision-variable layout (stagewise [x_i, u_i]
interleaving, terminal state, then slack pairs):

* ``naive``: dynamics + path boxes only.
* ``receding(r)``: soft safe-set membership at step r (weight w_r) and at the
  terminal step (weight w_s), both as L1-penalized slacks split into
  nonnegative pairs.
* ``hard_at(p)``: one hard safe-set membership row at step p.
* ``safe_abort(M)``: equality x_M = x_{M-1} (stop at an equilibrium); the
  cost swaps to sum ||u||^2 + ||dq||^2, since any cost works for feasibility.

Path boxes apply to x_1..x_{N-1} and all controls; x_0 is pinned by the
initial-condition equality. The integrated-trajectory check (controller
module) additionally boxes the terminal state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import dynamics as dyn
from .dynamics import Array, ModelSpec
from .qp import QpData
from .safesets import SafeSetModel

NAIVE = "naive"
RECEDING = "receding"
HARD_AT = "hard_at"
SAFE_ABORT = "safe_abort"


class OcpError(ValueError):
    """Raised for inconsistent variant indices or guess dimensions."""


@dataclass(frozen=True)
class CostWeights:
    """Diagonal quadratic weights plus L1 slack penalties (w_r >= w_s)."""

    Q: Array
    R: Array
    w_s: float = 1e2
    w_r: float = 1e4

    def __post_init__(self):
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float).reshape(-1))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(-1))
        if np.any(self.Q < 0) or np.any(self.R < 0) or self.w_s < 0 or self.w_r < 0:
            raise OcpError("cost weights must be nonnegative")
        if self.w_r < self.w_s:
            raise OcpError("w_r must dominate w_s to mimic a hard constraint")


@dataclass(frozen=True)
class OcpVariant:
    kind: str
    index: Optional[int] = None

    @staticmethod
    def naive() -> "OcpVariant":
        return OcpVariant(NAIVE)

    @staticmethod
    def receding(r: int) -> "OcpVariant":
        return OcpVariant(RECEDING, int(r))

    @staticmethod
    def hard_at(p: int) -> "OcpVariant":
        return OcpVariant(HARD_AT, int(p))

    @staticmethod
    def safe_abort(steps: int) -> "OcpVariant":
        return OcpVariant(SAFE_ABORT, int(steps))


@dataclass(frozen=True)
class OcpSetup:
    """Shared problem data: model, safe set, weights, horizon, reference."""

    model: ModelSpec
    safe_set: SafeSetModel
    weights: CostWeights
    N: int
    x_ref: Array

    def __post_init__(self):
        object.__setattr__(self, "x_ref", np.asarray(self.x_ref, dtype=float).reshape(-1))
        if self.N < 1:
            raise OcpError("horizon must be >= 1")
        if self.x_ref.size != self.model.nx:
            raise OcpError("x_ref dimension does not match the model")


@dataclass
class ProblemInstance:
    """One fully transcribed OCP with its guess; treat as immutable once built."""

    variant: OcpVariant
    N: int
    x_init: Array
    x_ref: Array
    weights: CostWeights
    model: ModelSpec
    safe_set: SafeSetModel
    X_guess: Array
    U_guess: Array
    dual_guess: Optional[Array] = None
    # Optional shared stage linearization at the guess: (A, B, F) from
    # dynamics.linearize_traj. Populated by callers that solve many instances
    # from one guess so the sweep runs once.
    linearization: Optional[tuple[Array, Array, Array]] = None


def build(
    variant: OcpVariant,
    x_init,
    guess: tuple[Array, Array],
    setup: OcpSetup,
    dual_guess: Optional[Array] = None,
    linearization: Optional[tuple[Array, Array, Array]] = None,
) -> ProblemInstance:
    """Validate indices and shapes and assemble a ProblemInstance."""
    N = setup.N
    weights = setup.weights
    x_ref = setup.x_ref
    if variant.kind in (RECEDING, HARD_AT):
        if variant.index is None or not 1 <= variant.index <= N:
            raise OcpError(f"{variant.kind} index {variant.index} outside [1, {N}]")
    elif variant.kind == SAFE_ABORT:
        if variant.index is None or variant.index < 1:
            raise OcpError("abort horizon must be >= 1")
        N = variant.index
        nx, nu = setup.model.nx, setup.model.nu
        weights = CostWeights(
            Q=np.concatenate([np.zeros(nx // 2), np.ones(nx - nx // 2)]),
            R=np.ones(nu),
            w_s=0.0,
            w_r=0.0,
        )
        x_ref = np.zeros(nx)
    elif variant.kind != NAIVE:
        raise OcpError(f"unknown variant kind {variant.kind!r}")

    X_guess = np.asarray(guess[0], dtype=float)
    U_guess = np.asarray(guess[1], dtype=float)
    if X_guess.shape != (N + 1, setup.model.nx):
        raise OcpError(f"X guess shape {X_guess.shape}, expected {(N + 1, setup.model.nx)}")
    if U_guess.shape != (N, setup.model.nu):
        raise OcpError(f"U guess shape {U_guess.shape}, expected {(N, setup.model.nu)}")
    x_init = np.asarray(x_init, dtype=float).reshape(-1)
    if x_init.size != setup.model.nx or not np.all(np.isfinite(x_init)):
        raise OcpError("x_init must be a finite state vector")

    return ProblemInstance(
        variant=variant,
        N=N,
        x_init=x_init,
        x_ref=x_ref,
        weights=weights,
        model=setup.model,
        safe_set=setup.safe_set,
        X_guess=X_guess,
        U_guess=U_guess,
        dual_guess=dual_guess,
        linearization=linearization,
    )


@dataclass(frozen=True)
class QpLayout:
    """Index bookkeeping for the stacked decision vector and constraint rows."""

    N: int
    nx: int
    nu: int
    soft_steps: tuple[tuple[int, float], ...]  # (state index, penalty weight)
    hard_step: Optional[int]
    abort_equality: bool

    @property
    def stage(self) -> int:
        return self.nx + self.nu

    @property
    def n_soft(self) -> int:
        return len(self.soft_steps)

    @property
    def nvar(self) -> int:
        return self.N * self.stage + self.nx + 2 * self.n_soft

    @property
    def nrow(self) -> int:
        extra = self.n_soft + (1 if self.hard_step is not None else 0)
        if self.abort_equality:
            extra += self.nx
        return self.nx * (2 * self.N) + self.N * self.nu + extra + 2 * self.n_soft

    def x_slice(self, i: int) -> slice:
        base = i * self.stage if i < self.N else self.N * self.stage
        return slice(base, base + self.nx)

    def u_slice(self, i: int) -> slice:
        base = i * self.stage + self.nx
        return slice(base, base + self.nu)

    def slack_indices(self, k: int) -> tuple[int, int]:
        base = self.N * self.stage + self.nx + 2 * k
        return base, base + 1

    def unpack(self, z: Array) -> tuple[Array, Array, Array]:
        """Split a stacked primal vector into (X, U, signed slack values)."""
        X = np.empty((self.N + 1, self.nx))
        U = np.empty((self.N, self.nu))
        for i in range(self.N):
            X[i] = z[self.x_slice(i)]
            U[i] = z[self.u_slice(i)]
        X[self.N] = z[self.x_slice(self.N)]
        slacks = np.empty(self.n_soft)
        for k in range(self.n_soft):
            pos, neg = self.slack_indices(k)
            slacks[k] = z[pos] - z[neg]
        return X, U, slacks

    def pack(self, X: Array, U: Array, slacks: Optional[Array] = None) -> Array:
        z = np.zeros(self.nvar)
        for i in range(self.N):
            z[self.x_slice(i)] = X[i]
            z[self.u_slice(i)] = U[i]
        z[self.x_slice(self.N)] = X[self.N]
        if slacks is not None:
            for k, val in enumerate(slacks):
                pos, neg = self.slack_indices(k)
                z[pos] = max(val, 0.0)
                z[neg] = max(-val, 0.0)
        return z


def layout_for(instance: ProblemInstance) -> QpLayout:
    kind = instance.variant.kind
    soft: tuple[tuple[int, float], ...] = ()
    hard = None
    abort = False
    if kind == RECEDING:
        soft = (
            (instance.variant.index, instance.weights.w_r),
            (instance.N, instance.weights.w_s),
        )
    elif kind == HARD_AT:
        hard = instance.variant.index
    elif kind == SAFE_ABORT:
        abort = True
    return QpLayout(
        N=instance.N,
        nx=instance.model.nx,
        nu=instance.model.nu,
        soft_steps=soft,
        hard_step=hard,
        abort_equality=abort,
    )


def assemble_qp(instance: ProblemInstance, X_lin: Array, U_lin: Array) -> QpData:
    """Gauss-Newton QP at the linearization point.

    The quadratic cost is exact; dynamics and safe-set rows are first-order.
    Uses the instance's precomputed stage linearization when it matches the
    requested point (identity check against the guess), otherwise sweeps anew.
    """
    layout = layout_for(instance)
    N, nx, nu = layout.N, layout.nx, layout.nu
    model = instance.model

    X_lin = np.asarray(X_lin, dtype=float)
    U_lin = np.asarray(U_lin, dtype=float)
    if X_lin.shape != (N + 1, nx) or U_lin.shape != (N, nu):
        raise OcpError("linearization point dimensions do not match the instance")

    if instance.linearization is not None and X_lin is instance.X_guess and U_lin is instance.U_guess:
        A_stages, B_stages, F_stages = instance.linearization
    else:
        A_stages, B_stages, F_stages = dyn.linearize_traj(model, X_lin[:N], U_lin)

    # Quadratic cost: 0.5 z' P z + q' z with P = 2*diag(weights).
    p_diag = np.zeros(layout.nvar)
    q_vec = np.zeros(layout.nvar)
    for i in range(N + 1):
        sl = layout.x_slice(i)
        p_diag[sl] = 2.0 * instance.weights.Q
        q_vec[sl] = -2.0 * instance.weights.Q * instance.x_ref
    for i in range(N):
        p_diag[layout.u_slice(i)] = 2.0 * instance.weights.R
    for k, (_, weight) in enumerate(layout.soft_steps):
        pos, neg = layout.slack_indices(k)
        q_vec[pos] = weight
        q_vec[neg] = weight

    A = np.zeros((layout.nrow, layout.nvar))
    lo = np.empty(layout.nrow)
    hi = np.empty(layout.nrow)
    row = 0

    # Initial condition x_0 = x_init.
    A[row : row + nx, layout.x_slice(0)] = np.eye(nx)
    lo[row : row + nx] = instance.x_init
    hi[row : row + nx] = instance.x_init
    row += nx

    # Linearized dynamics: x_{i+1} - A_i x_i - B_i u_i = f_i - A_i xbar - B_i ubar.
    for i in range(N):
        A[row : row + nx, layout.x_slice(i)] = -A_stages[i]
        A[row : row + nx, layout.u_slice(i)] = -B_stages[i]
        A[row : row + nx, layout.x_slice(i + 1)] = np.eye(nx)
        rhs = F_stages[i] - A_stages[i] @ X_lin[i] - B_stages[i] @ U_lin[i]
        lo[row : row + nx] = rhs
        hi[row : row + nx] = rhs
        row += nx

    # State boxes on interior shooting nodes.
    half = nx // 2
    for i in range(1, N):
        A[row : row + nx, layout.x_slice(i)] = np.eye(nx)
        lo[row : row + half] = model.q_min
        hi[row : row + half] = model.q_max
        lo[row + half : row + nx] = -model.v_max
        hi[row + half : row + nx] = model.v_max
        row += nx

    # Control boxes.
    for i in range(N):
        A[row : row + nu, layout.u_slice(i)] = np.eye(nu)
        lo[row : row + nu] = -model.tau_max
        hi[row : row + nu] = model.tau_max
        row += nu

    # Safe-set membership rows, linearized: g(xbar) + grad'(x - xbar) [+ s] >= 0.
    def membership_row(step: int, slack_pair: Optional[int]):
        nonlocal row
        res = instance.safe_set.membership_residual(X_lin[step])
        A[row, layout.x_slice(step)] = res.gradient
        if slack_pair is not None:
            pos, neg = layout.slack_indices(slack_pair)
            A[row, pos] = 1.0
            A[row, neg] = -1.0
        lo[row] = float(res.gradient @ X_lin[step]) - res.value
        hi[row] = np.inf
        row += 1

    for k, (step, _) in enumerate(layout.soft_steps):
        membership_row(step, k)
    if layout.hard_step is not None:
        membership_row(layout.hard_step, None)

    # Stop-at-equilibrium terminal equality x_N = x_{N-1}.
    if layout.abort_equality:
        A[row : row + nx, layout.x_slice(N)] = np.eye(nx)
        A[row : row + nx, layout.x_slice(N - 1)] = -np.eye(nx)
        lo[row : row + nx] = 0.0
        hi[row : row + nx] = 0.0
        row += nx

    # Slack nonnegativity.
    for k in range(layout.n_soft):
        for idx in layout.slack_indices(k):
            A[row, idx] = 1.0
            lo[row] = 0.0
            hi[row] = np.inf
            row += 1

    assert row == layout.nrow
    return QpData(P=sp.diags(p_diag).tocsc(), q=q_vec, A=sp.csc_matrix(A), l=lo, u=hi)


def soft_violations(instance: ProblemInstance, X: Array) -> Array:
    """Exact membership violations max(0, -g(x_k)) at the soft-constrained steps."""
    layout = layout_for(instance)
    out = np.zeros(layout.n_soft)
    for k, (step, _) in enumerate(layout.soft_steps):
        out[k] = max(0.0, -instance.safe_set.membership_residual(X[step]).value)
    return out


def eval_cost(instance: ProblemInstance, X: Array, U: Array) -> float:
    """Quadratic tracking cost plus exact L1 penalties of the softened rows."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if X.shape != (instance.N + 1, instance.model.nx) or U.shape != (instance.N, instance.model.nu):
        raise OcpError("trajectory dimensions do not match the instance")
    dx = X - instance.x_ref
    cost = float(np.sum(dx**2 * instance.weights.Q)) + float(np.sum(U**2 * instance.weights.R))
    layout = layout_for(instance)
    viol = soft_violations(instance, X)
    for k, (_, weight) in enumerate(layout.soft_steps):
        cost += weight * viol[k]
    return cost
