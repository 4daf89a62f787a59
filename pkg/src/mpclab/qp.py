"""Embedded convex QP solver: operator splitting with over-relaxation.

Solves

    minimize    0.5 x' P x + q' x
    subject to  l <= A x <= u

with an ADMM scheme on the quasi-definite KKT system: fixed penalty
rho = 0.1 (boosted 1000x on equality rows), over-relaxation 1.6, and a
diagonal Ruiz equilibration pass up front. The KKT matrix is factored once
per solve with a sparse LU. Once the iterates settle, an active-set polish
solves the reduced KKT system exactly and is accepted only when the true
(unscaled) residuals drop below tolerance, which is how tight tolerances are
reached despite the fixed penalty. Primal infeasibility is detected from a
divergence certificate on the dual iterates. Everything is deterministic:
fixed iteration schedule, no time-dependent branching.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

Array = np.ndarray

SOLVED = "solved"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

RHO = 0.1
RHO_EQ_SCALE = 1e3
SIGMA = 1e-6
RELAXATION = 1.6
RUIZ_ITERS = 10
CHECK_EVERY = 10
POLISH_EVERY = 50
POLISH_DELTA = 1e-7
EPS_INFEAS = 1e-6
MIN_SCALING = 1e-4
MAX_SCALING = 1e4


class QpError(ValueError):
    """Raised for structurally invalid QP data (e.g. an indefinite Hessian)."""


@dataclass
class QpData:
    """Sparse QP in box-row form; P must be symmetric positive semidefinite."""

    P: sp.csc_matrix
    q: Array
    A: sp.csc_matrix
    l: Array
    u: Array

    def __post_init__(self):
        self.P = sp.csc_matrix(self.P)
        self.A = sp.csc_matrix(self.A)
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        self.l = np.asarray(self.l, dtype=float).reshape(-1)
        self.u = np.asarray(self.u, dtype=float).reshape(-1)
        n = self.P.shape[0]
        m = self.A.shape[0]
        if self.P.shape[1] != n or self.q.size != n or self.A.shape[1] != n:
            raise QpError("QP dimensions are inconsistent")
        if self.l.size != m or self.u.size != m:
            raise QpError("bound dimensions do not match the constraint rows")
        if np.any(self.l > self.u):
            raise QpError("lower bound exceeds upper bound on some row")

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]


@dataclass
class QpResult:
    x: Array
    y: Array
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool = False


def _check_psd_structure(P: sp.csc_matrix) -> None:
    # Necessary conditions only; a construction bug (negative curvature on the
    # diagonal, asymmetry) is rejected, full spectra are not computed.
    if P.nnz:
        asym = abs(P - P.T)
        if asym.nnz and asym.max() > 1e-9 * max(1.0, abs(P).max()):
            raise QpError("Hessian is not symmetric")
    if np.any(P.diagonal() < -1e-12):
        raise QpError("Hessian has negative diagonal entries; not PSD")


def _equality_rows(qp: QpData) -> Array:
    return np.isfinite(qp.l) & np.isfinite(qp.u) & (np.abs(qp.u - qp.l) <= 1e-12)


def _ruiz_equilibrate(qp: QpData) -> tuple[Array, Array]:
    """Diagonal scaling of the KKT matrix; returns (D, E) column/row scalings."""
    n, m = qp.n, qp.m
    d = np.ones(n)
    e = np.ones(m)
    P, A = qp.P, qp.A
    for _ in range(RUIZ_ITERS):
        Ps = sp.diags(d) @ P @ sp.diags(d)
        As = sp.diags(e) @ A @ sp.diags(d)
        col_p = np.abs(Ps).max(axis=0).toarray().ravel() if Ps.nnz else np.zeros(n)
        col_a = np.abs(As).max(axis=0).toarray().ravel() if As.nnz else np.zeros(n)
        col = np.maximum(col_p, col_a)
        row_a = np.abs(As).max(axis=1).toarray().ravel() if As.nnz else np.zeros(m)
        with np.errstate(divide="ignore"):
            delta_d = np.where(col > 0, 1.0 / np.sqrt(col), 1.0)
            delta_e = np.where(row_a > 0, 1.0 / np.sqrt(row_a), 1.0)
        d = np.clip(d * delta_d, MIN_SCALING, MAX_SCALING)
        e = np.clip(e * delta_e, MIN_SCALING, MAX_SCALING)
    return d, e


def _unscaled_residuals(qp: QpData, x: Array, y: Array) -> tuple[float, float]:
    ax = qp.A @ x
    viol = np.maximum(qp.l - ax, 0.0)
    viol = np.maximum(viol, ax - qp.u)
    r_prim = float(np.max(viol)) if viol.size else 0.0
    r_dual = float(np.max(np.abs(qp.P @ x + qp.q + qp.A.T @ y)))
    return r_prim, r_dual


def _try_polish(qp: QpData, y: Array, tol: float) -> Optional[tuple[Array, Array, float, float]]:
    """Solve the KKT system of the active set implied by the dual signs.

    Returns (x, y, r_prim, r_dual) only when the polished point truly
    satisfies the optimality conditions at tolerance; None otherwise.
    """
    eq = _equality_rows(qp)
    # Ignore numerically dust-sized duals: they mark rows the iterates merely
    # brushed, not genuinely active constraints.
    thresh = 1e-9 * max(1.0, float(np.max(np.abs(y))) if y.size else 0.0)
    low = (y < -thresh) & ~eq & np.isfinite(qp.l)
    up = (y > thresh) & ~eq & np.isfinite(qp.u)
    rows = np.flatnonzero(eq | low | up)
    n = qp.n
    m_act = rows.size
    if m_act:
        A_act = qp.A[rows]
        b = np.where(up, qp.u, qp.l)[rows]
        reg = sp.bmat(
            [
                [qp.P + POLISH_DELTA * sp.eye(n), A_act.T],
                [A_act, -POLISH_DELTA * sp.eye(m_act)],
            ],
            format="csc",
        )
        exact = sp.bmat(
            [[qp.P, A_act.T], [A_act, sp.csc_matrix((m_act, m_act))]],
            format="csc",
        )
        rhs = np.concatenate([-qp.q, b])
    else:
        reg = (qp.P + POLISH_DELTA * sp.eye(n)).tocsc()
        exact = qp.P.tocsc()
        rhs = -qp.q
    try:
        lu = spla.splu(reg)
        sol = lu.solve(rhs)
        for _ in range(3):  # iterative refinement against the unregularized KKT
            sol = sol + lu.solve(rhs - exact @ sol)
    except (RuntimeError, ValueError):
        return None
    if not np.all(np.isfinite(sol)):
        return None
    x_new = sol[:n]
    y_new = np.zeros(qp.m)
    y_new[rows] = sol[n:]
    if np.any(y_new[low] > tol) or np.any(y_new[up] < -tol):
        return None  # dual sign violated: wrong active set
    r_prim, r_dual = _unscaled_residuals(qp, x_new, y_new)
    if r_prim < tol and r_dual < tol:
        return x_new, y_new, r_prim, r_dual
    return None


def solve_qp(
    qp: QpData,
    tol: float = 1e-6,
    max_iter: int = 4000,
    x0: Optional[Array] = None,
    y0: Optional[Array] = None,
) -> QpResult:
    """ADMM solve; returns the best iterate with status solved/max_iter/infeasible."""
    _check_psd_structure(qp.P)
    n, m = qp.n, qp.m
    if m == 0:
        raise QpError("solve_qp requires at least one constraint row")

    d, e = _ruiz_equilibrate(qp)
    D = sp.diags(d)
    E = sp.diags(e)
    P = D @ qp.P @ D
    q = d * qp.q
    A = E @ qp.A @ D
    lo = e * qp.l
    hi = e * qp.u

    rho = np.where(_equality_rows(qp), RHO * RHO_EQ_SCALE, RHO)
    rho_inv = 1.0 / rho

    kkt = sp.vstack(
        [
            sp.hstack([P + SIGMA * sp.eye(n), A.T]),
            sp.hstack([A, -sp.diags(rho_inv)]),
        ]
    ).tocsc()
    lu = spla.splu(kkt)

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / d
    y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float) / e
    z = A @ x

    rhs = np.empty(n + m)
    status = MAX_ITER
    iterations = max_iter
    r_prim = np.inf
    r_dual = np.inf
    polished = False

    for k in range(1, max_iter + 1):
        rhs[:n] = SIGMA * x - q
        rhs[n:] = z - rho_inv * y
        sol = lu.solve(rhs)
        x_tilde = sol[:n]
        z_tilde = z + rho_inv * (sol[n:] - y)

        x = RELAXATION * x_tilde + (1.0 - RELAXATION) * x
        z_relaxed = RELAXATION * z_tilde + (1.0 - RELAXATION) * z
        z_new = np.clip(z_relaxed + rho_inv * y, lo, hi)
        y_new = y + rho * (z_relaxed - z_new)
        delta_y = y_new - y
        y = y_new
        z = z_new

        last = k == max_iter
        if k % CHECK_EVERY == 0 or last:
            ax = A @ x
            r_prim = float(np.max(np.abs((ax - z) / e))) if m else 0.0
            r_dual = float(np.max(np.abs(d * (P @ x + q + A.T @ y))))
            if r_prim < tol and r_dual < tol:
                status = SOLVED
                iterations = k
                break
            if _primal_infeasible(qp, delta_y * e):
                status = INFEASIBLE
                iterations = k
                break
        if k % POLISH_EVERY == 0 or last:
            attempt = _try_polish(qp, e * y, tol)
            if attempt is not None:
                x_pol, y_pol, r_prim, r_dual = attempt
                return QpResult(
                    x=x_pol,
                    y=y_pol,
                    status=SOLVED,
                    iterations=k,
                    primal_residual=r_prim,
                    dual_residual=r_dual,
                    polished=True,
                )

    x_out = d * x
    y_out = e * y
    return QpResult(
        x=x_out,
        y=y_out,
        status=status,
        iterations=iterations,
        primal_residual=r_prim,
        dual_residual=r_dual,
        polished=polished,
    )


def _primal_infeasible(qp: QpData, dy: Array) -> bool:
    """OSQP-style certificate: dy with A'dy ~ 0 and support cost < 0."""
    norm = float(np.max(np.abs(dy))) if dy.size else 0.0
    if norm <= 1e-14:
        return False
    if float(np.max(np.abs(qp.A.T @ dy))) > EPS_INFEAS * norm:
        return False
    pos = np.maximum(dy, 0.0)
    neg = np.minimum(dy, 0.0)
    # inf * 0 guards: rows with an infinite bound only count where dy pushes on them.
    with np.errstate(invalid="ignore"):
        sup = np.sum(np.where(pos > 0, qp.u * pos, 0.0)) + np.sum(np.where(neg < 0, qp.l * neg, 0.0))
    return bool(sup < -EPS_INFEAS * norm)
