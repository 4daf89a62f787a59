"""Rigid-body dynamics of a planar n-link arm plus a linear integrator chain.

Two built-in systems share one interface:

* ``"arm"``: planar revolute chain of uniform rods (recursive Newton-Euler),
  gravity along -y, torque input.
* ``"integrator"``: one double integrator per joint, the input is the joint
  acceleration directly (unit inertia, no bias forces). Linear, so discrete
  maps and viability bounds are exact; used as the analytic oracle system.

States are flat vectors ``x = [q, dq]`` of length ``2 * n_joints``; controls
are torque vectors of length ``n_joints``. All functions are pure. The public
operations take single vectors; the ``*_many`` variants accept a leading
batch axis and are what the solver-side code calls in hot loops (both paths
run the identical elementwise arithmetic).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

Array = np.ndarray

ARM = "arm"
INTEGRATOR = "integrator"

# Fixed perturbation for central-difference Jacobians (state/control scale ~1).
FD_STEP = 1e-6


class DynamicsError(ValueError):
    """Raised on dimension mismatches or a numerically singular inertia matrix."""


def _as_vector(v, n: int, name: str) -> Array:
    out = np.asarray(v, dtype=float).reshape(-1)
    if out.size != n:
        raise DynamicsError(f"{name} has size {out.size}, expected {n}")
    return out


@dataclass(frozen=True)
class ModelSpec:
    """Physical parameters, box bounds, and the discrete time step.

    `q_min < q_max`, `v_max > 0`, `tau_max > 0` are required elementwise;
    `dt > 0`, `n_joints >= 1`, link parameters positive.
    """

    system: str
    n_joints: int
    link_lengths: Array
    link_masses: Array
    gravity: float
    q_min: Array
    q_max: Array
    v_max: Array
    tau_max: Array
    dt: float
    integrator_substeps: int = 1

    def __post_init__(self):
        if self.system not in (ARM, INTEGRATOR):
            raise DynamicsError(f"unknown system kind {self.system!r}")
        n = int(self.n_joints)
        if n < 1:
            raise DynamicsError("n_joints must be >= 1")
        object.__setattr__(self, "n_joints", n)
        for name in ("link_lengths", "link_masses", "q_min", "q_max", "v_max", "tau_max"):
            object.__setattr__(self, name, _as_vector(getattr(self, name), n, name))
        if not (np.all(self.link_lengths > 0) and np.all(self.link_masses > 0)):
            raise DynamicsError("link lengths and masses must be positive")
        if not np.all(self.q_min < self.q_max):
            raise DynamicsError("q_min < q_max must hold elementwise")
        if not (np.all(self.v_max > 0) and np.all(self.tau_max > 0)):
            raise DynamicsError("v_max and tau_max must be positive")
        if not self.dt > 0:
            raise DynamicsError("dt must be positive")
        if int(self.integrator_substeps) < 1:
            raise DynamicsError("integrator_substeps must be >= 1")
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "gravity", float(self.gravity))
        object.__setattr__(self, "integrator_substeps", int(self.integrator_substeps))

    @property
    def nx(self) -> int:
        return 2 * self.n_joints

    @property
    def nu(self) -> int:
        return self.n_joints


def pack_state(q: Array, dq: Array) -> Array:
    return np.concatenate([np.asarray(q, float).ravel(), np.asarray(dq, float).ravel()])


def split_state(x: Array, n_joints: int) -> tuple[Array, Array]:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != 2 * n_joints:
        raise DynamicsError(f"state has size {x.size}, expected {2 * n_joints}")
    return x[:n_joints], x[n_joints:]


def _rnea_many(spec: ModelSpec, q: Array, dq: Array, ddq: Array) -> Array:
    """Planar Newton-Euler torques for a (B, n) batch of joint coordinates."""
    n = spec.n_joints
    lengths = spec.link_lengths
    masses = spec.link_masses
    inertias = masses * lengths**2 / 12.0  # uniform rod about its center

    # Absolute angle/rate/acceleration of each link.
    phi = np.cumsum(q, axis=1)
    w = np.cumsum(dq, axis=1)
    a = np.cumsum(ddq, axis=1)
    rhat = np.stack([np.cos(phi), np.sin(phi)], axis=2)  # (B, n, 2)
    that = np.stack([-rhat[:, :, 1], rhat[:, :, 0]], axis=2)

    # Outward pass: linear acceleration of each link center.
    batch = q.shape[0]
    c_acc = np.empty((batch, n, 2))
    p_acc = np.zeros((batch, 2))
    for i in range(n):
        swing = a[:, i, None] * that[:, i] - (w[:, i] ** 2)[:, None] * rhat[:, i]
        c_acc[:, i] = p_acc + 0.5 * lengths[i] * swing
        p_acc = p_acc + lengths[i] * swing

    # Inward pass: force/moment balance; the joint torque is the z-moment
    # transmitted through each joint.
    g_vec = np.array([0.0, -spec.gravity])
    tau = np.empty((batch, n))
    f_next = np.zeros((batch, 2))
    n_next = np.zeros(batch)
    for i in range(n - 1, -1, -1):
        f_i = masses[i] * (c_acc[:, i] - g_vec) + f_next
        d_out = 0.5 * lengths[i] * rhat[:, i]  # outboard joint seen from the center
        # n_i = I a + n_next - cross(d_in, f_i) + cross(d_out, f_next), d_in = -d_out
        n_i = (
            inertias[i] * a[:, i]
            + n_next
            + (d_out[:, 0] * f_i[:, 1] - d_out[:, 1] * f_i[:, 0])
            + (d_out[:, 0] * f_next[:, 1] - d_out[:, 1] * f_next[:, 0])
        )
        tau[:, i] = n_i
        f_next = f_i
        n_next = n_i
    return tau


def inverse_dynamics_many(spec: ModelSpec, q: Array, dq: Array, ddq: Array) -> Array:
    if spec.system == INTEGRATOR:
        return np.array(ddq, dtype=float, copy=True)
    return _rnea_many(spec, q, dq, ddq)


def inverse_dynamics(spec: ModelSpec, q, dq, ddq) -> Array:
    """Joint torques tau = M(q) ddq + h(q, dq) via planar Newton-Euler.

    For the integrator system the map is tau = ddq.
    """
    n = spec.n_joints
    q = _as_vector(q, n, "q")
    dq = _as_vector(dq, n, "dq")
    ddq = _as_vector(ddq, n, "ddq")
    return inverse_dynamics_many(spec, q[None], dq[None], ddq[None])[0]


def _forward_dynamics_many(spec: ModelSpec, q: Array, dq: Array, tau: Array) -> Array:
    """ddq = M(q)^-1 (tau - h); M assembled from unit-acceleration torque calls."""
    if spec.system == INTEGRATOR:
        return np.array(tau, dtype=float, copy=True)
    batch, n = q.shape
    # One stacked call evaluates the bias (ddq = 0) and the n unit-acceleration
    # columns for every batch element.
    reps = n + 1
    ddq_probe = np.zeros((reps, batch, n))
    for j in range(n):
        ddq_probe[j + 1, :, j] = 1.0
    q_rep = np.broadcast_to(q, (reps, batch, n)).reshape(reps * batch, n)
    dq_rep = np.broadcast_to(dq, (reps, batch, n)).reshape(reps * batch, n)
    torques = _rnea_many(spec, q_rep, dq_rep, ddq_probe.reshape(reps * batch, n))
    torques = torques.reshape(reps, batch, n)
    bias = torques[0]
    M = np.transpose(torques[1:] - bias, (1, 2, 0))  # (batch, n, n), column j per probe
    try:
        ddq = np.linalg.solve(M, (tau - bias)[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError as exc:
        raise DynamicsError("inertia matrix is numerically singular") from exc
    if not np.all(np.isfinite(ddq)):
        raise DynamicsError("inertia matrix is numerically singular")
    return ddq


def forward_dynamics(spec: ModelSpec, q, dq, tau) -> Array:
    """Joint accelerations ddq = M(q)^-1 (tau - h(q, dq))."""
    n = spec.n_joints
    q = _as_vector(q, n, "q")
    dq = _as_vector(dq, n, "dq")
    tau = _as_vector(tau, n, "tau")
    return _forward_dynamics_many(spec, q[None], dq[None], tau[None])[0]


def mass_matrix(spec: ModelSpec, q) -> Array:
    """Joint-space inertia M(q), assembled column-wise from inverse_dynamics."""
    n = spec.n_joints
    if spec.system == INTEGRATOR:
        return np.eye(n)
    zero = np.zeros(n)
    bias = inverse_dynamics(spec, q, zero, zero)
    M = np.empty((n, n))
    for j in range(n):
        unit = np.zeros(n)
        unit[j] = 1.0
        M[:, j] = inverse_dynamics(spec, q, zero, unit) - bias
    return M


def _xdot_many(spec: ModelSpec, x: Array, u: Array) -> Array:
    n = spec.n_joints
    if spec.system == INTEGRATOR:
        return np.concatenate([x[:, n:], u], axis=1)
    ddq = _forward_dynamics_many(spec, x[:, :n], x[:, n:], u)
    return np.concatenate([x[:, n:], ddq], axis=1)


def step_many(spec: ModelSpec, x: Array, u: Array) -> Array:
    """RK4 over dt (zero-order-hold control) for a (B, nx) batch of states."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    h = spec.dt / spec.integrator_substeps
    for _ in range(spec.integrator_substeps):
        k1 = _xdot_many(spec, x, u)
        k2 = _xdot_many(spec, x + 0.5 * h * k1, u)
        k3 = _xdot_many(spec, x + 0.5 * h * k2, u)
        k4 = _xdot_many(spec, x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def step(spec: ModelSpec, x, u) -> Array:
    """One discrete step: explicit RK4 over dt with zero-order-hold control."""
    x = _as_vector(x, spec.nx, "x")
    u = _as_vector(u, spec.nu, "u")
    return step_many(spec, x[None], u[None])[0]


def rollout(spec: ModelSpec, x0, U) -> Array:
    """Integrate a control sequence; returns the (len(U)+1, nx) state trajectory."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    X = np.empty((U.shape[0] + 1, spec.nx))
    X[0] = _as_vector(x0, spec.nx, "x0")
    for i in range(U.shape[0]):
        X[i + 1] = step_many(spec, X[i][None], U[i][None])[0]
    return X


def rollout_many(spec: ModelSpec, x0: Array, U: Array) -> Array:
    """Integrate B control sequences in lockstep.

    x0: (B, nx), U: (B, N, nu) -> states (B, N+1, nx).
    """
    x0 = np.asarray(x0, dtype=float)
    U = np.asarray(U, dtype=float)
    batch, horizon = U.shape[0], U.shape[1]
    X = np.empty((batch, horizon + 1, spec.nx))
    X[:, 0] = x0
    for i in range(horizon):
        X[:, i + 1] = step_many(spec, X[:, i], U[:, i])
    return X


def linearize(spec: ModelSpec, x, u) -> tuple[Array, Array]:
    """Central-difference Jacobians (A, B) of step() at (x, u)."""
    x = _as_vector(x, spec.nx, "x")
    u = _as_vector(u, spec.nu, "u")
    A, B, _ = linearize_traj(spec, x[None], u[None])
    return A[0], B[0]


def linearize_traj(spec: ModelSpec, X: Array, U: Array) -> tuple[Array, Array, Array]:
    """Stage Jacobians and nominal next states along a trajectory, in one sweep.

    X: (N, nx), U: (N, nu) -> A (N, nx, nx), B (N, nx, nu), F (N, nx) with
    F[i] = step(X[i], U[i]). All 2*(nx+nu)+1 evaluation points per stage are
    integrated as a single batch.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    n_stage = X.shape[0]
    nx, nu = spec.nx, spec.nu
    pts = 2 * (nx + nu) + 1

    xs = np.repeat(X[:, None, :], pts, axis=1)  # (N, pts, nx)
    us = np.repeat(U[:, None, :], pts, axis=1)
    for j in range(nx):
        xs[:, 2 * j, j] += FD_STEP
        xs[:, 2 * j + 1, j] -= FD_STEP
    for j in range(nu):
        us[:, 2 * nx + 2 * j, j] += FD_STEP
        us[:, 2 * nx + 2 * j + 1, j] -= FD_STEP

    out = step_many(spec, xs.reshape(-1, nx), us.reshape(-1, nu)).reshape(n_stage, pts, nx)
    A = np.empty((n_stage, nx, nx))
    Bmat = np.empty((n_stage, nx, nu))
    for j in range(nx):
        A[:, :, j] = (out[:, 2 * j] - out[:, 2 * j + 1]) / (2.0 * FD_STEP)
    for j in range(nu):
        Bmat[:, :, j] = (out[:, 2 * nx + 2 * j] - out[:, 2 * nx + 2 * j + 1]) / (2.0 * FD_STEP)
    return A, Bmat, out[:, -1]


@dataclass(frozen=True)
class ViolationReport:
    """Signed residuals of the state/control boxes; >= -tol everywhere means admissible."""

    residuals: dict[str, Array]
    tol: float

    @property
    def min_residual(self) -> float:
        return min(float(np.min(v)) for v in self.residuals.values())

    @property
    def admissible(self) -> bool:
        return self.min_residual >= -self.tol


def is_admissible(spec: ModelSpec, x, u=None, tol: float = 1e-6) -> ViolationReport:
    """Residuals of q/dq boxes (and the torque box when u is given)."""
    q, dq = split_state(np.asarray(x, dtype=float), spec.n_joints)
    residuals = {
        "q_lower": q - spec.q_min,
        "q_upper": spec.q_max - q,
        "dq_lower": dq + spec.v_max,
        "dq_upper": spec.v_max - dq,
    }
    if u is not None:
        u = _as_vector(u, spec.nu, "u")
        residuals["tau_lower"] = u + spec.tau_max
        residuals["tau_upper"] = spec.tau_max - u
    return ViolationReport(residuals=residuals, tol=tol)


def equilibrium_control(spec: ModelSpec, q) -> Optional[Array]:
    """Gravity-compensating torque at rest, or None if it exceeds the torque box."""
    n = spec.n_joints
    zero = np.zeros(n)
    tau = inverse_dynamics(spec, q, zero, zero)
    if np.all(np.abs(tau) <= spec.tau_max):
        return tau
    return None
