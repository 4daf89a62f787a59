"""Conservative safe-set models: phi evaluators and the membership residual.

Membership in the safe set is the scalar condition

    (1 - alpha) * phi(x) - ||dq||_2 >= 0

where phi(x) upper-bounds the admissible joint velocity norm and
alpha in [0, 1] is a safety margin. Three backends are provided:

* ``AnalyticBraking``: per-joint braking bound sqrt(2 a d) to the nearest
  position limit, clamped at v_max; the exact viability boundary for a
  double integrator under an acceleration bound, a conservative heuristic
  for the arm (per-joint a from tau_max over an inertia-diagonal upper bound).
* ``MlpPhi``: a small feed-forward network loaded from a JSON weights file,
  with a nonnegative output transform.
* ``TrivialZeroVelocity``: phi = 0, membership only at rest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import ARM, Array, ModelSpec

ACTIVATIONS = ("tanh", "relu", "linear")
OUTPUT_TRANSFORMS = ("softplus", "abs")


class SafeSetError(ValueError):
    """Raised for malformed weights files or dimension mismatches."""


@dataclass(frozen=True)
class SafeResidual:
    """Value and state-gradient of the membership constraint; member iff value >= 0."""

    value: float
    gradient: Array


class SafeSetModel:
    """Base: evaluation of phi, its gradient, and the membership residual."""

    alpha: float

    def __init__(self, alpha: float):
        alpha = float(alpha)
        if not 0.0 <= alpha <= 1.0:
            raise SafeSetError(f"alpha must be in [0, 1], got {alpha}")
        self.alpha = alpha

    def phi(self, x) -> float:
        raise NotImplementedError

    def phi_gradient(self, x) -> Array:
        raise NotImplementedError

    def membership_residual(self, x) -> SafeResidual:
        """(1 - alpha) phi(x) - ||dq||, with the zero subgradient of ||dq|| at rest."""
        x = np.asarray(x, dtype=float).reshape(-1)
        n = x.size // 2
        dq = x[n:]
        speed = float(np.linalg.norm(dq))
        value = (1.0 - self.alpha) * self.phi(x) - speed
        grad = (1.0 - self.alpha) * self.phi_gradient(x)
        if speed > 0.0:
            grad = grad.copy()
            grad[n:] -= dq / speed
        return SafeResidual(value=value, gradient=grad)


class TrivialZeroVelocity(SafeSetModel):
    """phi = 0 everywhere; only rest states are members."""

    def __init__(self, alpha: float, n_joints: int):
        super().__init__(alpha)
        self.n_joints = int(n_joints)

    def phi(self, x) -> float:
        return 0.0

    def phi_gradient(self, x) -> Array:
        return np.zeros(2 * self.n_joints)


class AnalyticBraking(SafeSetModel):
    """Braking bound min_j min(sqrt(2 a_j d_j), v_max_j) with d_j the distance
    to the nearest position limit; phi = 0 outside the position box."""

    def __init__(self, alpha: float, q_min, q_max, a_max, v_max):
        super().__init__(alpha)
        self.q_min = np.asarray(q_min, dtype=float).reshape(-1)
        self.q_max = np.asarray(q_max, dtype=float).reshape(-1)
        self.a_max = np.asarray(a_max, dtype=float).reshape(-1)
        self.v_max = np.asarray(v_max, dtype=float).reshape(-1)
        n = self.q_min.size
        if not (self.q_max.size == n and self.a_max.size == n and self.v_max.size == n):
            raise SafeSetError("braking bound parameter sizes disagree")
        if not (np.all(self.a_max > 0) and np.all(self.v_max > 0)):
            raise SafeSetError("a_max and v_max must be positive")
        self.n_joints = n

    def _joint_caps(self, q: Array) -> tuple[Array, Array]:
        dist_lo = q - self.q_min
        dist_hi = self.q_max - q
        dist = np.minimum(dist_lo, dist_hi)
        caps = np.minimum(np.sqrt(2.0 * self.a_max * np.maximum(dist, 0.0)), self.v_max)
        return dist, caps

    def phi(self, x) -> float:
        x = np.asarray(x, dtype=float).reshape(-1)
        q = x[: self.n_joints]
        dist, caps = self._joint_caps(q)
        if np.any(dist < 0.0):
            return 0.0
        return float(np.min(caps))

    def phi_gradient(self, x) -> Array:
        x = np.asarray(x, dtype=float).reshape(-1)
        q = x[: self.n_joints]
        grad = np.zeros(2 * self.n_joints)
        dist, caps = self._joint_caps(q)
        if np.any(dist < 0.0):
            return grad
        j = int(np.argmin(caps))
        d = dist[j]
        if d <= 0.0 or caps[j] >= self.v_max[j]:
            return grad  # flat: at the boundary or clamped by the velocity limit
        slope = np.sqrt(self.a_max[j] / (2.0 * d))
        sign = 1.0 if (q[j] - self.q_min[j]) <= (self.q_max[j] - q[j]) else -1.0
        grad[j] = sign * slope
        return grad


def braking_from_spec(spec: ModelSpec, alpha: float) -> AnalyticBraking:
    """Braking model for a dynamics spec.

    Integrator joints accelerate at tau_max exactly. For the arm, the per-joint
    acceleration capability is tau_max_j divided by a configuration-independent
    upper bound of the inertia diagonal M_jj (sum over outboard links of
    m_i * reach_ij^2 + I_i, reach_ij the largest joint-j-to-center-i distance).
    """
    if spec.system != ARM:
        a_max = spec.tau_max.copy()
    else:
        n = spec.n_joints
        lengths = spec.link_lengths
        masses = spec.link_masses
        inertias = masses * lengths**2 / 12.0
        a_max = np.empty(n)
        for j in range(n):
            bound = 0.0
            for i in range(j, n):
                reach = float(np.sum(lengths[j:i])) + 0.5 * lengths[i]
                bound += masses[i] * reach**2 + inertias[i]
            a_max[j] = spec.tau_max[j] / bound
    return AnalyticBraking(alpha, spec.q_min, spec.q_max, a_max, spec.v_max)


@dataclass(frozen=True)
class MlpLayer:
    weights: Array  # (rows, cols)
    bias: Array  # (rows,)
    activation: str


def _softplus(y: float) -> float:
    # log(1 + e^y), stable for large |y|
    return float(np.logaddexp(0.0, y))


class MlpPhi(SafeSetModel):
    """Feed-forward phi with a nonnegative output transform, evaluated in numpy."""

    def __init__(self, alpha: float, layers: tuple[MlpLayer, ...], output_transform: str):
        super().__init__(alpha)
        if not layers:
            raise SafeSetError("MLP needs at least one layer")
        if output_transform not in OUTPUT_TRANSFORMS:
            raise SafeSetError(f"unknown output transform {output_transform!r}")
        for k, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise SafeSetError(f"layer {k}: unknown activation {layer.activation!r}")
            if k > 0 and layer.weights.shape[1] != layers[k - 1].weights.shape[0]:
                raise SafeSetError(
                    f"layer {k}: expects {layer.weights.shape[1]} inputs but layer "
                    f"{k - 1} produces {layers[k - 1].weights.shape[0]}"
                )
        if layers[-1].weights.shape[0] != 1:
            raise SafeSetError("final layer must have a single output row")
        self.layers = tuple(layers)
        self.output_transform = output_transform

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    def _forward(self, x: Array) -> tuple[float, list[Array]]:
        if x.size != self.input_dim:
            raise SafeSetError(f"state has size {x.size}, MLP expects {self.input_dim}")
        pre = []
        h = x
        for layer in self.layers:
            z = layer.weights @ h + layer.bias
            pre.append(z)
            if layer.activation == "tanh":
                h = np.tanh(z)
            elif layer.activation == "relu":
                h = np.maximum(z, 0.0)
            else:
                h = z
        return float(h[0]), pre

    def phi(self, x) -> float:
        y, _ = self._forward(np.asarray(x, dtype=float).reshape(-1))
        if self.output_transform == "softplus":
            return _softplus(y)
        return abs(y)

    def phi_gradient(self, x) -> Array:
        x = np.asarray(x, dtype=float).reshape(-1)
        y, pre = self._forward(x)
        if self.output_transform == "softplus":
            scale = 1.0 / (1.0 + np.exp(-y))
        else:
            scale = 1.0 if y >= 0.0 else -1.0
        g = np.array([scale])
        for layer, z in zip(reversed(self.layers), reversed(pre)):
            if layer.activation == "tanh":
                g = g * (1.0 - np.tanh(z) ** 2)
            elif layer.activation == "relu":
                g = g * (z > 0.0)
            g = layer.weights.T @ g
        return g


def _require(mapping: dict, field: str, where: str):
    if field not in mapping:
        raise SafeSetError(f"{where}: missing field {field!r}")
    return mapping[field]


def load_mlp(path, alpha: float = 0.0) -> MlpPhi:
    """Load an MlpPhi model from a JSON weights file.

    Schema: {"layers": [{"rows", "cols", "weights" (row-major), "bias",
    "activation"}], "output_transform": "softplus"|"abs"}.
    """
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SafeSetError(f"{path}: not valid JSON ({exc})") from exc
    raw_layers = _require(data, "layers", str(path))
    layers = []
    for k, raw in enumerate(raw_layers):
        where = f"{path}: layer {k}"
        rows = int(_require(raw, "rows", where))
        cols = int(_require(raw, "cols", where))
        weights = np.asarray(_require(raw, "weights", where), dtype=float)
        if weights.size != rows * cols:
            raise SafeSetError(f"{where}: weights has {weights.size} entries, expected {rows * cols}")
        bias = np.asarray(_require(raw, "bias", where), dtype=float)
        if bias.size != rows:
            raise SafeSetError(f"{where}: bias has {bias.size} entries, expected {rows}")
        layers.append(
            MlpLayer(
                weights=weights.reshape(rows, cols),
                bias=bias,
                activation=str(_require(raw, "activation", where)),
            )
        )
    transform = str(_require(data, "output_transform", str(path)))
    return MlpPhi(alpha=alpha, layers=tuple(layers), output_transform=transform)


def save_mlp(model: MlpPhi, path) -> None:
    """Write an MlpPhi model to the JSON weights format (inverse of load_mlp)."""
    data = {
        "layers": [
            {
                "rows": layer.weights.shape[0],
                "cols": layer.weights.shape[1],
                "weights": layer.weights.ravel().tolist(),
                "bias": layer.bias.tolist(),
                "activation": layer.activation,
            }
            for layer in model.layers
        ],
        "output_transform": model.output_transform,
    }
    Path(path).write_text(json.dumps(data))
