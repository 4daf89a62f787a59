"""Scenario configuration: file loading (TOML/JSON), env overrides, defaults.

A scenario bundles the model, cost weights, controller settings, safe-set
backend, and campaign protocol. Files use sections [model], [cost],
[controller], [safe_set], [campaign]; JSON uses the same nesting. Any value
can be overridden from the environment as MPCLAB_<SECTION>_<KEY> (values
parsed as JSON, falling back to plain strings), which is how CI pins e.g.
episode counts without editing files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - py310 path
    import tomli as tomllib

from .controller import STRATEGIES
from .dynamics import ARM, INTEGRATOR, ModelSpec
from .ocp import CostWeights
from .safesets import SafeSetModel, TrivialZeroVelocity, braking_from_spec, load_mlp

ENV_PREFIX = "MPCLAB"


class ConfigError(ValueError):
    """Raised for unreadable or inconsistent scenario files."""


@dataclass(frozen=True)
class ScenarioConfig:
    model: ModelSpec
    weights: CostWeights
    N: int = 16
    L: int = 0
    alphas: tuple[float, ...] = (0.10,)
    strategies: tuple[str, ...] = ("parallel", "receding", "naive")
    cores: tuple[int, ...] = (4,)
    episodes: int = 100
    episode_cap: int = 400
    seed: int = 20240801
    sample_margin: float = 0.05
    target_offset: float = 0.05
    safe_backend: str = "analytic_braking"
    mlp_path: str = ""
    check_tol: float = 1e-6
    qp_tol: float = 1e-6
    qp_max_iter: int = 4000
    kkt_tol: float = 1e-6
    sqp_max_iter: int = 100
    target_q_tol: float = 1e-2
    target_v_tol: float = 1e-1
    out_dir: str = "results"
    episode_workers: int = 1
    worker_limit: int = 0  # 0 -> min(K, cpu count)
    detailed_logs: bool = False

    def __post_init__(self):
        if self.episode_cap < 1 or self.episodes < 1:
            raise ConfigError("episodes and episode_cap must be >= 1")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}")
        if self.safe_backend not in ("analytic_braking", "mlp", "zero_velocity"):
            raise ConfigError(f"unknown safe-set backend {self.safe_backend!r}")
        for a in self.alphas:
            if not 0.0 <= a <= 1.0:
                raise ConfigError("alpha values must lie in [0, 1]")

    def safe_set_for(self, alpha: float) -> SafeSetModel:
        if self.safe_backend == "analytic_braking":
            return braking_from_spec(self.model, alpha)
        if self.safe_backend == "mlp":
            if not self.mlp_path:
                raise ConfigError("safe_backend 'mlp' requires mlp_path")
            return load_mlp(self.mlp_path, alpha=alpha)
        return TrivialZeroVelocity(alpha, self.model.n_joints)


def _vec(value, n: int) -> list[float]:
    if np.isscalar(value):
        return [float(value)] * n
    return [float(v) for v in value]


def _model_from_dict(d: dict) -> ModelSpec:
    n = int(d.get("n_joints", 3))
    return ModelSpec(
        system=d.get("system", ARM),
        n_joints=n,
        link_lengths=_vec(d.get("link_lengths", 0.3), n),
        link_masses=_vec(d.get("link_masses", 1.0), n),
        gravity=float(d.get("gravity", 9.81)),
        q_min=_vec(d.get("q_min", -2.0), n),
        q_max=_vec(d.get("q_max", 2.0), n),
        v_max=_vec(d.get("v_max", 3.0), n),
        tau_max=_vec(d.get("tau_max", 10.0), n),
        dt=float(d.get("dt", 0.015)),
        integrator_substeps=int(d.get("integrator_substeps", 1)),
    )


def _weights_from_dict(d: dict, nx: int, nu: int) -> CostWeights:
    q_default = [500.0] + [1e-4] * (nx - 1)
    return CostWeights(
        Q=_vec(d["q_weights"], nx) if "q_weights" in d else q_default,
        R=_vec(d.get("r_weights", 1e-4), nu),
        w_s=float(d.get("w_s", 1e2)),
        w_r=float(d.get("w_r", 1e4)),
    )


def scenario_from_dict(data: dict) -> ScenarioConfig:
    model = _model_from_dict(data.get("model", {}))
    weights = _weights_from_dict(data.get("cost", {}), model.nx, model.nu)
    ctl = data.get("controller", {})
    safe = data.get("safe_set", {})
    camp = data.get("campaign", {})
    alphas = safe.get("alphas", camp.get("alphas", [safe.get("alpha", 0.10)]))
    return ScenarioConfig(
        model=model,
        weights=weights,
        N=int(ctl.get("N", 16)),
        L=int(ctl.get("L", 0)),
        alphas=tuple(float(a) for a in alphas),
        strategies=tuple(camp.get("strategies", ["parallel", "receding", "naive"])),
        cores=tuple(int(k) for k in camp.get("cores", [4])),
        episodes=int(camp.get("episodes", 100)),
        episode_cap=int(camp.get("episode_cap", 400)),
        seed=int(camp.get("seed", 20240801)),
        sample_margin=float(camp.get("sample_margin", 0.05)),
        target_offset=float(camp.get("target_offset", 0.05)),
        safe_backend=str(safe.get("backend", "analytic_braking")),
        mlp_path=str(safe.get("mlp_path", "")),
        check_tol=float(ctl.get("check_tol", 1e-6)),
        qp_tol=float(ctl.get("qp_tol", 1e-6)),
        qp_max_iter=int(ctl.get("qp_max_iter", 4000)),
        kkt_tol=float(ctl.get("kkt_tol", 1e-6)),
        sqp_max_iter=int(ctl.get("sqp_max_iter", 100)),
        target_q_tol=float(ctl.get("target_q_tol", 1e-2)),
        target_v_tol=float(ctl.get("target_v_tol", 1e-1)),
        out_dir=str(camp.get("out_dir", "results")),
        episode_workers=int(camp.get("episode_workers", 1)),
        worker_limit=int(camp.get("worker_limit", 0)),
        detailed_logs=bool(camp.get("detailed_logs", False)),
    )


def _apply_env_overrides(data: dict, environ=None) -> dict:
    env = os.environ if environ is None else environ
    for key, raw in env.items():
        if not key.startswith(ENV_PREFIX + "_"):
            continue
        parts = key[len(ENV_PREFIX) + 1 :].lower().split("_", 1)
        if len(parts) != 2:
            continue
        section, name = parts
        try:
            value: Any = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        data.setdefault(section, {})[name] = value
    return data


def load_scenario(path, environ=None) -> ScenarioConfig:
    """Load a scenario from TOML or JSON (by extension), then apply env overrides."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text())
    else:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    return scenario_from_dict(_apply_env_overrides(data, environ))


def default_arm_scenario(**overrides) -> ScenarioConfig:
    """Desk-scale 3-link arm scenario (non-paper parameters, tuned for speed)."""
    model = ModelSpec(
        system=ARM,
        n_joints=3,
        link_lengths=[0.30, 0.25, 0.20],
        link_masses=[1.5, 1.0, 0.7],
        gravity=9.81,
        q_min=[-2.0, -2.0, -2.0],
        q_max=[2.0, 2.0, 2.0],
        v_max=[3.0, 3.0, 3.0],
        tau_max=[24.0, 10.0, 4.0],
        dt=0.015,
    )
    weights = CostWeights(Q=[500.0] + [1e-4] * 5, R=[1e-4] * 3, w_s=1e2, w_r=1e4)
    base = ScenarioConfig(model=model, weights=weights)
    return replace(base, **overrides) if overrides else base


def default_integrator_scenario(**overrides) -> ScenarioConfig:
    """Integrator-chain scenario where the braking bound is the exact kernel."""
    model = ModelSpec(
        system=INTEGRATOR,
        n_joints=3,
        link_lengths=[1.0, 1.0, 1.0],
        link_masses=[1.0, 1.0, 1.0],
        gravity=0.0,
        q_min=[-1.0, -1.0, -1.0],
        q_max=[1.0, 1.0, 1.0],
        v_max=[2.5, 2.5, 2.5],
        tau_max=[10.0, 10.0, 10.0],
        dt=0.02,
    )
    weights = CostWeights(Q=[500.0] + [1e-4] * 5, R=[1e-4] * 3, w_s=1e2, w_r=1e4)
    base = ScenarioConfig(model=model, weights=weights)
    return replace(base, **overrides) if overrides else base
