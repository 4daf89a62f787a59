"""Campaign runner: sample starts, run episodes, classify, write artifacts.

An episode runs one controller from a sampled rest state until the first
joint reaches its target, a joint limit is violated, the safe abort fires,
or the step cap is hit (in which case an abort is attempted from the final
state). Campaigns sweep strategies x cores x alpha, resampling initial
states per alpha (seeded from (base seed, alpha)), and write:

* ``runs.csv``: one row per episode, fixed schema, byte-reproducible;
* ``logs/alpha_<a>/<combo>.jsonl``: per-loop records (these carry measured
  solve times, the only nondeterministic fields in the output tree);
* ``summary.json`` and SVG plots, both deterministic.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import dynamics as dyn
from .config import ScenarioConfig
from .controller import (
    NAIVE,
    PARALLEL,
    PARALLEL_FAMILY,
    RECEDING,
    Controller,
    ControllerConfig,
)
from .dynamics import Array, ModelSpec
from .qp import SOLVED

CSV_COLUMNS = "episode,strategy,cores,alpha,outcome,steps,abort_attempted,abort_success,wall_ms"

COMPLETED = "completed"
FAILED = "failed"
ABORTED = "aborted"


class HarnessError(RuntimeError):
    """Raised when a campaign cannot proceed (e.g. sampler rejection storm)."""


@dataclass
class RunRecord:
    episode: int
    strategy: str
    cores: int
    alpha: float
    outcome: str
    steps: int
    abort_attempted: bool
    abort_success: Optional[bool]
    wall_ms: float
    boundary_distance: Optional[float] = None  # joint-1 distance at abort trigger

    def csv_row(self) -> list[str]:
        return [
            str(self.episode),
            self.strategy,
            str(self.cores),
            format(self.alpha, "g"),
            self.outcome,
            str(self.steps),
            "1" if self.abort_attempted else "0",
            "" if self.abort_success is None else ("1" if self.abort_success else "0"),
            format(self.wall_ms, ".3f"),
        ]


def build_target(model: ModelSpec, offset: float = 0.05) -> Array:
    """Rest reference: first joint near its upper limit, others at box center."""
    q_ref = 0.5 * (model.q_min + model.q_max)
    q_ref[0] = model.q_max[0] - offset
    return np.concatenate([q_ref, np.zeros(model.n_joints)])


def combo_label(strategy: str, cores: int) -> str:
    if strategy in (PARALLEL, RECEDING, NAIVE):
        return strategy
    return f"{strategy}_k{cores}"


def expand_combos(scenario: ScenarioConfig) -> list[tuple[str, int]]:
    """(strategy, cores) pairs in config order; limited strategies cross cores."""
    combos: list[tuple[str, int]] = []
    for strategy in scenario.strategies:
        if strategy == PARALLEL:
            combos.append((strategy, scenario.N))
        elif strategy in PARALLEL_FAMILY:
            combos.extend((strategy, k) for k in scenario.cores)
        else:
            combos.append((strategy, 1))
    return combos


def controller_config(scenario: ScenarioConfig, strategy: str, cores: int, alpha: float) -> ControllerConfig:
    return ControllerConfig(
        N=scenario.N,
        dt=scenario.model.dt,
        L=scenario.L,
        strategy=strategy,
        K=min(cores, scenario.N),
        alpha=alpha,
        weights=scenario.weights,
        check_tol=scenario.check_tol,
        target_q_tol=scenario.target_q_tol,
        target_v_tol=scenario.target_v_tol,
        qp_tol=scenario.qp_tol,
        qp_max_iter=scenario.qp_max_iter,
        kkt_tol=scenario.kkt_tol,
        sqp_max_iter=scenario.sqp_max_iter,
        worker_limit=scenario.worker_limit or None,
        log_controls=scenario.detailed_logs,
    )


def _make_controller(scenario: ScenarioConfig, strategy: str, cores: int, alpha: float) -> Controller:
    cfg = controller_config(scenario, strategy, cores, alpha)
    return Controller(cfg, scenario.model, scenario.safe_set_for(alpha), build_target(scenario.model, scenario.target_offset))


def sampling_seed(base_seed: int, alpha: float) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), int(round(alpha * 1e6))]))


def first_loop_ok(scenario: ScenarioConfig, strategy: str, cores: int, alpha: float, x0: Array) -> bool:
    """Does loop 0 produce an adopted solution for this formulation?"""
    cfg = controller_config(scenario, strategy, cores, alpha)
    cfg.worker_limit = 1
    with Controller(
        cfg,
        scenario.model,
        scenario.safe_set_for(alpha),
        build_target(scenario.model, scenario.target_offset),
    ) as ctrl:
        state = ctrl.initial_state()
        _, record = ctrl.iteration(state, x0)
    if record["fallback"]:
        return False
    if strategy in (RECEDING, NAIVE):
        return record["problems"][0]["status"] == SOLVED
    return True


def sample_initial_states(
    scenario: ScenarioConfig,
    n: int,
    alpha: float,
    combos: Optional[list[tuple[str, int]]] = None,
) -> list[Array]:
    """Rest states uniform in the shrunk position box, first-loop-solvable.

    Rejection-resamples any draw whose loop-0 problem is not adopted by every
    formulation under test; aborts with a diagnostic when the rejection rate
    exceeds 95% (the scenario is then likely inconsistent).
    """
    if n < 1:
        raise HarnessError("need n >= 1 samples")
    model = scenario.model
    combos = expand_combos(scenario) if combos is None else combos
    rng = sampling_seed(scenario.seed, alpha)
    width = model.q_max - model.q_min
    lo = model.q_min + scenario.sample_margin * width
    hi = model.q_max - scenario.sample_margin * width
    states: list[Array] = []
    draws = 0
    while len(states) < n:
        q0 = rng.uniform(lo, hi)
        draws += 1
        x0 = np.concatenate([q0, np.zeros(model.n_joints)])
        if all(first_loop_ok(scenario, s, k, alpha, x0) for s, k in combos):
            states.append(x0)
        if draws >= max(40, 4 * n) and len(states) / draws < 0.05:
            raise HarnessError(
                f"sampler rejection rate {1 - len(states) / draws:.0%} exceeds 95%; "
                "the scenario is likely inconsistent (bounds, alpha, or weights)"
            )
    return states


def _boundary_distance(model: ModelSpec, x: Array) -> float:
    q1 = float(x[0])
    return min(q1 - float(model.q_min[0]), float(model.q_max[0]) - q1)


def run_episode(
    scenario: ScenarioConfig,
    strategy: str,
    cores: int,
    alpha: float,
    x0: Array,
    episode_id: int,
) -> tuple[RunRecord, list[dict]]:
    """Run one episode to termination; returns its record and loop logs."""
    model = scenario.model
    logs: list[dict] = []
    outcome: Optional[str] = None
    abort_attempted = False
    abort_success: Optional[bool] = None
    boundary: Optional[float] = None
    steps = 0
    x = np.asarray(x0, dtype=float)

    with _make_controller(scenario, strategy, cores, alpha) as ctrl:
        state = ctrl.initial_state()
        logs.append({"event": "episode_start", "episode": episode_id, "x0": x.tolist()})
        while True:
            if ctrl.target_reached(x):
                outcome = COMPLETED
                break
            if not dyn.is_admissible(model, x, tol=scenario.check_tol).admissible:
                outcome = FAILED
                break
            if state.abort_pending:
                abort_attempted = True
                res = ctrl.run_safe_abort(state, x)
                abort_success = res.success
                boundary = _boundary_distance(model, res.bridge_state)
                steps += res.U.shape[0]
                outcome = ABORTED if res.success else FAILED
                logs.append(
                    {
                        "event": "abort",
                        "episode": episode_id,
                        "trigger": "safe_horizon",
                        "success": bool(res.success),
                        "solver_status": res.solution.status,
                        "solve_time": float(res.solution.solve_time),
                        "boundary_distance": boundary,
                    }
                )
                break
            if steps >= scenario.episode_cap:
                abort_attempted = True
                res = ctrl.solve_abort_from(x)
                abort_success = res.success
                boundary = _boundary_distance(model, x)
                if res.success:
                    steps += res.U.shape[0]
                outcome = ABORTED if res.success else FAILED
                logs.append(
                    {
                        "event": "abort",
                        "episode": episode_id,
                        "trigger": "step_cap",
                        "success": bool(res.success),
                        "solver_status": res.solution.status,
                        "solve_time": float(res.solution.solve_time),
                        "boundary_distance": boundary,
                    }
                )
                break
            u, record = ctrl.iteration(state, x)
            record["episode"] = episode_id
            logs.append(record)
            x = dyn.step(model, x, u)
            steps += 1

    record = RunRecord(
        episode=episode_id,
        strategy=combo_label(strategy, cores),
        cores=cores,
        alpha=alpha,
        outcome=outcome,
        steps=steps,
        abort_attempted=abort_attempted,
        abort_success=abort_success,
        wall_ms=steps * model.dt * 1000.0,
        boundary_distance=boundary,
    )
    logs.append(
        {
            "event": "episode_end",
            "episode": episode_id,
            "outcome": outcome,
            "steps": steps,
            "abort_attempted": abort_attempted,
            "abort_success": abort_success,
            "boundary_distance": boundary,
        }
    )
    return record, logs


def _episode_worker(args) -> tuple[RunRecord, list[dict]]:
    return run_episode(*args)


@dataclass
class CampaignResult:
    records: list[RunRecord]
    summary: dict
    out_dir: Optional[Path] = None
    logs: dict = field(default_factory=dict)  # (alpha, combo) -> list of log dicts


def run_campaign(scenario: ScenarioConfig, out_dir: Optional[str] = None) -> CampaignResult:
    """Run every strategy x cores x alpha; write artifacts when out_dir given."""
    combos = expand_combos(scenario)
    records: list[RunRecord] = []
    all_logs: dict = {}
    for alpha in scenario.alphas:
        starts = sample_initial_states(scenario, scenario.episodes, alpha, combos)
        for strategy, cores in combos:
            tasks = [
                (scenario, strategy, cores, alpha, starts[ep], ep)
                for ep in range(scenario.episodes)
            ]
            if scenario.episode_workers > 1:
                with ProcessPoolExecutor(max_workers=scenario.episode_workers) as pool:
                    results = list(pool.map(_episode_worker, tasks))
            else:
                results = [_episode_worker(t) for t in tasks]
            combo_logs: list[dict] = []
            for rec, logs in results:
                records.append(rec)
                combo_logs.extend(logs)
            all_logs[(alpha, combo_label(strategy, cores))] = combo_logs

    summary = summarize(records)
    result = CampaignResult(records=records, summary=summary, logs=all_logs)
    if out_dir is not None:
        result.out_dir = write_artifacts(result, scenario, Path(out_dir))
    return result


def summarize(records: list[RunRecord]) -> dict:
    """Per (alpha, combo) outcome percentages, abort-failure rate, mean steps.

    ``mean_steps_completed_common`` averages steps over the episodes completed
    by every combo at that alpha (the apples-to-apples speed comparison).
    """
    by_alpha: dict[str, dict[str, list[RunRecord]]] = {}
    for rec in records:
        a_key = format(rec.alpha, "g")
        by_alpha.setdefault(a_key, {}).setdefault(rec.strategy, []).append(rec)

    summary: dict = {}
    for a_key, groups in by_alpha.items():
        common: Optional[set[int]] = None
        for recs in groups.values():
            done = {r.episode for r in recs if r.outcome == COMPLETED}
            common = done if common is None else (common & done)
        common = common or set()
        summary[a_key] = {}
        for combo, recs in groups.items():
            n = len(recs)
            counts = {k: sum(1 for r in recs if r.outcome == k) for k in (COMPLETED, FAILED, ABORTED)}
            attempts = sum(1 for r in recs if r.abort_attempted)
            failures = sum(1 for r in recs if r.abort_attempted and not r.abort_success)
            done_steps = [r.steps for r in recs if r.outcome == COMPLETED]
            common_steps = [r.steps for r in recs if r.episode in common and r.outcome == COMPLETED]
            summary[a_key][combo] = {
                "episodes": n,
                "completed": counts[COMPLETED],
                "failed": counts[FAILED],
                "aborted": counts[ABORTED],
                "completed_pct": 100.0 * counts[COMPLETED] / n,
                "failed_pct": 100.0 * counts[FAILED] / n,
                "aborted_pct": 100.0 * counts[ABORTED] / n,
                "abort_attempts": attempts,
                "abort_failures": failures,
                "abort_failure_rate": (failures / attempts) if attempts else None,
                "mean_steps_completed": (sum(done_steps) / len(done_steps)) if done_steps else None,
                "mean_steps_completed_common": (
                    sum(common_steps) / len(common_steps) if common_steps else None
                ),
                "common_completed_episodes": len(common),
            }
    return summary


def write_csv(records: list[RunRecord], path: Path) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS.split(","))
        for rec in records:
            writer.writerow(rec.csv_row())


def read_csv(path: Path) -> list[RunRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            records.append(
                RunRecord(
                    episode=int(row["episode"]),
                    strategy=row["strategy"],
                    cores=int(row["cores"]),
                    alpha=float(row["alpha"]),
                    outcome=row["outcome"],
                    steps=int(row["steps"]),
                    abort_attempted=row["abort_attempted"] == "1",
                    abort_success=None if row["abort_success"] == "" else row["abort_success"] == "1",
                    wall_ms=float(row["wall_ms"]),
                )
            )
    return records


def alpha_tag(alpha: float) -> str:
    return "alpha_" + format(alpha, "g").replace(".", "p").replace("-", "m")


def write_artifacts(result: CampaignResult, scenario: ScenarioConfig, out_dir: Path) -> Path:
    from . import plots

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(result.records, out_dir / "runs.csv")
    (out_dir / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    for (alpha, combo), logs in result.logs.items():
        log_dir = out_dir / "logs" / alpha_tag(alpha)
        log_dir.mkdir(parents=True, exist_ok=True)
        with open(log_dir / f"{combo}.jsonl", "w", encoding="utf-8") as fh:
            for entry in logs:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    plots.render_all(result.records, result.summary, out_dir / "plots")
    return out_dir


def regenerate_report(in_dir, out_dir=None) -> dict:
    """Rebuild summary.json and the plots from a stored runs.csv (+ logs)."""
    from . import plots

    in_dir = Path(in_dir)
    records = read_csv(in_dir / "runs.csv")
    # Recover abort boundary distances from the episode-end log records.
    log_root = in_dir / "logs"
    if log_root.exists():
        lookup = {(alpha_tag(r.alpha), r.strategy, r.episode): r for r in records}
        for adir in sorted(p for p in log_root.iterdir() if p.is_dir()):
            for jf in sorted(adir.glob("*.jsonl")):
                for line in jf.read_text().splitlines():
                    entry = json.loads(line)
                    if entry.get("event") == "episode_end" and entry.get("boundary_distance") is not None:
                        rec = lookup.get((adir.name, jf.stem, entry["episode"]))
                        if rec is not None:
                            rec.boundary_distance = entry["boundary_distance"]
    summary = summarize(records)
    target = Path(out_dir) if out_dir else in_dir
    target.mkdir(parents=True, exist_ok=True)
    (target / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    plots.render_all(records, summary, target / "plots")
    return summary
