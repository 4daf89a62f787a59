"""Safe MPC laboratory: parallel safe-set constraint scheduling, receding
safe horizons, safe task abortion, and a batch simulation harness."""

from .config import (
    ScenarioConfig,
    default_arm_scenario,
    default_integrator_scenario,
    load_scenario,
)
from .controller import (
    AbortResult,
    CheckResult,
    Controller,
    ControllerConfig,
    EpisodeOutcome,
    LoopState,
    check_solution,
    select_time_steps,
)
from .dynamics import (
    ModelSpec,
    equilibrium_control,
    forward_dynamics,
    inverse_dynamics,
    is_admissible,
    linearize,
    rollout,
    step,
)
from .harness import RunRecord, build_target, run_campaign, run_episode, sample_initial_states, summarize
from .ocp import CostWeights, OcpSetup, OcpVariant, ProblemInstance, assemble_qp, build, eval_cost
from .parallel import BatchRequest, select_best, solve_batch
from .qp import QpData, QpResult, solve_qp
from .safesets import (
    AnalyticBraking,
    MlpPhi,
    SafeResidual,
    SafeSetModel,
    TrivialZeroVelocity,
    braking_from_spec,
    load_mlp,
    save_mlp,
)
from .solver import Solution, rti_step, sqp_solve

__version__ = "0.1.0"
