"""Sampling-based dual stochastic MPC for systems with mode and parameter uncertainty."""

from .belief import (
    BeliefState,
    CapConfig,
    GaussianBelief,
    NumericalError,
    apply_caps,
    full_update,
    log_marginal_likelihood,
    marginal_likelihood,
    mode_update,
    param_update,
)
from .config import Benchmark, dump_benchmark, load_benchmark, read_benchmark
from .controller import (
    ControllerState,
    RecedingHorizonController,
    ScenarioConfig,
    cempc_step,
    dmpc_step,
    warm_start,
)
from .model import (
    ConfigurationError,
    CostSpec,
    ModelSet,
    ModeModel,
    affine_mode,
    input_gain_mode,
    step_truth,
    zoh_discretize,
)
from .objective import ControlPlan, DualObjective, ObjectiveConfig, PlanLayout, total_objective
from .optimizer import SolverConfig, SolveReport, minimize, project
from .simharness import SimulationLog, StatsBundle, TruthConfig, monte_carlo, run_closed_loop
from .tree import SampleBank, ScenarioTree, TreeTopology, build_topology, expand

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
