"""Robust edge-cloud routing and configuration for video inference workloads."""

from .errors import (
    CapacityError,
    ConfigurationError,
    InfeasibleError,
    InputError,
    VidrouteError,
)
from .model import (
    ConfigSpace,
    CostBreakdown,
    FirstStageDecision,
    Location,
    Profile,
    RobustInstance,
    SecondStageDecision,
    TaskSpec,
    UncertaintySet,
    accuracy_of,
    bandwidth_feasible,
    build_robust_instance,
    cost_of,
    delay_of,
    energy_of,
    evaluate_decisions,
    load_profile,
)
from .solver import (
    Cut,
    Scenario,
    SolveResult,
    SolverConfig,
    ccg_solve,
    dual_worst_case,
    enumerate_poles,
    master_solve,
    second_stage_value,
    worst_case_u,
)
from .oracle import brute_force_nominal, brute_force_solve

__version__ = "0.1.0"
