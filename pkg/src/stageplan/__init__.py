"""Stage-time prediction, flexible job shop planning and plan execution for multi-stage job workloads."""

from .model import (
    Assignment,
    ExecutionPlan,
    Job,
    Machine,
    OperationSpec,
    PlanStatement,
    Schedule,
    StatementKind,
    TimeMatrix,
    WorkloadInstance,
    check_schedule,
    schedule_makespan,
    validate_instance,
)
from .plans import compile_fjsp_plans, greedy_plans, predicted_makespan
from .simulate import simulate
from .solver import SolverConfig, SolverResult, brute_force_oracle, lower_bound, solve
from .trace import ExecutionTrace, PerturbationModel, relative_error

__version__ = "0.1.0"
