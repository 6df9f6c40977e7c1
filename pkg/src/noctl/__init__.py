"""noctl: physics-informed operator surrogates for gradient-based optimal control.

Train a branch/trunk operator network once per differential equation, then
solve many optimal control problems against it by minimizing a
residual-penalized, curvature-regularized cost over the discretized
control.
"""

from .control_opt import (
    BfgsState,
    CostSpec,
    PenaltyConfig,
    RoutineConfig,
    cost_for,
    mse_report,
    optimize_control,
    penalized_cost,
)
from .network import DeepOnetModel, NetworkSpec, deeponet_eval, init_params, load_checkpoint, save_checkpoint
from .problems import ControlGrid, ProblemSpec, StateField, make_grid
from .refsolve import DalConfig, dal_optimize, fd_solve_diffusion_reaction, rk4_solve
from .sampling import FamilyConfig, build_training_set, default_families
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BfgsState",
    "ControlGrid",
    "CostSpec",
    "DalConfig",
    "DeepOnetModel",
    "FamilyConfig",
    "NetworkSpec",
    "PenaltyConfig",
    "ProblemSpec",
    "RoutineConfig",
    "StateField",
    "TrainConfig",
    "build_training_set",
    "cost_for",
    "dal_optimize",
    "deeponet_eval",
    "default_families",
    "fd_solve_diffusion_reaction",
    "init_params",
    "load_checkpoint",
    "make_grid",
    "mse_report",
    "optimize_control",
    "penalized_cost",
    "rk4_solve",
    "save_checkpoint",
    "train",
    "__version__",
]
