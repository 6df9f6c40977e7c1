"""Residual-penalized, curvature-regularized cost minimization over the control.

One optimization run walks the discretized control through the trained
operator: evaluate the state field and its time derivative, penalize the
mean equation defect, regularize the discrete second derivative of the
control, and step with GD, ADAM, or BFGS with Armijo backtracking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import LineSearchError, NumericalError
from .problems import ControlGrid, ProblemSpec, StateField, make_grid, surrogate_graph, trunk_tables
from .training import adam_init, adam_step

log = logging.getLogger(__name__)

COST_KINDS = (
    "linear_j1",
    "linear_j2",
    "linear_j3",
    "nonlinear_j1",
    "nonlinear_j2",
    "nonlinear_j3",
    "tracking",
)

# (problem kind, selector p) -> cost kind
_COST_BY_PROBLEM = {
    ("linear_ode", 1): "linear_j1",
    ("linear_ode", 2): "linear_j2",
    ("linear_ode", 3): "linear_j3",
    ("nonlinear_ode", 1): "nonlinear_j1",
    ("nonlinear_ode", 2): "nonlinear_j2",
    ("nonlinear_ode", 3): "nonlinear_j3",
    ("diffusion_reaction", 1): "tracking",
    ("diffusion_reaction", 2): "tracking",
    ("diffusion_reaction", 3): "tracking",
}


@dataclass
class CostSpec:
    """Running/terminal/tracking cost; tracking carries its target field."""

    kind: str
    target: StateField | None = None
    guard_floor: float = 1e-3

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.kind == "tracking" and self.target is None:
            raise ValueError("tracking cost needs a target field")


def cost_for(problem_kind: str, selector: int, target=None) -> CostSpec:
    key = (problem_kind, selector)
    if key not in _COST_BY_PROBLEM:
        raise ValueError(f"no cost {selector} for problem {problem_kind}")
    return CostSpec(_COST_BY_PROBLEM[key], target=target)


@dataclass(frozen=True)
class PenaltyConfig:
    mu: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.lam)):
            raise ValueError("penalty weights must be finite")
        if self.mu < 0 or self.lam < 0:
            raise ValueError("penalty weights must be non-negative")


@dataclass(frozen=True)
class RoutineConfig:
    routine: str
    iterations: int
    lr: float = 0.01
    armijo_max_trials: int = 20
    armijo_factor: float = 0.5
    armijo_threshold: float = 1e-4
    grad_tol: float | None = 1e-8

    def __post_init__(self):
        if self.routine not in ("gd", "adam", "bfgs"):
            raise ValueError(f"unknown routine {self.routine!r}")
        if self.iterations < 1:
            raise ValueError("iteration budget must be at least 1")
        if not (0.0 < self.armijo_factor < 1.0):
            raise ValueError("Armijo factor must lie in (0, 1)")


@dataclass
class BfgsState:
    """Dense inverse-Hessian approximation plus the previous iterate."""

    h_inv: np.ndarray
    prev_x: np.ndarray | None = None
    prev_grad: np.ndarray | None = None


def bfgs_init(n: int) -> BfgsState:
    return BfgsState(np.eye(n))


# -- pieces of the objective ---------------------------------------------------

def running_cost(cost: CostSpec, y, u, t=None):
    """Integrand L(y, u, t), or None for terminal-only and tracking costs."""
    if cost.kind == "linear_j1":
        return 0.5 * (ad.square(y) + ad.square(u))
    if cost.kind == "linear_j2":
        return 1.0 / ad.clip_min(y, cost.guard_floor) + ad.square(u)
    if cost.kind == "linear_j3":
        return ad.square(ad.square(y)) + ad.square(u)
    if cost.kind == "nonlinear_j2":
        return ad.square(y) + ad.square(u)
    if cost.kind == "nonlinear_j3":
        return ad.square(y - u)
    return None


def terminal_cost(cost: CostSpec, y_terminal):
    return -y_terminal if cost.kind == "nonlinear_j1" else None


def trapezoid(values, dt) -> float:
    """dt * (v_0/2 + v_1 + ... + v_{n-2} + v_{n-1}/2); exact on affine data."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = np.shape(values if not isinstance(values, ad.Var) else values.value)[0]
    if n < 2:
        raise ValueError("trapezoid needs at least 2 values")
    w = np.full(n, dt)
    w[0] = w[-1] = 0.5 * dt
    return values @ w


def _trapz_weights_2d(grid):
    wt = np.full(grid.t.size, grid.dt)
    wt[0] = wt[-1] = 0.5 * grid.dt
    wx = np.full(grid.x.size, grid.dx)
    wx[0] = wx[-1] = 0.5 * grid.dx
    return np.outer(wt, wx)


def _second_diff_matrix(n):
    d2 = np.zeros((n - 2, n))
    for i in range(n - 2):
        d2[i, i] = 1.0
        d2[i, i + 1] = -2.0
        d2[i, i + 2] = 1.0
    return d2


def second_diff_reg(u) -> float:
    """Sum of squared central second differences of the control."""
    n = np.shape(u if not isinstance(u, ad.Var) else u.value)[0]
    if n < 3:
        raise ValueError("second-difference regularizer needs at least 3 values")
    return ad.vsum(ad.square(_second_diff_matrix(n) @ u))


def _cost_expr(cost: CostSpec, y, u, grid, problem):
    """Scalar cost over the surrogate field ``y``; generic over Vars/arrays."""
    if cost.kind == "tracking":
        w = _trapz_weights_2d(grid)
        return ad.vsum(w * ad.square(cost.target.values - y))
    integrand = running_cost(cost, y, u, grid.t)
    terminal_pick = np.zeros(grid.n)
    terminal_pick[-1] = 1.0
    total = None
    if integrand is not None:
        total = trapezoid(integrand, grid.dt)
    e_term = terminal_cost(cost, y @ terminal_pick)
    if e_term is not None:
        total = e_term if total is None else total + e_term
    return total


def cost_value(cost: CostSpec, y_field: StateField, u: ControlGrid, grid) -> float:
    """Numeric cost of a given state field and control on a grid."""
    y = y_field.values
    if cost.kind != "tracking" and y.shape != u.values.shape:
        raise ValueError("state and control shapes must match on the grid")
    if cost.kind == "tracking" and y.shape != cost.target.values.shape:
        raise ValueError("state and target shapes must match")
    if cost.kind == "linear_j2" and np.any(y < cost.guard_floor):
        log.warning(
            "cost guard active: %d state values below %g floored",
            int(np.sum(y < cost.guard_floor)),
            cost.guard_floor,
        )
    return float(_cost_expr(cost, y, u.values, grid, None))


# -- penalized objective through the operator -----------------------------------

def _penalized_graph(model, problem, cost, penalty, u_values, tables, grid):
    """Build one evaluation tape; returns (tape, u_var, total, parts dict)."""
    tape = ad.Tape()
    u_var = tape.input(np.asarray(u_values, dtype=np.float64))
    surref = surrogate_graph(problem, model, tape, u_var, tables, grid)
    cost_var = _cost_expr(cost, surref["y"], u_var, grid, problem)
    pen_var = penalty.mu * surref["mean_residual"]
    reg_var = penalty.lam * second_diff_reg(u_var)
    total = cost_var + pen_var + reg_var
    parts = {
        "cost": float(cost_var.value),
        "penalty": float(pen_var.value),
        "reg": float(reg_var.value),
        "mean_residual": float(surref["mean_residual"].value),
    }
    if cost.kind == "linear_j2":
        parts["guard_hits"] = int(np.sum(surref["y"].value < cost.guard_floor))
    return tape, u_var, total, parts


def _grid_and_tables(model, problem):
    if problem.is_pde:
        grid = make_grid(problem, n_space=model.m)
    else:
        grid = make_grid(problem, n_time=model.m)
    return grid, trunk_tables(problem, model, grid)


def penalized_cost(model, problem, cost, penalty, u, tables=None, grid=None):
    """Total J_mu and its (cost, penalty, reg) decomposition at control ``u``."""
    u_values = u.values if isinstance(u, ControlGrid) else np.asarray(u, float)
    if grid is None or tables is None:
        grid, tables = _grid_and_tables(model, problem)
    _, _, total, parts = _penalized_graph(
        model, problem, cost, penalty, u_values, tables, grid
    )
    return float(total.value), parts


def control_gradient(model, problem, cost, penalty, u, tables=None, grid=None):
    """d J_mu / d u_i, differentiating through the operator at the sensor inputs."""
    u_values = u.values if isinstance(u, ControlGrid) else np.asarray(u, float)
    if grid is None or tables is None:
        grid, tables = _grid_and_tables(model, problem)
    tape, u_var, total, _ = _penalized_graph(
        model, problem, cost, penalty, u_values, tables, grid
    )
    return tape.gradients(total, [u_var])[0]


# -- optimizer machinery ---------------------------------------------------------

def armijo_search(f, x, direction, g, max_trials=20, factor=0.5, threshold=1e-4):
    """Largest step in {1, factor, factor^2, ...} with sufficient decrease.

    Falls back to the steepest-descent direction when ``direction`` is not a
    descent direction; the returned step then applies to -g.  Raises
    :class:`LineSearchError` after ``max_trials`` failures.
    """
    direction = np.asarray(direction, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    slope = float(g @ direction)
    if slope >= 0.0:
        direction = -g
        slope = -float(g @ g)
    f0 = float(f(x))
    alpha = 1.0
    for _ in range(max_trials):
        if float(f(x + alpha * direction)) <= f0 + threshold * alpha * slope:
            return alpha
        alpha *= factor
    raise LineSearchError(
        f"no sufficient decrease within {max_trials} trials (f0={f0:.6g})"
    )


def bfgs_update(state: BfgsState, s, y_vec) -> BfgsState:
    """Standard inverse-Hessian update; skipped when the curvature s'y is tiny."""
    s = np.asarray(s, dtype=np.float64)
    y_vec = np.asarray(y_vec, dtype=np.float64)
    if s.shape != y_vec.shape or s.size != state.h_inv.shape[0]:
        raise ValueError("step and gradient-difference lengths must match the state")
    sy = float(s @ y_vec)
    if sy <= 1e-10:
        return state
    rho = 1.0 / sy
    h = state.h_inv
    hy = h @ y_vec
    # (I - rho s y') H (I - rho y s') + rho s s', expanded to avoid forming I
    h_new = (
        h
        - rho * np.outer(s, hy)
        - rho * np.outer(hy, s)
        + rho * rho * float(y_vec @ hy) * np.outer(s, s)
        + rho * np.outer(s, s)
    )
    return BfgsState(h_new, state.prev_x, state.prev_grad)


def optimize_control(model, problem: ProblemSpec, cost: CostSpec, penalty: PenaltyConfig,
                     routine: RoutineConfig):
    """Minimize the penalized cost from u = 0; returns (control, history rows).

    History rows carry iter/J_mu/cost/penalty/reg/grad_norm (plus the mean
    residual); the last row is the returned control.  BFGS resets its
    inverse Hessian and retries once on a failed line search; a second
    failure ends the run at the current iterate.
    """
    grid, tables = _grid_and_tables(model, problem)
    u = np.zeros(model.m)

    def evaluate(values):
        tape, u_var, total, parts = _penalized_graph(
            model, problem, cost, penalty, values, tables, grid
        )
        grad = tape.gradients(total, [u_var])[0]
        return float(total.value), parts, grad

    def value_only(values):
        _, _, total, _ = _penalized_graph(
            model, problem, cost, penalty, values, tables, grid
        )
        return float(total.value)

    history = []
    adam = adam_init(u.size) if routine.routine == "adam" else None
    bfgs = bfgs_init(u.size) if routine.routine == "bfgs" else None
    stop_reason = "budget"
    iteration = 0
    while True:
        total, parts, grad = evaluate(u)
        if not np.isfinite(total):
            raise NumericalError(f"non-finite objective at iteration {iteration}")
        grad_norm = float(np.max(np.abs(grad)))
        history.append(
            {
                "iter": iteration,
                "J_mu": total,
                "cost": parts["cost"],
                "penalty": parts["penalty"],
                "reg": parts["reg"],
                "grad_norm": grad_norm,
                "mean_residual": parts["mean_residual"],
            }
        )
        if iteration >= routine.iterations:
            break
        if routine.grad_tol is not None and grad_norm < routine.grad_tol:
            stop_reason = "grad_tol"
            break

        if routine.routine == "gd":
            u = u - routine.lr * grad
        elif routine.routine == "adam":
            u, adam = adam_step(adam, u, grad, routine.lr)
        else:
            if bfgs.prev_x is not None:
                bfgs = bfgs_update(bfgs, u - bfgs.prev_x, grad - bfgs.prev_grad)
            direction = -(bfgs.h_inv @ grad)
            if float(grad @ direction) >= 0.0:
                bfgs = BfgsState(np.eye(u.size))
                direction = -grad
            try:
                alpha = armijo_search(
                    value_only, u, direction, grad,
                    routine.armijo_max_trials, routine.armijo_factor,
                    routine.armijo_threshold,
                )
            except LineSearchError:
                bfgs = BfgsState(np.eye(u.size))
                direction = -grad
                try:
                    alpha = armijo_search(
                        value_only, u, direction, grad,
                        routine.armijo_max_trials, routine.armijo_factor,
                        routine.armijo_threshold,
                    )
                except LineSearchError:
                    stop_reason = "line_search"
                    break
            bfgs.prev_x = u.copy()
            bfgs.prev_grad = grad.copy()
            u = u + alpha * direction
        iteration += 1

    domain = "space" if problem.is_pde else "time"
    log.debug("optimization stopped (%s) after %d iterations", stop_reason, iteration)
    return ControlGrid(u, domain), history


def mse_report(u: ControlGrid, u_ref: ControlGrid):
    """(MSE, pointwise-error SD) of a control against its reference."""
    if len(u) != len(u_ref):
        raise ValueError("controls live on different grids")
    err = u.values - u_ref.values
    return float(np.mean(err**2)), float(np.std(err))
