"""Classical reference solvers used to generate targets and ground truths.

RK4 time stepping for the ODEs, adjoint-based steepest descent on the
control (forward solve, backward adjoint solve, gradient step), and a
Crank-Nicolson scheme with an explicitly lagged reaction term for the
diffusion-reaction equation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from . import autodiff as ad
from .control_opt import CostSpec, cost_value, running_cost, terminal_cost
from .errors import LineSearchError, NumericalError
from .problems import (
    ControlGrid,
    ProblemSpec,
    StateField,
    dynamics_rhs,
    make_grid,
)
from .sampling import sample_grf


@dataclass
class Trajectory:
    t: np.ndarray
    y: np.ndarray
    adjoint: np.ndarray | None = None

    def __post_init__(self):
        if self.t.shape != self.y.shape:
            raise ValueError("time and state arrays must have equal length")


@dataclass(frozen=True)
class DalConfig:
    step_init: float = 1.0
    max_iter: int = 10000
    grad_tol: float = 1e-8
    backtrack_max: int = 50
    decrease_coeff: float = 1e-4

    def __post_init__(self):
        if min(self.step_init, self.max_iter, self.grad_tol, self.backtrack_max) <= 0:
            raise ValueError("all solver parameters must be positive")


def rk4_solve(problem: ProblemSpec, control: ControlGrid, n_nodes=None) -> Trajectory:
    """Classical RK4 over the uniform grid; control linearly interpolated at half-steps."""
    if problem.is_pde:
        raise ValueError("rk4_solve handles the ODE kinds only")
    u = control.values
    if n_nodes is None:
        n_nodes = u.size
    elif n_nodes != u.size:
        raise ValueError("control must be defined on the integration grid")
    t = np.linspace(0.0, problem.horizon, n_nodes)
    dt = t[1] - t[0]
    u_half = 0.5 * (u[:-1] + u[1:])
    y = np.empty(n_nodes)
    y[0] = problem.y0
    for i in range(n_nodes - 1):
        th = t[i] + 0.5 * dt
        k1 = dynamics_rhs(problem, y[i], u[i], t[i])
        k2 = dynamics_rhs(problem, y[i] + 0.5 * dt * k1, u_half[i], th)
        k3 = dynamics_rhs(problem, y[i] + 0.5 * dt * k2, u_half[i], th)
        k4 = dynamics_rhs(problem, y[i] + dt * k3, u[i + 1], t[i + 1])
        y[i + 1] = y[i] + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(y[i + 1]):
            raise NumericalError(f"state diverged at t={t[i + 1]:.6g}")
    return Trajectory(t, y)


def _partials_y(problem, cost, y, u, t):
    """(dL/dy, df/dy) elementwise along a trajectory, via forward duals."""
    ones = np.ones_like(y)
    fy = dynamics_rhs(problem, ad.Dual(y, ones), u, t).tangent
    integrand = running_cost(cost, ad.Dual(y, ones), u, t)
    ly = integrand.tangent if isinstance(integrand, ad.Dual) else np.zeros_like(y)
    return ly, fy


def _partials_u(problem, cost, y, u, t):
    ones = np.ones_like(u)
    fu = dynamics_rhs(problem, y, ad.Dual(u, ones), t).tangent
    integrand = running_cost(cost, y, ad.Dual(u, ones), t)
    lu = integrand.tangent if isinstance(integrand, ad.Dual) else np.zeros_like(u)
    return lu, fu


def adjoint_solve(problem: ProblemSpec, cost: CostSpec, traj: Trajectory,
                  control: ControlGrid) -> np.ndarray:
    """Backward RK4 on the adjoint equation lam' = -(dL/dy + lam df/dy).

    Terminal condition lam(T) = dE/dy(T); the cost partials come from
    forward-mode duals through the cost and dynamics expressions.
    """
    t, y, u = traj.t, traj.y, control.values
    n = t.size
    dt = t[1] - t[0]
    y_half = 0.5 * (y[:-1] + y[1:])
    u_half = 0.5 * (u[:-1] + u[1:])
    t_half = t[:-1] + 0.5 * dt
    ly, fy = _partials_y(problem, cost, y, u, t)
    ly_h, fy_h = _partials_y(problem, cost, y_half, u_half, t_half)

    e_term = terminal_cost(cost, ad.Dual(y[-1], 1.0))
    lam_terminal = float(e_term.tangent) if isinstance(e_term, ad.Dual) else 0.0

    lam = np.empty(n)
    lam[-1] = lam_terminal
    for i in range(n - 1, 0, -1):
        def rate(lam_val, ly_val, fy_val):
            return -(ly_val + lam_val * fy_val)

        k1 = rate(lam[i], ly[i], fy[i])
        k2 = rate(lam[i] - 0.5 * dt * k1, ly_h[i - 1], fy_h[i - 1])
        k3 = rate(lam[i] - 0.5 * dt * k2, ly_h[i - 1], fy_h[i - 1])
        k4 = rate(lam[i] - dt * k3, ly[i - 1], fy[i - 1])
        lam[i - 1] = lam[i] - dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(lam[i - 1]):
            raise NumericalError(f"adjoint diverged at t={t[i - 1]:.6g}")
    return lam


def _objective(problem, cost, control, grid):
    traj = rk4_solve(problem, control)
    return float(cost_value(cost, StateField(traj.y), control, grid)), traj


def dal_optimize(problem: ProblemSpec, cost: CostSpec, config: DalConfig = DalConfig(),
                 n_nodes=None, u0=None):
    """Adjoint-looped steepest descent on the control; returns (control, J history).

    Each iteration solves forward with RK4, backward for the adjoint, forms
    the gradient dL/du + lam df/du on the grid, and backtracks on J until
    sufficient decrease.  Stops when the gradient max-norm drops below the
    tolerance or the iteration budget runs out.
    """
    if problem.is_pde:
        raise ValueError("adjoint looping handles the ODE kinds only")
    n = n_nodes if n_nodes is not None else problem.n_time
    grid = make_grid(problem, n_time=n)
    u = np.zeros(n) if u0 is None else np.asarray(u0, dtype=np.float64).copy()
    control = ControlGrid(u, "time")
    j_value, traj = _objective(problem, cost, control, grid)
    history = [j_value]
    for _ in range(config.max_iter):
        lam = adjoint_solve(problem, cost, traj, control)
        lu, fu = _partials_u(problem, cost, traj.y, control.values, traj.t)
        grad = lu + lam * fu
        if float(np.max(np.abs(grad))) < config.grad_tol:
            break
        alpha = config.step_init
        g_sq = float(grad @ grad)
        for trial in range(config.backtrack_max + 1):
            if trial == config.backtrack_max:
                raise LineSearchError(
                    f"no descent after {config.backtrack_max} halvings "
                    f"(|grad|_inf={np.max(np.abs(grad)):.3g})"
                )
            candidate = ControlGrid(control.values - alpha * grad, "time")
            j_new, traj_new = _objective(problem, cost, candidate, grid)
            if j_new <= j_value - config.decrease_coeff * alpha * g_sq:
                control, j_value, traj = candidate, j_new, traj_new
                break
            alpha *= 0.5
        history.append(j_value)
    return control, history


# -- diffusion-reaction finite differences -------------------------------------

def fd_solve_diffusion_reaction(control_values, n_space=None, n_time=None,
                                horizon=1.0, diffusion=0.01, reaction=0.01
                                ) -> np.ndarray:
    """Crank-Nicolson diffusion with explicitly lagged reaction and source.

    ``control_values`` is u(x) on the uniform x-grid including both
    Dirichlet endpoints; the returned field has shape (n_time, n_space)
    with y(x, 0) = 0 and zero boundary columns.
    """
    u = np.asarray(control_values, dtype=np.float64)
    if n_space is None:
        n_space = u.size
    elif n_space != u.size:
        raise ValueError("control must be given on the spatial grid")
    if n_time is None:
        n_time = n_space
    if n_space < 3 or n_time < 2:
        raise ValueError("grid too coarse")
    dx = 1.0 / (n_space - 1)
    dt = horizon / (n_time - 1)
    m = n_space - 2  # interior nodes
    r = diffusion * dt / (2.0 * dx * dx)

    # banded LHS: (1 + 2r) on the diagonal, -r off-diagonal
    ab = np.zeros((3, m))
    ab[0, 1:] = -r
    ab[1, :] = 1.0 + 2.0 * r
    ab[2, :-1] = -r

    def lap_half(v):
        # r * (v_{j-1} - 2 v_j + v_{j+1}) with zero Dirichlet neighbours
        out = -2.0 * v
        out[1:] += v[:-1]
        out[:-1] += v[1:]
        return r * out

    field = np.zeros((n_time, n_space))
    u_int = u[1:-1]
    y = np.zeros(m)
    for step in range(1, n_time):
        rhs = y + lap_half(y) + dt * (u_int - reaction * y * y)
        y = solve_banded((1, 1), ab, rhs)
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"linear solve diverged at step {step}")
        field[step, 1:-1] = y
    return field


def make_tracking_target(length_scale, seed, n_space=100, n_time=100):
    """A GRF control and its solved field, used as a tracking target pair."""
    if length_scale <= 0:
        raise ValueError("length scale must be positive")
    x = np.linspace(0.0, 1.0, n_space)
    rng = np.random.default_rng(seed)
    u = sample_grf(length_scale, 1.0, x, rng)
    field = fd_solve_diffusion_reaction(u, n_space, n_time)
    return ControlGrid(u, "space"), StateField(field)
