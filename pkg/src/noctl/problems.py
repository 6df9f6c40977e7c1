"""The three governed systems: two scalar ODEs and a diffusion-reaction PDE.

Residuals, initial/boundary losses, and discretization grids live here,
both as plain numeric functions and as tape-graph builders shared by the
training loop and the control optimizer.

The PDE is diffusive in space: y_t = D y_xx - k y^2 + u(x) with homogeneous
Dirichlet data in x and zero initial state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import network

PROBLEM_KINDS = ("linear_ode", "nonlinear_ode", "diffusion_reaction")


@dataclass(frozen=True)
class ProblemSpec:
    """One governed system with its domain, coefficients, and grid resolution."""

    kind: str
    horizon: float = 1.0
    y0: float = 1.0
    diffusion: float = 0.01
    reaction: float = 0.01
    n_time: int = 100
    n_space: int | None = None

    def __post_init__(self):
        if self.kind not in PROBLEM_KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.n_time < 2:
            raise ValueError("need at least 2 grid nodes")

    @property
    def is_pde(self):
        return self.kind == "diffusion_reaction"

    @property
    def space_points(self):
        return self.n_space if self.n_space is not None else self.n_time

    @property
    def sensor_count(self):
        """Length of the discretized control: time nodes for ODEs, space nodes for the PDE."""
        return self.space_points if self.is_pde else self.n_time


@dataclass(frozen=True)
class TimeGrid:
    t: np.ndarray

    @property
    def dt(self):
        return float(self.t[1] - self.t[0])

    @property
    def n(self):
        return self.t.size

    def queries(self):
        return self.t[:, None]


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Tensor-product grid; field arrays are (n_time, n_space), row k*n_space+j is (x_j, t_k)."""

    x: np.ndarray
    t: np.ndarray

    @property
    def dx(self):
        return float(self.x[1] - self.x[0])

    @property
    def dt(self):
        return float(self.t[1] - self.t[0])

    def queries(self):
        tt, xx = np.meshgrid(self.t, self.x, indexing="ij")
        return np.column_stack([xx.ravel(), tt.ravel()])

    def edge_queries(self):
        """Query blocks for x=0, x=1 (all t) and t=0 (all x)."""
        x0 = np.column_stack([np.zeros_like(self.t), self.t])
        x1 = np.column_stack([np.full_like(self.t, self.x[-1]), self.t])
        t0 = np.column_stack([self.x, np.zeros_like(self.x)])
        return x0, x1, t0


def make_grid(problem: ProblemSpec, n_time=None, n_space=None):
    """Uniform nodes including both endpoints."""
    n_time = problem.n_time if n_time is None else n_time
    if n_time < 2:
        raise ValueError("need at least 2 grid nodes")
    t = np.linspace(0.0, problem.horizon, n_time)
    if not problem.is_pde:
        return TimeGrid(t)
    n_space = problem.space_points if n_space is None else n_space
    if n_space < 2:
        raise ValueError("need at least 2 spatial nodes")
    return SpaceTimeGrid(np.linspace(0.0, 1.0, n_space), t)


@dataclass
class ControlGrid:
    """A control function discretized at the sensor locations."""

    values: np.ndarray
    domain: str = "time"  # "time" for ODEs, "space" for the PDE control u(x)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("control values must be a 1-d vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("control values must be finite")
        if self.domain not in ("time", "space"):
            raise ValueError(f"unknown control domain {self.domain!r}")

    def __len__(self):
        return self.values.size


@dataclass
class StateField:
    """State values on the evaluation grid, with any requested derivative fields."""

    values: np.ndarray
    derivs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


# -- dynamics and residuals ---------------------------------------------------

def dynamics_rhs(problem: ProblemSpec, y, u, t=0.0):
    """Right-hand side f(y, u, t) of the ODE kinds; generic over value types."""
    if problem.kind == "linear_ode":
        return u - y
    if problem.kind == "nonlinear_ode":
        return 2.5 * (y * u - y - ad.square(u))
    raise ValueError("dynamics_rhs is defined for the ODE kinds only")


def residual(problem: ProblemSpec, y, y_dot, u, t=0.0, y_xx=None):
    """Squared pointwise defect of the governing equation."""
    if problem.is_pde:
        if y_xx is None:
            raise ValueError("the diffusion-reaction residual needs y_xx")
        return ad.square(
            y_dot - problem.diffusion * y_xx + problem.reaction * ad.square(y) - u
        )
    return ad.square(y_dot - dynamics_rhs(problem, y, u, t))


def _check_control(problem, model, control):
    if len(control) != model.m:
        raise ValueError(
            f"control has {len(control)} values, model expects {model.m} sensors"
        )


def mean_residual(problem: ProblemSpec, model, control: ControlGrid) -> float:
    """Mean squared equation defect of the surrogate over the full grid."""
    _check_control(problem, model, control)
    u = control.values
    if problem.is_pde:
        grid = make_grid(problem, n_space=len(control))
        f = model.field(u, grid.queries(), which=("y", "dt", "dxx"))
        u_full = np.tile(u, grid.t.size)
        r = residual(problem, f["y"], f["dt"], u_full, y_xx=f["dxx"])
    else:
        grid = make_grid(problem, n_time=len(control))
        f = model.field(u, grid.queries(), which=("y", "dt"))
        r = residual(problem, f["y"], f["dt"], u, grid.t)
    return float(np.mean(r))


def ic_bc_loss(problem: ProblemSpec, model, control: ControlGrid) -> float:
    """Mean squared initial/boundary violation (mean over all edge nodes)."""
    _check_control(problem, model, control)
    u = control.values
    if not problem.is_pde:
        y0 = model.eval_queries(u, np.array([[0.0]]))[0]
        return float((y0 - problem.y0) ** 2)
    grid = make_grid(problem, n_space=len(control))
    edges = np.vstack(grid.edge_queries())
    y_edges = model.eval_queries(u, edges)
    return float(np.mean(y_edges**2))


# -- tape-graph builders -------------------------------------------------------

def training_graph(problem: ProblemSpec, model, u_batch, tape):
    """Physics/ic/bc loss graph for a batch of controls, parameters trainable.

    Returns {"physics", "ic", "bc", "leaves"}; "bc" is 0.0 for the ODEs.
    """
    u_batch = np.asarray(u_batch, dtype=np.float64)
    bdict, tdict, bias, leaves = network.param_vars(model, tape, trainable=True)
    trunk_fn = lambda q: network.net_forward(model.trunk, tdict, q)
    bo = network.net_forward(model.branch, bdict, u_batch)
    n_batch = u_batch.shape[0]

    if problem.is_pde:
        grid = make_grid(problem, n_space=u_batch.shape[1])
        tables = network.query_derivatives(trunk_fn, grid.queries(), ("dt", "dxx"))
        y = bo @ ad.transpose(tables["y"]) + bias
        y_t = bo @ ad.transpose(tables["dt"])
        y_xx = bo @ ad.transpose(tables["dxx"])
        u_full = np.tile(u_batch, (1, grid.t.size))
        r = residual(problem, y, y_t, u_full, y_xx=y_xx)
        physics = ad.vsum(r) / float(r.shape[0] * r.shape[1])
        x0, x1, t0 = grid.edge_queries()
        y_t0 = bo @ ad.transpose(trunk_fn(t0)) + bias
        ic = ad.vsum(ad.square(y_t0)) / float(n_batch * t0.shape[0])
        y_x0 = bo @ ad.transpose(trunk_fn(x0)) + bias
        y_x1 = bo @ ad.transpose(trunk_fn(x1)) + bias
        bc = (ad.vsum(ad.square(y_x0)) + ad.vsum(ad.square(y_x1))) / float(
            n_batch * (x0.shape[0] + x1.shape[0])
        )
    else:
        grid = make_grid(problem, n_time=u_batch.shape[1])
        queries = grid.queries()
        out = trunk_fn(ad.Dual(queries, np.ones_like(queries)))
        y = bo @ ad.transpose(out.primal) + bias
        y_t = bo @ ad.transpose(out.tangent)
        r = residual(problem, y, y_t, u_batch, grid.t)
        physics = ad.vsum(r) / float(r.shape[0] * r.shape[1])
        y0 = bo @ ad.transpose(trunk_fn(np.array([[0.0]]))) + bias
        ic = ad.vsum(ad.square(y0 - problem.y0)) / float(n_batch)
        bc = 0.0
    return {"physics": physics, "ic": ic, "bc": bc, "leaves": leaves}


def trunk_tables(problem: ProblemSpec, model, grid):
    """Numeric trunk output/derivative tables on the collocation grid.

    During control optimization the parameters are frozen, so these tables
    are constants; only the branch pass depends on the control.
    """
    params = model.trunk_params.as_dict()
    trunk_fn = lambda q: network.net_forward(model.trunk, params, q)
    which = ("dt", "dxx") if problem.is_pde else ("dt",)
    return network.query_derivatives(trunk_fn, grid.queries(), which)


def surrogate_graph(problem: ProblemSpec, model, tape, u_var, tables, grid):
    """State field and mean residual of the surrogate, differentiable in u.

    Returns {"y", "mean_residual"}; for the PDE "y" has the (n_time, n_space)
    field shape, for the ODEs it is the trajectory on the time grid.
    """
    bdict = {name: tape.const(arr) for name, arr in model.branch_params.entries}
    bo = network.net_forward(model.branch, bdict, u_var)
    y = tables["y"] @ bo + model.bias
    y_t = tables["dt"] @ bo
    if problem.is_pde:
        shape = (grid.t.size, grid.x.size)
        y = ad.reshape(y, shape)
        y_t = ad.reshape(y_t, shape)
        y_xx = ad.reshape(tables["dxx"] @ bo, shape)
        r = residual(problem, y, y_t, u_var, y_xx=y_xx)
        mean_res = ad.vsum(r) / float(shape[0] * shape[1])
    else:
        r = residual(problem, y, y_t, u_var, grid.t)
        mean_res = ad.vsum(r) / float(grid.n)
    return {"y": y, "mean_residual": mean_res}
