"""Training-set generation: constant, linear, polynomial, and GRF controls.

Every function is drawn from a counter-based seed, so sets are reproducible
and individual functions could be generated in parallel without changing
the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .problems import ControlGrid, ProblemSpec, make_grid

FAMILIES = ("constant", "linear", "polynomial", "grf")

# families admitted per problem; the nonlinear ODE set is range-mapped afterwards
ALLOWED_FAMILIES = {
    "linear_ode": ("constant", "linear", "polynomial", "grf"),
    "nonlinear_ode": ("grf", "polynomial"),
    "diffusion_reaction": ("grf",),
}


@dataclass(frozen=True)
class FamilyConfig:
    """Sampling ranges for one function family."""

    family: str
    const_range: tuple = (-3.0, 3.0)
    slope_range: tuple = (-2.0, 2.0)
    intercept_range: tuple = (-2.0, 2.0)
    degrees: tuple = (3, 4, 5, 6, 7, 8)
    coeff_range: tuple = (-3.0, 3.0)
    length_scale_range: tuple = (0.02, 0.5)
    sigma: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "grf" and self.length_scale_range[0] <= 0:
            raise ValueError("GRF length scale must be positive")
        if self.family == "polynomial" and len(self.degrees) == 0:
            raise ValueError("polynomial family needs a non-empty degree set")


def default_families(problem_kind: str):
    """Per-problem family set with the standard sampling ranges."""
    if problem_kind == "linear_ode":
        return (
            FamilyConfig("constant"),
            FamilyConfig("linear"),
            FamilyConfig("polynomial", degrees=(3, 4, 5, 6, 7, 8)),
            FamilyConfig("grf", length_scale_range=(0.02, 0.5)),
        )
    if problem_kind == "nonlinear_ode":
        return (
            FamilyConfig("grf", length_scale_range=(0.05, 0.5)),
            FamilyConfig("polynomial", degrees=(1, 2, 3, 4, 5)),
        )
    if problem_kind == "diffusion_reaction":
        return (FamilyConfig("grf", length_scale_range=(0.02, 1.0)),)
    raise ValueError(f"unknown problem kind {problem_kind!r}")


@dataclass
class TrainingSet:
    """Controls drawn in equal proportion from the configured families."""

    controls: list
    seed: int

    def __len__(self):
        return len(self.controls)

    def matrix(self):
        return np.stack([c.values for c in self.controls])


def sample_grf(length_scale, sigma, nodes, rng):
    """Draw from the zero-mean GP with squared-exponential covariance on ``nodes``.

    Near-singular covariances at small length scales get an escalating
    diagonal jitter (1e-10, 1e-8, 1e-6) before giving up.
    """
    if length_scale <= 0 or sigma <= 0:
        raise ValueError("length scale and sigma must be positive")
    nodes = np.asarray(nodes, dtype=np.float64)
    diff = nodes[:, None] - nodes[None, :]
    cov = sigma**2 * np.exp(-(diff**2) / (2.0 * length_scale**2))
    z = rng.standard_normal(nodes.size)
    for jitter in (1e-10, 1e-8, 1e-6):
        try:
            chol = np.linalg.cholesky(cov + jitter * np.eye(nodes.size))
        except np.linalg.LinAlgError:
            continue
        return chol @ z
    raise NumericalError(
        f"GRF covariance not factorizable at length scale {length_scale} "
        "even with jitter 1e-6"
    )


def sample_function(cfg: FamilyConfig, nodes, rng, domain="time") -> ControlGrid:
    """One control drawn from ``cfg`` and evaluated on ``nodes``."""
    nodes = np.asarray(nodes, dtype=np.float64)
    if cfg.family == "constant":
        c = rng.uniform(*cfg.const_range)
        values = np.full(nodes.size, c)
    elif cfg.family == "linear":
        k = rng.uniform(*cfg.slope_range)
        b = rng.uniform(*cfg.intercept_range)
        values = k * nodes + b
    elif cfg.family == "polynomial":
        degree = int(rng.choice(cfg.degrees))
        coeffs = rng.uniform(*cfg.coeff_range, size=degree + 1)
        values = np.polynomial.polynomial.polyval(nodes, coeffs)
    else:
        l = rng.uniform(*cfg.length_scale_range)
        values = sample_grf(l, cfg.sigma, nodes, rng)
    return ControlGrid(values, domain)


def rescale_to_range(values, lo, hi):
    """Affine min-max map onto [lo, hi]; constant input maps to the midpoint."""
    if hi <= lo:
        raise ValueError("hi must exceed lo")
    values = np.asarray(values, dtype=np.float64)
    vmin, vmax = values.min(), values.max()
    if vmax == vmin:
        return np.full_like(values, 0.5 * (lo + hi))
    return lo + (values - vmin) * (hi - lo) / (vmax - vmin)


def build_training_set(
    problem: ProblemSpec, families, n_total, seed, n_nodes=None
) -> TrainingSet:
    """Equal per-family split; nonlinear-ODE functions are mapped into [-1.5, 1.5]."""
    allowed = ALLOWED_FAMILIES[problem.kind]
    for cfg in families:
        if cfg.family not in allowed:
            raise ValueError(
                f"family {cfg.family!r} is not admitted for {problem.kind}"
            )
    grid = make_grid(problem)
    nodes = grid.x if problem.is_pde else grid.t
    if n_nodes is not None:
        nodes = np.linspace(nodes[0], nodes[-1], n_nodes)
    domain = "space" if problem.is_pde else "time"
    n_fam = len(families)
    counts = [n_total // n_fam + (1 if i < n_total % n_fam else 0) for i in range(n_fam)]
    controls = []
    index = 0
    for cfg, count in zip(families, counts):
        for _ in range(count):
            rng = np.random.default_rng([seed, index])
            ctrl = sample_function(cfg, nodes, rng, domain)
            if problem.kind == "nonlinear_ode":
                ctrl = ControlGrid(rescale_to_range(ctrl.values, -1.5, 1.5), domain)
            controls.append(ctrl)
            index += 1
    return TrainingSet(controls, seed)


def save_training_set(training_set: TrainingSet, path):
    """Columnar text export, one function per row."""
    with open(path, "w") as fh:
        for ctrl in training_set.controls:
            fh.write(",".join(f"{v:.17g}" for v in ctrl.values) + "\n")
