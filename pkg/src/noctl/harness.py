"""Experiment orchestration: config loading, the command implementations,
report generation, and the self-check suite.

Every command is a pure function of (config, seed, input files): reruns
produce byte-identical outputs.  Wall-clock timings therefore go to stdout
only, never into output files.
"""

from __future__ import annotations

import copy
import json
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import control_opt as co
from . import network, refsolve, sampling, training
from .errors import ConfigError, NoctlError
from .presets import preset
from .problems import ControlGrid, ProblemSpec, StateField, make_grid

FMT = "{:.17g}"


def _fmt(x):
    return FMT.format(float(x))


# -- configuration ---------------------------------------------------------------

def _deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path):
    """Read a JSON config, expanding its preset if one is named."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    return resolve_config(raw)


def resolve_config(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "preset" in raw:
        name = raw.pop("preset")
        try:
            base = preset(name)
        except KeyError as exc:
            raise ConfigError(str(exc))
        raw = _deep_merge(base, raw)
    validate_config(raw)
    return raw


def validate_config(cfg):
    if cfg.get("schema") != 1:
        raise ConfigError("schema: must be 1")
    problem = cfg.get("problem")
    if problem not in ("linear_ode", "nonlinear_ode", "diffusion_reaction"):
        raise ConfigError(f"problem: unknown kind {problem!r}")
    model = cfg.get("model")
    if not isinstance(model, dict):
        raise ConfigError("model: missing block")
    has_ckpt = "checkpoint" in model
    has_train = "training" in model
    if has_ckpt == has_train:
        raise ConfigError("model: exactly one of 'checkpoint' or 'training' must be set")
    costs = cfg.get("costs", [1, 2, 3])
    for p in costs:
        if (problem, p) not in co._COST_BY_PROBLEM:
            raise ConfigError(f"costs: selector {p} is not defined for {problem}")
    pen = cfg.get("penalty", {})
    if pen.get("mu", 0.0) < 0 or pen.get("lambda", 0.0) < 0:
        raise ConfigError("penalty: mu and lambda must be non-negative")
    routines = cfg.get("routines", {})
    for name in routines:
        if name not in ("gd", "adam", "bfgs"):
            raise ConfigError(f"routines.{name}: unknown routine")
    ref = cfg.get("reference", {})
    if problem == "diffusion_reaction":
        if "tracking" not in ref:
            raise ConfigError("reference.tracking: required for the diffusion problem")
    elif "dal" not in ref:
        raise ConfigError("reference.dal: required for the ODE problems")
    if has_train:
        tr = model["training"]
        for key in ("sensors", "hidden", "depth", "out", "n_functions", "epochs",
                    "batch_size", "lr"):
            if key not in tr:
                raise ConfigError(f"model.training.{key}: missing")


def problem_from_config(cfg) -> ProblemSpec:
    sensors = _sensor_count(cfg)
    if cfg["problem"] == "diffusion_reaction":
        return ProblemSpec("diffusion_reaction", n_time=sensors, n_space=sensors)
    return ProblemSpec(cfg["problem"], n_time=sensors)


def _sensor_count(cfg):
    model = cfg["model"]
    if "training" in model:
        return int(model["training"]["sensors"])
    ckpt = network.load_checkpoint(model["checkpoint"])
    return ckpt.m


def _routine_config(cfg, name):
    block = cfg["routines"][name]
    return co.RoutineConfig(
        routine=name,
        iterations=int(block["iterations"]),
        lr=float(block.get("lr", 0.01)),
    )


# -- output plumbing ---------------------------------------------------------------

def _prepare_out(out_dir, filenames, force):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clashes = [name for name in filenames if (out / name).exists()]
    if clashes and not force:
        raise ConfigError(
            f"refusing to overwrite {', '.join(sorted(clashes))} in {out} "
            "(pass --force)"
        )
    return out


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _write_control(path, control):
    nodes = np.linspace(0.0, 1.0, len(control))
    _write_csv(
        path,
        ["node", "value"],
        [[_fmt(n), _fmt(v)] for n, v in zip(nodes, control.values)],
    )


def _read_control(path, domain):
    values = np.loadtxt(path, delimiter=",", skiprows=1, usecols=1)
    return ControlGrid(values, domain)


def _write_field(path, grid, field):
    rows = []
    for i, t in enumerate(grid.t):
        for j, x in enumerate(grid.x):
            rows.append([_fmt(x), _fmt(t), _fmt(field[i, j])])
    _write_csv(path, ["x", "t", "value"], rows)


def _read_field(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    n_space = np.unique(data[:, 0]).size
    n_time = np.unique(data[:, 1]).size
    return data[:, 2].reshape(n_time, n_space)


# -- commands -----------------------------------------------------------------------

def cmd_train(cfg, out_dir, force=False):
    """Train per the config's training block; writes checkpoint and loss history."""
    if "training" not in cfg["model"]:
        raise ConfigError("model.training: cmd_train needs a training block")
    out = _prepare_out(out_dir, ["checkpoint.bin", "train_history.csv"], force)
    problem = problem_from_config(cfg)
    tr = cfg["model"]["training"]
    seed = int(cfg.get("seed", 0))

    families = sampling.default_families(problem.kind)
    tset = sampling.build_training_set(problem, families, int(tr["n_functions"]), seed)

    branch = network.NetworkSpec(tr["kind"], int(tr["sensors"]), int(tr["hidden"]),
                                 int(tr["depth"]), int(tr["out"]))
    qdim = 2 if problem.is_pde else 1
    trunk = network.NetworkSpec(tr["kind"], qdim, int(tr["hidden"]),
                                int(tr["depth"]), int(tr["out"]))
    model = network.DeepOnetModel(
        branch, trunk, network.init_params(branch, seed),
        network.init_params(trunk, seed + 1),
    )
    config = training.TrainConfig(
        epochs=int(tr["epochs"]), batch_size=int(tr["batch_size"]), lr=float(tr["lr"]),
        lr_step=tr.get("lr_step"), lr_gamma=tr.get("lr_gamma"), seed=seed,
    )
    t0 = time.perf_counter()
    trained, history = training.train(model, problem, tset, config)
    elapsed = time.perf_counter() - t0

    network.save_checkpoint(trained, out / "checkpoint.bin")
    _write_csv(
        out / "train_history.csv",
        ["epoch", "total", "physics", "ic", "bc", "lr"],
        [
            [str(r["epoch"])] + [_fmt(r[k]) for k in ("total", "physics", "ic", "bc", "lr")]
            for r in history
        ],
    )
    last = history[-1]
    print(
        f"trained {problem.kind}: total={last['total']:.3e} "
        f"physics={last['physics']:.3e} ic={last['ic']:.3e} bc={last['bc']:.3e} "
        f"({elapsed:.1f}s)"
    )
    return trained, history


def _reference_names(cfg):
    if cfg["problem"] == "diffusion_reaction":
        names = []
        for p in cfg.get("costs", [1, 2, 3]):
            names += [f"target_u_p{p}.csv", f"target_y_p{p}.csv"]
        return names
    return [f"reference_p{p}.csv" for p in cfg.get("costs", [1, 2, 3])]


def cmd_reference(cfg, out_dir, force=False):
    """Reference controls: adjoint-looped solutions for the ODEs, GRF tracking
    targets for the diffusion problem."""
    out = _prepare_out(out_dir, _reference_names(cfg), force)
    problem = problem_from_config(cfg)
    costs = cfg.get("costs", [1, 2, 3])
    if problem.is_pde:
        block = cfg["reference"]["tracking"]
        scales = block.get("length_scales", [0.25, 0.35, 0.5])
        seed = int(block.get("seed", 7))
        grid = make_grid(problem)
        for p in costs:
            u_ref, field = refsolve.make_tracking_target(
                scales[p - 1], [seed, p], n_space=problem.space_points,
                n_time=problem.n_time,
            )
            _write_control(out / f"target_u_p{p}.csv", u_ref)
            _write_field(out / f"target_y_p{p}.csv", grid, field.values)
            print(f"target p={p}: length scale {scales[p - 1]}")
    else:
        block = cfg["reference"]["dal"]
        dal_cfg = refsolve.DalConfig(
            step_init=float(block.get("step_init", 1.0)),
            max_iter=int(block.get("max_iter", 10000)),
            grad_tol=float(block.get("grad_tol", 1e-8)),
        )
        for p in costs:
            cost = co.cost_for(problem.kind, p)
            control, history = refsolve.dal_optimize(problem, cost, dal_cfg)
            _write_control(out / f"reference_p{p}.csv", control)
            print(f"reference p={p}: J={history[-1]:.6g} after {len(history) - 1} steps")
    return out


def _load_model(cfg, out_dir):
    model_block = cfg["model"]
    if "checkpoint" in model_block:
        path = model_block["checkpoint"]
    else:
        path = Path(out_dir) / "checkpoint.bin"
    return network.load_checkpoint(path)


def _load_reference(cfg, out_dir, p):
    out = Path(out_dir)
    if cfg["problem"] == "diffusion_reaction":
        u_ref = _read_control(out / f"target_u_p{p}.csv", "space")
        target = StateField(_read_field(out / f"target_y_p{p}.csv"))
        return u_ref, target
    return _read_control(out / f"reference_p{p}.csv", "time"), None


def cmd_solve(cfg, out_dir, routines=("gd", "adam", "bfgs"), force=False):
    """Run the optimizer for each requested routine and cost; emit result rows."""
    problem = problem_from_config(cfg)
    costs = cfg.get("costs", [1, 2, 3])
    names = [f"results_{problem.kind}.csv"]
    for routine in routines:
        for p in costs:
            names += [f"control_{routine}_p{p}.csv", f"history_{routine}_p{p}.csv"]
    out = _prepare_out(out_dir, names, force)
    model = _load_model(cfg, out_dir)
    pen = cfg.get("penalty", {})
    penalty = co.PenaltyConfig(float(pen.get("mu", 0.0)), float(pen.get("lambda", 0.0)))

    rows = []
    for p in costs:
        u_ref, target = _load_reference(cfg, out_dir, p)
        cost = co.cost_for(problem.kind, p, target=target)
        for routine in routines:
            rconf = _routine_config(cfg, routine)
            t0 = time.perf_counter()
            try:
                control, history = co.optimize_control(model, problem, cost, penalty, rconf)
            except NoctlError as exc:
                print(f"p={p} {routine}: failed ({exc}); continuing")
                continue
            elapsed = time.perf_counter() - t0
            mse, sd = co.mse_report(control, u_ref)
            last = history[-1]
            rows.append(
                [problem.kind, routine, str(p), _fmt(mse), _fmt(sd),
                 str(len(history) - 1), _fmt(last["J_mu"])]
            )
            _write_control(out / f"control_{routine}_p{p}.csv", control)
            _write_csv(
                out / f"history_{routine}_p{p}.csv",
                ["iter", "J_mu", "cost", "penalty", "reg", "grad_norm"],
                [
                    [str(r["iter"])] + [
                        _fmt(r[k]) for k in ("J_mu", "cost", "penalty", "reg", "grad_norm")
                    ]
                    for r in history
                ],
            )
            print(
                f"p={p} {routine}: mse={mse:.3e} sd={sd:.3e} "
                f"J_mu={last['J_mu']:.6g} ({elapsed:.1f}s)"
            )
    _write_csv(
        out / f"results_{problem.kind}.csv",
        ["problem", "routine", "cost", "mse", "sd", "iterations", "final_J_mu"],
        rows,
    )
    return rows


def cmd_sweep(cfg, out_dir, mu_set=None, lambda_set=None, force=False):
    """ADAM over the (mu, lambda) grid for one cost; one history file per cell."""
    problem = problem_from_config(cfg)
    sweep = cfg.get("sweep", {})
    mu_set = sweep.get("mu", [0.0, 0.1, 1.0, 10.0, 100.0]) if mu_set is None else mu_set
    lambda_set = (
        sweep.get("lambda", [0.0, 0.1, 1.0, 10.0]) if lambda_set is None else lambda_set
    )
    p = int(sweep.get("cost", 1))
    names = ["sweep.csv"] + [
        f"sweep_hist_mu{_num_tag(m)}_lam{_num_tag(l)}.csv"
        for m in mu_set
        for l in lambda_set
    ]
    out = _prepare_out(out_dir, names, force)
    model = _load_model(cfg, out_dir)
    u_ref, target = _load_reference(cfg, out_dir, p)
    cost = co.cost_for(problem.kind, p, target=target)
    rconf = co.RoutineConfig(
        "adam", iterations=int(sweep.get("iterations", 2000)),
        lr=float(sweep.get("lr", 0.1)),
    )
    rows = []
    for mu in mu_set:
        for lam in lambda_set:
            penalty = co.PenaltyConfig(float(mu), float(lam))
            try:
                control, history = co.optimize_control(model, problem, cost, penalty, rconf)
            except NoctlError as exc:
                rows.append([_fmt(mu), _fmt(lam), "failed", "", "", "", "", ""])
                print(f"mu={mu} lambda={lam}: failed ({exc})")
                continue
            last = history[-1]
            mse, sd = co.mse_report(control, u_ref)
            rows.append(
                [_fmt(mu), _fmt(lam), _fmt(last["J_mu"]), _fmt(last["cost"]),
                 _fmt(last["penalty"]), _fmt(last["reg"]),
                 _fmt(last["mean_residual"]), _fmt(mse)]
            )
            _write_csv(
                out / f"sweep_hist_mu{_num_tag(mu)}_lam{_num_tag(lam)}.csv",
                ["iter", "J_mu", "cost", "penalty", "reg", "grad_norm"],
                [
                    [str(r["iter"])] + [
                        _fmt(r[k]) for k in ("J_mu", "cost", "penalty", "reg", "grad_norm")
                    ]
                    for r in history
                ],
            )
            print(f"mu={mu} lambda={lam}: residual={last['mean_residual']:.3e} mse={mse:.3e}")
    _write_csv(
        out / "sweep.csv",
        ["mu", "lambda", "J_mu", "cost", "penalty", "reg", "mean_residual", "mse"],
        rows,
    )
    return rows


def _num_tag(x):
    return _fmt(x).replace(".", "p").replace("-", "m")


def cmd_report(result_dir, out_dir=None, force=False):
    """Aggregate results_*.csv into the problems x routines x costs table."""
    result_dir = Path(result_dir)
    files = sorted(result_dir.glob("results_*.csv"))
    if not files:
        raise ConfigError(f"no results_*.csv files in {result_dir}")
    rows = []
    for path in files:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            for line in fh:
                rows.append(dict(zip(header, line.strip().split(","))))
    out = _prepare_out(out_dir or result_dir, ["report.csv", "report.txt"], force)

    # per (problem, cost) cell, mark the routine with the smallest mse
    best = {}
    for row in rows:
        key = (row["problem"], row["cost"])
        mse = float(row["mse"])
        if key not in best or mse < best[key][1]:
            best[key] = (row["routine"], mse)
    report_rows = []
    for row in rows:
        key = (row["problem"], row["cost"])
        marked = "1" if best[key][0] == row["routine"] else "0"
        report_rows.append(
            [row["problem"], row["routine"], row["cost"], row["mse"], row["sd"], marked]
        )
    _write_csv(out / "report.csv",
               ["problem", "routine", "cost", "mse", "sd", "best"], report_rows)

    lines = ["MSE (+/- SD) per problem, routine, and cost; * marks the cell minimum", ""]
    problems = sorted({r["problem"] for r in rows})
    for problem in problems:
        lines.append(problem)
        costs = sorted({r["cost"] for r in rows if r["problem"] == problem})
        for routine in ("gd", "adam", "bfgs"):
            cells = []
            for p in costs:
                match = [
                    r for r in rows
                    if r["problem"] == problem and r["routine"] == routine and r["cost"] == p
                ]
                if not match:
                    cells.append("p=%s: -" % p)
                    continue
                r = match[0]
                star = "*" if best[(problem, p)][0] == routine else " "
                cells.append(
                    f"p={p}: {float(r['mse']):.3e} (+/- {float(r['sd']):.1e}){star}"
                )
            lines.append(f"  {routine:<5} " + "  ".join(cells))
        lines.append("")
    with open(out / "report.txt", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return report_rows


# -- self checks ----------------------------------------------------------------------

def cmd_check(_corrupt_gradient=False):
    """Fast oracle suite; returns a list of (name, passed, detail) and prints it."""
    results = []

    def record(name, passed, detail):
        results.append((name, passed, detail))
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")

    # reverse-mode gradients vs central differences on random tanh nets
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        w1 = rng.normal(size=(4, 8)) / 2.0
        w2 = rng.normal(size=8) / 2.0
        x0 = rng.normal(size=4)

        def prog(x):
            return ad.tanh(x @ w1) @ w2

        err = ad.fd_check(prog, x0, 1e-5)
        if _corrupt_gradient:
            err += 1.0
        worst = max(worst, err)
    record("autodiff-fd", worst < 1e-6, f"max rel err {worst:.2e}")

    # RK4 convergence order on the linear closed form
    problem = ProblemSpec("linear_ode")
    errs = []
    for n in (11, 21, 41):
        traj = rk4_zero_control(problem, n)
        errs.append(np.max(np.abs(traj.y - np.exp(-traj.t))))
    order = np.log2(errs[0] / errs[1])
    record("rk4-order", order >= 3.9, f"empirical order {order:.2f}")

    # adjoint-looped control vs the closed-loop feedback oracle
    cost = co.cost_for("linear_ode", 1)
    control, _ = refsolve.dal_optimize(problem, cost, refsolve.DalConfig(max_iter=4000))
    u_star = riccati_control(problem, control.values.size)
    mse = float(np.mean((control.values - u_star) ** 2))
    record("dal-vs-feedback", mse < 1e-6, f"mse {mse:.2e}")

    # diffusion solver self-convergence under refinement
    ratio = pde_refinement_ratio()
    record("pde-self-convergence", ratio >= 3.0, f"error ratio {ratio:.2f}")

    # trapezoid exact on affine integrands
    t = np.linspace(0.0, 1.0, 37)
    exact = abs(co.trapezoid(2.0 * t + 1.0, t[1] - t[0]) - 2.0)
    record("trapezoid-affine", exact < 1e-12, f"abs err {exact:.2e}")

    return results


def rk4_zero_control(problem, n):
    return refsolve.rk4_solve(problem, ControlGrid(np.zeros(n), "time"))


def riccati_control(problem, n):
    """Closed-loop optimal control for the linear problem with quadratic cost.

    Solves p' = p^2 + 2p - 1 backward from p(T) = 0 with RK4, then the
    closed-loop state y' = -(1 + p) y forward, giving u* = -p y.
    """
    t = np.linspace(0.0, problem.horizon, n)
    dt = t[1] - t[0]
    p = np.empty(n)
    p[-1] = 0.0
    rate = lambda v: v * v + 2.0 * v - 1.0
    for i in range(n - 1, 0, -1):
        k1 = rate(p[i])
        k2 = rate(p[i] - 0.5 * dt * k1)
        k3 = rate(p[i] - 0.5 * dt * k2)
        k4 = rate(p[i] - dt * k3)
        p[i - 1] = p[i] - dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    y = np.empty(n)
    y[0] = problem.y0
    p_half = 0.5 * (p[:-1] + p[1:])
    for i in range(n - 1):
        f = lambda yv, pv: -(1.0 + pv) * yv
        k1 = f(y[i], p[i])
        k2 = f(y[i] + 0.5 * dt * k1, p_half[i])
        k3 = f(y[i] + 0.5 * dt * k2, p_half[i])
        k4 = f(y[i] + dt * k3, p[i + 1])
        y[i + 1] = y[i] + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return -p * y


def pde_refinement_ratio():
    """||y_h - y_h/2|| / ||y_h/2 - y_h/4|| on a shared coarse subgrid."""
    fields = []
    for refine in (1, 2, 4):
        n = 50 * refine + 1
        x = np.linspace(0.0, 1.0, n)
        u = 2.0 * np.sin(2.0 * np.pi * x) + x * (1.0 - x)
        field = refsolve.fd_solve_diffusion_reaction(u, n, n)
        fields.append(field[::refine, ::refine][-1])
    d1 = np.max(np.abs(fields[0] - fields[1]))
    d2 = np.max(np.abs(fields[1] - fields[2]))
    return float(d1 / d2)
