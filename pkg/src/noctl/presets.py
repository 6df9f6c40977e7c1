"""Named experiment presets.

``desk-*`` presets train in minutes on one CPU core; ``paper-*`` presets
carry the full-scale published settings (large function sets, long
schedules) and are only practical on serious hardware or with patience.
"""

import copy

_TABLE6 = {
    "linear_ode": {
        "penalty": {"mu": 100.0, "lambda": 0.2},
        "routines": {
            "gd": {"lr": 0.2, "iterations": 2000},
            "adam": {"lr": 0.01, "iterations": 2000},
            "bfgs": {"iterations": 2000},
        },
        "sweep": {"lr": 0.1, "iterations": 2000},
    },
    "nonlinear_ode": {
        "penalty": {"mu": 20.0, "lambda": 0.2},
        "routines": {
            "gd": {"lr": 0.1, "iterations": 5000},
            "adam": {"lr": 0.01, "iterations": 5000},
            "bfgs": {"iterations": 5000},
        },
        "sweep": {"lr": 0.1, "iterations": 5000},
    },
    "diffusion_reaction": {
        "penalty": {"mu": 20.0, "lambda": 0.5},
        "routines": {
            "gd": {"lr": 0.02, "iterations": 2000},
            "adam": {"lr": 0.02, "iterations": 2000},
            "bfgs": {"iterations": 2000},
        },
        "sweep": {"lr": 0.1, "iterations": 2000},
    },
}

_SWEEP_GRID = {"mu": [0.0, 0.1, 1.0, 10.0, 100.0], "lambda": [0.0, 0.1, 1.0, 10.0]}


def _base(problem):
    cfg = {
        "schema": 1,
        "problem": problem,
        "seed": 0,
        "costs": [1, 2, 3],
        "penalty": dict(_TABLE6[problem]["penalty"]),
        "routines": copy.deepcopy(_TABLE6[problem]["routines"]),
        "sweep": {**_SWEEP_GRID, **_TABLE6[problem]["sweep"], "cost": 1},
    }
    if problem == "diffusion_reaction":
        cfg["reference"] = {"tracking": {"length_scales": [0.25, 0.35, 0.5], "seed": 7}}
    else:
        cfg["reference"] = {"dal": {"step_init": 1.0, "max_iter": 10000, "grad_tol": 1e-8}}
    return cfg


PRESETS = {
    "desk-linear": {
        **_base("linear_ode"),
        "model": {
            "training": {
                "kind": "fc", "sensors": 100, "hidden": 64, "depth": 3, "out": 64,
                "n_functions": 2000, "epochs": 300, "batch_size": 100,
                "lr": 1e-3, "lr_step": 100, "lr_gamma": 0.5,
            }
        },
    },
    "desk-nonlinear": {
        **_base("nonlinear_ode"),
        "model": {
            "training": {
                "kind": "modified_fc", "sensors": 100, "hidden": 64, "depth": 4,
                "out": 64, "n_functions": 2000, "epochs": 400, "batch_size": 100,
                "lr": 1e-3, "lr_step": 150, "lr_gamma": 0.5,
            }
        },
    },
    "desk-diffusion": {
        **_base("diffusion_reaction"),
        "model": {
            "training": {
                "kind": "fc", "sensors": 100, "hidden": 64, "depth": 3, "out": 64,
                "n_functions": 1000, "epochs": 150, "batch_size": 50,
                "lr": 1e-3, "lr_step": 60, "lr_gamma": 0.5,
            }
        },
    },
    "paper-linear": {
        **_base("linear_ode"),
        "model": {
            "training": {
                "kind": "fc", "sensors": 100, "hidden": 200, "depth": 4, "out": 200,
                "n_functions": 100000, "epochs": 1000, "batch_size": 100,
                "lr": 1e-4, "lr_step": 200, "lr_gamma": 0.5,
            }
        },
    },
    "paper-nonlinear": {
        **_base("nonlinear_ode"),
        "model": {
            "training": {
                "kind": "modified_fc", "sensors": 100, "hidden": 200, "depth": 5,
                "out": 200, "n_functions": 100000, "epochs": 1100, "batch_size": 100,
                "lr": 1e-4, "lr_step": None, "lr_gamma": None,
            }
        },
    },
    "paper-diffusion": {
        **_base("diffusion_reaction"),
        "model": {
            "training": {
                "kind": "fc", "sensors": 100, "hidden": 200, "depth": 4, "out": 200,
                "n_functions": 10000, "epochs": 2500, "batch_size": 50,
                "lr": 1e-4, "lr_step": None, "lr_gamma": None,
            }
        },
    },
}


def preset(name):
    if name not in PRESETS:
        known = ", ".join(sorted(PRESETS))
        raise KeyError(f"unknown preset {name!r}; available: {known}")
    return copy.deepcopy(PRESETS[name])
