"""Physics-informed training: ADAM on the operator parameters, no solution data.

The loss is the mean equation residual over a mini-batch of sampled
controls plus initial/boundary violations, all with unit weights.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import network
from .errors import NonFiniteError, TrainingDivergedError
from .problems import training_graph


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    lr_step: int | None = None
    lr_gamma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.lr_step is not None:
            if self.lr_gamma is None or not (0.0 < self.lr_gamma <= 1.0):
                raise ValueError("a scheduled run needs lr_gamma in (0, 1]")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n_params: int) -> AdamState:
    return AdamState(np.zeros(n_params), np.zeros(n_params))


def adam_step(state: AdamState, params, grads, lr):
    """One bias-corrected ADAM update; returns (new_params, new_state)."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient, and moment shapes must agree")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=t)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Step decay lr * gamma^(epoch // step), or the constant rate."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if config.lr_step is None:
        return config.lr
    return config.lr * config.lr_gamma ** (epoch // config.lr_step)


def _batch_loss(model, problem, u_batch):
    """(total, physics, ic, bc) floats plus flat gradient of the total."""
    tape = ad.Tape()
    graph = training_graph(problem, model, u_batch, tape)
    total = graph["physics"] + graph["ic"] + graph["bc"]
    physics = float(graph["physics"].value)
    ic = float(graph["ic"].value)
    bc = float(graph["bc"].value) if isinstance(graph["bc"], ad.Var) else float(graph["bc"])
    grads = tape.gradients(total, graph["leaves"])
    flat_grad = np.concatenate([g.ravel() for g in grads])
    return float(total.value), physics, ic, bc, flat_grad


def training_loss(model, problem, batch):
    """(total, physics, ic, bc) over a batch of controls; total = physics + ic + bc."""
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    u_batch = np.stack([c.values for c in batch])
    tape = ad.Tape()
    graph = training_graph(problem, model, u_batch, tape)
    physics = float(graph["physics"].value)
    ic = float(graph["ic"].value)
    bc = float(graph["bc"].value) if isinstance(graph["bc"], ad.Var) else float(graph["bc"])
    return physics + ic + bc, physics, ic, bc


def train(model, problem, training_set, config: TrainConfig):
    """Seeded mini-batch loop; returns (trained model, per-epoch history rows).

    History rows are dicts with keys epoch/total/physics/ic/bc/lr.  A
    non-finite loss aborts with the last end-of-epoch parameters retained
    on the raised :class:`TrainingDivergedError`.
    """
    if len(training_set) == 0:
        raise ValueError("training set must be non-empty")
    if config.batch_size > len(training_set):
        raise ValueError("batch size exceeds the training-set size")
    u_all = training_set.matrix()
    n = u_all.shape[0]
    flat = network.flatten_model(model)
    state = adam_init(flat.size)
    rng = np.random.default_rng(config.seed)
    history = []
    last_good = flat.copy()
    current = model.copy()
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            current = network.model_with_flat(model, flat)
            try:
                _, physics, ic, bc, grad = _batch_loss(current, problem, u_all[idx])
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite loss in epoch {epoch}: {exc}",
                    model=network.model_with_flat(model, last_good),
                    history=history,
                ) from exc
            sums += idx.size * np.array([physics, ic, bc])
            flat, state = adam_step(state, flat, grad, lr)
        physics, ic, bc = sums / n
        history.append(
            {
                "epoch": epoch,
                "total": physics + ic + bc,
                "physics": physics,
                "ic": ic,
                "bc": bc,
                "lr": lr,
            }
        )
        last_good = flat.copy()
    return network.model_with_flat(model, flat), history
