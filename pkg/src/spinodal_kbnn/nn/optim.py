"""Adam, the staircase learning-rate schedule and a full-batch/mini-batch training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..utils import make_rng
from . import autodiff as ad


@dataclass(frozen=True)
class LRSchedule:
    lr0: float = 1e-3
    v_decay: float = 0.7
    n_decay: int = 100
    staircase: bool = True

    def __post_init__(self):
        if not (self.lr0 > 0 and 0 < self.v_decay <= 1 and self.n_decay >= 1):
            raise ValueError("need lr0 > 0, 0 < v_decay <= 1, n_decay >= 1")


def lr_at(schedule: LRSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    expo = step // schedule.n_decay if schedule.staircase else step / schedule.n_decay
    return schedule.lr0 * schedule.v_decay**expo


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: OptimizerState, params: dict, grads: dict, lr: float) -> dict:
    """One bias-corrected Adam update; returns new parameter arrays (inputs untouched)."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=float)
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = np.asarray(p, dtype=float) - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    lr0: float = 1e-3
    v_decay: float = 0.7
    n_decay: int = 100
    batch_size: int | None = None
    seed: int = 0

    def schedule(self) -> LRSchedule:
        return LRSchedule(self.lr0, self.v_decay, self.n_decay)


class NonFiniteLoss(FloatingPointError):
    pass


def train(network, loss_fn, n_samples: int, config: TrainConfig, val_fn=None, callback=None) -> dict:
    """Minimize ``loss_fn(rows)`` (a scalar Tensor) over the network's trainable parameters.

    The learning rate steps once per epoch. Mini-batch order comes from a seeded
    generator, so training is reproducible bit for bit.
    """
    sched = config.schedule()
    state = OptimizerState()
    rng = make_rng(config.seed)
    names = network.trainable_names()
    history = {"epoch": [], "lr": [], "train_loss": [], "val_loss": []}
    bs = config.batch_size or n_samples
    for epoch in range(config.epochs):
        lr = lr_at(sched, epoch)
        order = np.arange(n_samples) if bs >= n_samples else rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, bs):
            rows = order[start : start + bs]
            loss = loss_fn(rows)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch} (lr={lr:g})")
            grads = ad.grad(loss, [network.params[n] for n in names])
            new = adam_step(
                state, {n: network.params[n].data for n in names}, {n: g.data for n, g in zip(names, grads)}, lr
            )
            for n in names:
                network.params[n] = ad.Tensor(new[n], requires_grad=True)
            total += value * len(rows)
        history["epoch"].append(epoch)
        history["lr"].append(lr)
        history["train_loss"].append(total / n_samples)
        if val_fn is not None:
            with ad.no_grad():
                history["val_loss"].append(float(val_fn().data))
        if callback is not None:
            callback(epoch, history)
    return history


def mse_loss_fn(network, x, y, aux=None, regularize=True):
    """Scaled-label MSE closure over row subsets, including the input-layer L2 term."""
    x = np.asarray(x, dtype=float)
    z = network.label_scaling.apply(np.asarray(y, dtype=float).reshape(len(x), -1))
    aux = None if aux is None else np.asarray(aux, dtype=float)

    def fn(rows=None):
        rows = np.arange(len(x)) if rows is None else rows
        out = network.forward(x[rows], None if aux is None else aux[rows])
        loss = ad.square(out - z[rows]).mean()
        return loss + network.regularization() if regularize else loss

    return fn


def fit_regressor(network, x, y, config: TrainConfig, aux=None, x_val=None, y_val=None, aux_val=None):
    """Plain MSE training (normalization stats must already be set on the network)."""
    fn = mse_loss_fn(network, x, y, aux)
    val = None
    if x_val is not None and len(x_val):
        vfn = mse_loss_fn(network, x_val, y_val, aux_val, regularize=False)
        val = lambda: vfn()  # noqa: E731
    return train(network, fn, len(x), config, val_fn=val)
