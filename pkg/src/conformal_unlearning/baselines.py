"""Reference unlearners: retraining (RT), random relabeling (AMN) and the loss-gap method.

Baselines only read ``unlearn_forget``, ``unlearn_retain`` and the
forget-like part of ``unlearn_calib``; the held-out test subsets are
never touched.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, SplitBundle
from .model import (
    SGD,
    CrossEntropy,
    ModelParams,
    TrainConfig,
    _forward,
    backprop,
    retrain_from_scratch,
    softmax,
    train,
)

METHODS = ("rt", "amn", "nabla_tau")


@dataclass
class BaselineConfig:
    method: str = "amn"
    alpha_mix: float = 0.5
    epochs: int = 5
    learning_rate: float = 0.01
    batch_size: int = 64
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not 0 <= self.alpha_mix <= 1:
            raise ValueError("alpha_mix must lie in [0, 1]")
        if self.epochs < 0 or not self.learning_rate > 0 or self.batch_size < 1:
            raise ValueError("invalid epochs/learning_rate/batch_size")


def rt_unlearn(bundle: SplitBundle, train_cfg: TrainConfig, hidden: Sequence[int] = (64,)) -> ModelParams:
    return retrain_from_scratch(bundle, train_cfg, hidden)


def random_relabel(labels: np.ndarray, n_classes: int, rng) -> np.ndarray:
    """Uniform label different from the current one, for every entry."""
    if n_classes < 2:
        raise ValueError("relabeling needs at least two classes")
    offset = rng.integers(1, n_classes, size=labels.shape[0])
    return (labels + offset) % n_classes


def amn_unlearn(theta_o: ModelParams, bundle: SplitBundle, cfg: BaselineConfig) -> ModelParams:
    forget, retain = bundle.unlearn_forget, bundle.unlearn_retain
    if len(forget) == 0 or len(retain) == 0:
        raise ValueError("unlearn_forget and unlearn_retain must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    relabeled = Dataset(forget.features, random_relabel(forget.labels, forget.n_classes, rng), forget.ids, forget.n_classes)
    data = relabeled.concat(retain)
    tcfg = TrainConfig(cfg.learning_rate, cfg.momentum, 0.0, cfg.epochs, cfg.batch_size, cfg.seed)
    return train(theta_o, data, tcfg)


def nabla_tau_loss_and_grad(
    params: ModelParams, val_batch: Dataset, forget_batch: Dataset, retain_batch: Dataset, alpha_mix: float
):
    """``a * relu(L_val - L_forget) + (1 - a) * L_retain`` with mean cross-entropies."""
    for name, b in (("validation", val_batch), ("forget", forget_batch), ("retain", retain_batch)):
        if len(b) == 0:
            raise ValueError(f"empty {name} batch")
    ce = CrossEntropy()
    losses, grads = [], []
    for b in (val_batch, forget_batch, retain_batch):
        out, acts = _forward(params, b.features)
        value, dlogits = ce(softmax(out), b.labels)
        losses.append(value)
        grads.append(backprop(params, acts, dlogits).flatten())
    l_v, l_f, l_r = losses
    gap = l_v - l_f
    total = alpha_mix * max(gap, 0.0) + (1 - alpha_mix) * l_r
    grad = (1 - alpha_mix) * grads[2]
    if gap > 0:
        grad = grad + alpha_mix * (grads[0] - grads[1])
    return total, params.unflatten(grad)


def nabla_tau_unlearn(
    theta_o: ModelParams, bundle: SplitBundle, validation: Dataset | None, cfg: BaselineConfig
) -> ModelParams:
    """Push forget loss above a forget-like validation loss while fitting retain data.

    ``validation`` defaults to ``bundle.calib_forget``.  One batch of each
    set per step; shorter sets cycle.
    """
    validation = bundle.calib_forget if validation is None else validation
    forget, retain = bundle.unlearn_forget, bundle.unlearn_retain
    for name, ds in (("validation", validation), ("unlearn_forget", forget), ("unlearn_retain", retain)):
        if ds is None or len(ds) == 0:
            raise ValueError(f"{name} is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(cfg.learning_rate, cfg.momentum)
    theta = theta_o.flatten().copy()
    params = theta_o
    bs = cfg.batch_size
    steps = max(-(-len(ds) // bs) for ds in (validation, forget, retain))
    for _ in range(cfg.epochs):
        streams = []
        for ds in (validation, forget, retain):
            order = rng.permutation(len(ds))
            chunks = [order[i : i + bs] for i in range(0, len(ds), bs)]
            streams.append([chunks[i % len(chunks)] for i in range(steps)])
        for vi, fi, ri in zip(*streams):
            _, g = nabla_tau_loss_and_grad(params, validation.take(vi), forget.take(fi), retain.take(ri), cfg.alpha_mix)
            theta = opt.step(theta, g.flatten())
            params = theta_o.unflatten(theta)
    return params
