"""Conformal-prediction machine unlearning (CPMU).

Starting from the original weights, each epoch recomputes the conformal
quantile on the unlearning calibration set and the softmax probability
``p_q`` of the calibration point whose score sits closest to it.  Mini-batch
gradient steps then maximise two sigmoid surrogates: retain points should
have ``p(y|x)`` above ``p_q`` and forget points below it.  A penalty on the
distance to the original weights keeps the model close to where it began.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .conformal import calibrate
from .data import Dataset, SplitBundle
from .model import SGD, ModelParams, NumericError, _forward, backprop, softmax

REG_NORMS = ("l2_squared", "l1")
DIRECTIONS = ("corrected", "as_written")
ANCHOR_STEPS = ("gradient", "proximal")


@dataclass
class CpmuConfig:
    alpha: float = 0.1
    delta: float = 1e-4
    gamma: float = 10.0
    lambda_reg: float = 1e-3
    reg_norm: str = "l2_squared"
    epochs: int = 6
    learning_rate: float = 0.5
    batch_size: int = 64
    loss_direction: str = "corrected"
    seed: int = 0
    # off by default: plain gradient steps; set to the base trainer's values to match it
    momentum: float = 0.0
    weight_decay: float = 0.0
    tie_noise: bool = True
    # "proximal" applies the anchor penalty in closed form after each step;
    # explicit gradient steps diverge once 2 * learning_rate * lambda_reg > 2
    anchor_step: str = "gradient"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.delta < 0 or self.lambda_reg < 0:
            raise ValueError("delta and lambda_reg must be non-negative")
        if self.reg_norm not in REG_NORMS:
            raise ValueError(f"reg_norm must be one of {REG_NORMS}")
        if self.loss_direction not in DIRECTIONS:
            raise ValueError(f"loss_direction must be one of {DIRECTIONS}")
        if self.anchor_step not in ANCHOR_STEPS:
            raise ValueError(f"anchor_step must be one of {ANCHOR_STEPS}")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("invalid epochs/batch_size/learning_rate")


@dataclass(frozen=True)
class SurrogateContext:
    p_q: float
    q_hat: float
    epoch: int = 0


def sigmoid_surrogate(u, gamma: float):
    """``1 / (1 + exp(-gamma u))`` without overflow."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    z = gamma * np.asarray(u, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def _arguments(p_u: np.ndarray, p_q: float, delta: float, role: str, direction: str):
    """Surrogate argument and its derivative w.r.t. ``p_u``."""
    m = 1.0 + delta
    if direction == "corrected":
        if role == "retain":
            return p_u - m * p_q, 1.0
        return p_q - m * p_u, -m
    if role == "retain":
        return m * p_q - p_u, -1.0
    return m * p_u - p_q, m


class SurrogateLoss:
    """Loss callable ``-mean(ell(arg))`` over one role, for :func:`model.loss_and_grad`."""

    def __init__(self, ctx: SurrogateContext, cfg: CpmuConfig, role: str):
        if role not in ("forget", "retain"):
            raise ValueError("role must be 'forget' or 'retain'")
        self.ctx, self.cfg, self.role = ctx, cfg, role

    def risk_terms(self, probs: np.ndarray, labels: np.ndarray):
        n = labels.shape[0]
        p_u = probs[np.arange(n), labels]
        arg, darg = _arguments(p_u, self.ctx.p_q, self.cfg.delta, self.role, self.cfg.loss_direction)
        ell = sigmoid_surrogate(arg, self.cfg.gamma)
        return p_u, np.atleast_1d(ell), darg

    def __call__(self, probs: np.ndarray, labels: np.ndarray):
        n = labels.shape[0]
        p_u, ell, darg = self.risk_terms(probs, labels)
        # d ell / d p_u, chained through the softmax: dp_u/dz = p_u (e_y - p)
        dl_dp = self.cfg.gamma * ell * (1.0 - ell) * darg
        coef = -dl_dp / n
        dlogits = -probs * (coef * p_u)[:, None]
        dlogits[np.arange(n), labels] += coef * p_u
        return -float(ell.mean()), dlogits


def surrogate_risks(
    params: ModelParams, forget_batch: Dataset, retain_batch: Dataset, ctx: SurrogateContext, cfg: CpmuConfig
) -> tuple[float, float]:
    if len(forget_batch) == 0 or len(retain_batch) == 0:
        raise ValueError("forget and retain batches must be non-empty")
    out = []
    for batch, role in ((forget_batch, "forget"), (retain_batch, "retain")):
        probs = softmax(_forward(params, batch.features)[0])
        _, ell, _ = SurrogateLoss(ctx, cfg, role).risk_terms(probs, batch.labels)
        out.append(float(ell.mean()))
    return out[0], out[1]


def regularizer(params: ModelParams, anchor: ModelParams, reg_norm: str = "l2_squared"):
    """Penalty on ``params - anchor`` and its (sub)gradient as a flat vector."""
    diff = params.flatten() - anchor.flatten()
    if reg_norm == "l2_squared":
        return float(diff @ diff), 2.0 * diff
    if reg_norm == "l1":
        return float(np.abs(diff).sum()), np.sign(diff)
    raise ValueError(f"unknown reg_norm {reg_norm!r}")


def anchor_prox(theta: np.ndarray, anchor: np.ndarray, step: float, reg_norm: str) -> np.ndarray:
    """argmin_x  step * R(x - anchor) + ||x - theta||^2 / 2."""
    if reg_norm == "l2_squared":
        return (theta + 2.0 * step * anchor) / (1.0 + 2.0 * step)
    if reg_norm == "l1":
        diff = theta - anchor
        return anchor + np.sign(diff) * np.maximum(np.abs(diff) - step, 0.0)
    raise ValueError(f"unknown reg_norm {reg_norm!r}")


def cpmu_loss_and_grad(
    params: ModelParams,
    anchor: ModelParams,
    forget_batch: Dataset,
    retain_batch: Dataset,
    ctx: SurrogateContext,
    cfg: CpmuConfig,
    parts: dict | None = None,
):
    """``-eps_f - eps_r + lambda * R(params - anchor)`` and its exact gradient.

    ``p_q`` in ``ctx`` is a constant here.  If ``parts`` is given it
    receives ``eps_f`` and ``eps_r``.
    """
    if params.size != anchor.size or any(
        a.shape != b.shape for a, b in zip(params.arrays(), anchor.arrays())
    ):
        raise ValueError("params and anchor have different shapes")
    if len(forget_batch) == 0 or len(retain_batch) == 0:
        raise ValueError("forget and retain batches must be non-empty")
    total = 0.0
    grad = np.zeros(params.size)
    for batch, role in ((forget_batch, "forget"), (retain_batch, "retain")):
        out, acts = _forward(params, batch.features)
        value, dlogits = SurrogateLoss(ctx, cfg, role)(softmax(out), batch.labels)
        total += value
        grad += backprop(params, acts, dlogits).flatten()
        if parts is not None:
            parts["eps_f" if role == "forget" else "eps_r"] = -value
    reg, reg_grad = regularizer(params, anchor, cfg.reg_norm)
    total += cfg.lambda_reg * reg
    grad += cfg.lambda_reg * reg_grad
    if not math.isfinite(total):
        raise NumericError("non-finite CPMU loss")
    return total, params.unflatten(grad)


@dataclass
class EpochRecord:
    epoch: int
    q_hat: float
    eps_f: float
    eps_r: float
    loss: float
    wall_ms: float
    timestamp: float = field(default=0.0, repr=False)


def _paired_batches(n_f: int, n_r: int, batch_size: int, rng):
    """Shuffle both sets; the shorter index stream cycles to match the longer."""
    steps = max(math.ceil(n_f / batch_size), math.ceil(n_r / batch_size))

    def stream(n):
        order = rng.permutation(n)
        chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
        return [chunks[i % len(chunks)] for i in range(steps)]

    return list(zip(stream(n_f), stream(n_r)))


def quantile_context(params: ModelParams, calib: Dataset, alpha: float, epoch: int, noise_seed: int | None):
    cal = calibrate(params, calib, alpha, noise_seed)
    return SurrogateContext(p_q=_p_true(params, calib, cal.nearest_index), q_hat=cal.q_hat, epoch=epoch)


def _p_true(params: ModelParams, data: Dataset, i: int) -> float:
    probs = softmax(_forward(params, data.features[i : i + 1])[0])[0]
    return float(probs[data.labels[i]])


def unlearn(theta_o: ModelParams, bundle: SplitBundle, cfg: CpmuConfig):
    """Run CPMU; returns ``(theta_u, trace)`` with one :class:`EpochRecord` per epoch."""
    forget, retain, calib = bundle.unlearn_forget, bundle.unlearn_retain, bundle.unlearn_calib
    for name, ds in (("unlearn_forget", forget), ("unlearn_retain", retain), ("unlearn_calib", calib)):
        if ds is None or len(ds) == 0:
            raise ValueError(f"{name} is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    anchor = theta_o.flatten()
    proximal = cfg.anchor_step == "proximal"
    theta = anchor.copy()
    params = theta_o
    trace: list[EpochRecord] = []
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        noise_seed = cfg.seed * 1000 + epoch if cfg.tie_noise else None
        ctx = quantile_context(params, calib, cfg.alpha, epoch, noise_seed)
        eps_f, eps_r, losses = [], [], []
        for b, (fi, ri) in enumerate(_paired_batches(len(forget), len(retain), cfg.batch_size, rng)):
            parts: dict = {}
            try:
                loss, g = cpmu_loss_and_grad(params, theta_o, forget.take(fi), retain.take(ri), ctx, cfg, parts)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
            g = g.flatten()
            if proximal:
                g = g - cfg.lambda_reg * regularizer(params, theta_o, cfg.reg_norm)[1]
                theta = anchor_prox(opt.step(theta, g), anchor, cfg.learning_rate * cfg.lambda_reg, cfg.reg_norm)
            else:
                theta = opt.step(theta, g)
            params = theta_o.unflatten(theta)
            eps_f.append(parts["eps_f"])
            eps_r.append(parts["eps_r"])
            losses.append(loss)
        end = time.perf_counter()
        trace.append(
            EpochRecord(epoch, ctx.q_hat, float(np.mean(eps_f)), float(np.mean(eps_r)),
                        float(np.mean(losses)), (end - start) * 1e3, end)
        )
    return params, trace


def format_trace(trace: list[EpochRecord]) -> str:
    lines = ["epoch\tq_hat\teps_f\teps_r\tloss\twall_ms"]
    for r in trace:
        lines.append(f"{r.epoch}\t{r.q_hat!r}\t{r.eps_f!r}\t{r.eps_r!r}\t{r.loss!r}\t{r.wall_ms:.3f}")
    return "\n".join(lines) + "\n"
