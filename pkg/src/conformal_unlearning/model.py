"""Small feed-forward softmax classifier with hand-written backprop."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, SplitBundle

ACTIVATIONS = ("tanh",)
MAGIC = b"CPMU-PARAMS-1\n"


class NumericError(ArithmeticError):
    """Raised when a forward/backward pass produces non-finite values."""


@dataclass(frozen=True, eq=False)
class ModelParams:
    layer_weights: tuple
    layer_biases: tuple
    activation: str = "tanh"

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.layer_weights)
        bs = tuple(np.array(b, dtype=np.float64).reshape(-1) for b in self.layer_biases)
        if not ws or len(ws) != len(bs):
            raise ValueError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} does not match bias {b.shape}")
            if i and ws[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[0]} != {ws[i - 1].shape[1]}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "layer_weights", ws)
        object.__setattr__(self, "layer_biases", bs)

    @property
    def n_dims(self) -> int:
        return self.layer_weights[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.layer_weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.layer_weights, self.layer_biases):
            out += [w, b]
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ValueError(f"expected {self.size} values, got {flat.size}")
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(flat[pos : pos + a.size].reshape(a.shape))
            pos += a.size
        return ModelParams(tuple(arrays[0::2]), tuple(arrays[1::2]), self.activation)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def equals(self, other: "ModelParams") -> bool:
        return self.activation == other.activation and len(self.arrays()) == len(other.arrays()) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid weight_decay/epochs/batch_size")


def init_params(n_dims: int, n_classes: int, hidden: Sequence[int] = (64,), seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    rng = np.random.default_rng(seed)
    widths = [n_dims, *hidden, n_classes]
    ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bs.append(rng.uniform(-bound, bound, size=fan_out))
    return ModelParams(tuple(ws), tuple(bs))


# ---------------------------------------------------------------------------
# forward / backward


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_x(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.n_dims:
        raise ValueError(f"expected {params.n_dims} features, got {x.shape[-1]}")
    return x


def _forward(params: ModelParams, X: np.ndarray):
    acts = [X]
    h = X
    n_layers = len(params.layer_weights)
    for i, (w, b) in enumerate(zip(params.layer_weights, params.layer_biases)):
        z = h @ w + b
        h = z if i == n_layers - 1 else np.tanh(z)
        if not np.isfinite(h).all():
            raise NumericError(f"non-finite activations in layer {i}")
        acts.append(h)
    return h, acts


def logits(params: ModelParams, X) -> np.ndarray:
    return _forward(params, _check_x(params, X))[0]


def embed(params: ModelParams, X) -> np.ndarray:
    """Penultimate-layer activations (input to the classifier head)."""
    return _forward(params, _check_x(params, X))[1][-2]


def predict_proba(params: ModelParams, X) -> np.ndarray:
    X = _check_x(params, X)
    return softmax(_forward(params, np.atleast_2d(X))[0])


def forward_probs(params: ModelParams, x) -> np.ndarray:
    x = _check_x(params, x)
    return predict_proba(params, x[None, :])[0] if x.ndim == 1 else predict_proba(params, x)


def backprop(params: ModelParams, acts: list[np.ndarray], dlogits: np.ndarray) -> ModelParams:
    """Gradient of a scalar w.r.t. all parameters given d(scalar)/d(logits)."""
    gws, gbs = [], []
    delta = dlogits
    for i in range(len(params.layer_weights) - 1, -1, -1):
        gws.append(acts[i].T @ delta)
        gbs.append(delta.sum(axis=0))
        if i:
            delta = (delta @ params.layer_weights[i].T) * (1.0 - acts[i] ** 2)
        if not (np.isfinite(gws[-1]).all() and np.isfinite(gbs[-1]).all()):
            raise NumericError(f"non-finite gradient in layer {i}")
    return ModelParams(tuple(reversed(gws)), tuple(reversed(gbs)), params.activation)


class CrossEntropy:
    """Mean cross-entropy; the default loss for :func:`loss_and_grad`."""

    def __call__(self, probs: np.ndarray, labels: np.ndarray):
        n = labels.shape[0]
        p_true = probs[np.arange(n), labels]
        loss = -np.mean(np.log(np.maximum(p_true, np.finfo(float).tiny)))
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return float(loss), d / n


def loss_and_grad(params: ModelParams, batch: Dataset, loss="cross_entropy"):
    """Return ``(loss, grad)`` with ``grad`` shaped like ``params``.

    ``loss`` is ``"cross_entropy"`` or any callable mapping
    ``(probs, labels) -> (value, d value / d logits)``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    fn = CrossEntropy() if loss == "cross_entropy" else loss
    out, acts = _forward(params, _check_x(params, batch.features))
    value, dlogits = fn(softmax(out), batch.labels)
    if not np.isfinite(value):
        raise NumericError("non-finite loss")
    return value, backprop(params, acts, dlogits)


# ---------------------------------------------------------------------------
# training


def accuracy(params: ModelParams, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("empty dataset")
    # argmax picks the lowest index on ties
    pred = logits(params, data.features).argmax(axis=1)
    return float(np.mean(pred == data.labels))


class SGD:
    """SGD with heavy-ball momentum and coupled weight decay, on flat vectors."""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = None

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.weight_decay:
            grad = grad + self.weight_decay * theta
        if self.momentum:
            self.velocity = grad if self.velocity is None else self.momentum * self.velocity + grad
            grad = self.velocity
        return theta - self.lr * grad


def iterate_minibatches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def train(init: ModelParams, data: Dataset, cfg: TrainConfig, loss_trace: list | None = None) -> ModelParams:
    """Mini-batch SGD on mean cross-entropy.

    If ``loss_trace`` is given, the full-data loss before training and
    after every epoch is appended to it.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if cfg.epochs == 0:
        return init
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    theta = init.flatten().copy()
    params = init
    if loss_trace is not None:
        loss_trace.append(loss_and_grad(init, data)[0])
    for _ in range(cfg.epochs):
        for idx in iterate_minibatches(len(data), cfg.batch_size, rng):
            _, g = loss_and_grad(params, data.take(idx))
            theta = opt.step(theta, g.flatten())
            params = init.unflatten(theta)
        if loss_trace is not None:
            loss_trace.append(loss_and_grad(params, data)[0])
    return params


def retrain_from_scratch(
    bundle: SplitBundle, cfg: TrainConfig, hidden: Sequence[int] = (64,)
) -> ModelParams:
    """Fresh seeded init trained only on the retained part of the training pool."""
    retain = bundle.train_retain
    if len(retain) == 0:
        raise ValueError("train_retain is empty")
    init = init_params(retain.n_dims, retain.n_classes, hidden, seed=cfg.seed)
    return train(init, retain, cfg)


# ---------------------------------------------------------------------------
# checkpoints


def save_params(params: ModelParams, path) -> None:
    """Magic header, activation tag, then per array its shape and float64 data."""
    arrays = params.arrays()
    tag = params.activation.encode()
    chunks = [MAGIC, struct.pack("<I", len(tag)), tag, struct.pack("<I", len(arrays))]
    for a in arrays:
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
    for a in arrays:
        chunks.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError("not a CPMU-PARAMS-1 checkpoint")
    pos = len(MAGIC)

    def read(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, raw, pos)
        pos += struct.calcsize(fmt)
        return vals

    (tag_len,) = read("<I")
    tag = raw[pos : pos + tag_len].decode()
    pos += tag_len
    (count,) = read("<I")
    shapes = []
    for _ in range(count):
        (ndim,) = read("<I")
        shapes.append(read(f"<{ndim}I"))
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * size
    if pos != len(raw):
        raise ValueError("trailing bytes in checkpoint")
    return ModelParams(tuple(arrays[0::2]), tuple(arrays[1::2]), tag)
