"""Split conformal prediction with the ``1 - p(y|x)`` score."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .model import ModelParams, predict_proba

TIE_NOISE = 1e-9


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    sorted_scores: np.ndarray
    q_hat: float
    alpha: float
    n: int
    nearest_index: int
    nearest_point: tuple  # (features, label)
    nearest_id: int = -1

    @property
    def is_trivial(self) -> bool:
        return math.isinf(self.q_hat)


def quantile_rank(n: int, alpha: float) -> int:
    """1-based rank ``ceil((1 - alpha)(n + 1))`` of the conformal quantile."""
    # round away float fuzz such as 0.9 * 10 = 9.000000000000002
    return int(math.ceil(round((1.0 - alpha) * (n + 1), 9)))


def conformal_quantile(scores, alpha: float) -> float:
    """Finite-sample quantile of ``scores``; ``inf`` when the rank exceeds n."""
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    rank = quantile_rank(scores.size, alpha)
    return float(scores[rank - 1]) if rank <= scores.size else math.inf


def scores_all_labels(params: ModelParams, X) -> np.ndarray:
    """Score matrix ``1 - p(y|x)`` for every row and every label."""
    return 1.0 - predict_proba(params, X)


def true_label_scores(params: ModelParams, data: Dataset) -> np.ndarray:
    probs = predict_proba(params, data.features)
    return 1.0 - probs[np.arange(len(data)), data.labels]


def nonconformity(params: ModelParams, x, y: int) -> float:
    if not 0 <= y < params.n_classes:
        raise ValueError(f"label {y} outside [0, {params.n_classes})")
    return float(1.0 - predict_proba(params, x)[0, y])


def calibrate_scores(scores, alpha: float, tie_noise_seed: int | None = None):
    """Quantile from raw scores; returns ``(sorted_scores, q_hat, nearest_index)``.

    Tie-breaking noise only perturbs the copy that is sorted for the rank.
    The nearest point is chosen on raw scores, lowest index first.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    raw = np.asarray(scores, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("empty calibration set")
    ranked = raw
    if tie_noise_seed is not None:
        ranked = raw + np.random.default_rng(tie_noise_seed).uniform(0.0, TIE_NOISE, raw.size)
    sorted_scores = np.sort(ranked)
    rank = quantile_rank(raw.size, alpha)
    if rank <= raw.size:
        q_hat = float(sorted_scores[rank - 1])
        nearest = int(np.argmin(np.abs(raw - q_hat)))
    else:
        q_hat = math.inf
        nearest = int(np.argmax(raw))
    return sorted_scores, q_hat, nearest


def calibrate(params: ModelParams, calib: Dataset, alpha: float, tie_noise_seed: int | None = None) -> CalibrationResult:
    if len(calib) == 0:
        raise ValueError("empty calibration set")
    sorted_scores, q_hat, i = calibrate_scores(true_label_scores(params, calib), alpha, tie_noise_seed)
    return CalibrationResult(
        sorted_scores=sorted_scores,
        q_hat=q_hat,
        alpha=float(alpha),
        n=len(calib),
        nearest_index=i,
        nearest_point=(calib.features[i].copy(), int(calib.labels[i])),
        nearest_id=int(calib.ids[i]),
    )


def in_set(scores, q_hat: float):
    """The single membership test: closed threshold ``score <= q_hat``."""
    return np.asarray(scores) <= q_hat


def prediction_sets(params: ModelParams, X, calib: CalibrationResult) -> np.ndarray:
    """Boolean membership matrix, one row per input, one column per label."""
    return in_set(scores_all_labels(params, X), calib.q_hat)


def prediction_set(params: ModelParams, x, calib: CalibrationResult) -> set[int]:
    row = prediction_sets(params, np.atleast_2d(x), calib)[0]
    return set(np.flatnonzero(row).tolist())


def empirical_coverage(params: ModelParams, calib: CalibrationResult, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("empty dataset")
    sets = prediction_sets(params, data.features, calib)
    return float(np.mean(sets[np.arange(len(data)), data.labels]))


def save_calibration(result: CalibrationResult, path) -> None:
    q = "inf" if result.is_trivial else repr(result.q_hat)
    Path(path).write_text(
        f"alpha={result.alpha!r}\nn={result.n}\nq_hat={q}\nnearest_id={result.nearest_id}\n"
    )


def load_calibration_record(path) -> dict:
    rec = dict(line.split("=", 1) for line in Path(path).read_text().splitlines() if line)
    return {
        "alpha": float(rec["alpha"]),
        "n": int(rec["n"]),
        "q_hat": math.inf if rec["q_hat"] == "inf" else float(rec["q_hat"]),
        "nearest_id": int(rec["nearest_id"]),
    }
