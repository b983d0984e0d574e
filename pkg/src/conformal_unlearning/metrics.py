"""Conformal unlearning metrics: ECF@c, EuCF@d, H(CE) and certificate estimates.

Prediction sets are passed around as boolean membership matrices of shape
``(n_points, n_classes)`` together with the true labels.  A metric whose
conditioning population is empty is returned as ``None`` (rendered as
``undefined``).
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .conformal import calibrate, prediction_sets, true_label_scores
from .data import Dataset, SplitBundle
from .model import ModelParams, accuracy

UNDEFINED = None

# short names used in report keys, in report order
SUBSETS = {
    "Tf": "train_forget",
    "Tr": "train_retain",
    "Df": "unlearn_forget",
    "Dr": "unlearn_retain",
    "Vf": "test_forget",
    "Vr": "test_retain",
}
FORGET_ROLE = ("Tf", "Df", "Vf")
RETAIN_ROLE = ("Tr", "Dr", "Vr")


def _covered(sets: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return sets[np.arange(labels.shape[0]), labels]


def set_sizes(sets: np.ndarray) -> np.ndarray:
    return np.asarray(sets, dtype=bool).sum(axis=1)


def ecf_at_c(sets, labels, c: int):
    sets, labels = np.asarray(sets, dtype=bool), np.asarray(labels)
    small = set_sizes(sets) <= c
    if not small.any():
        return UNDEFINED
    return float(np.mean(_covered(sets, labels)[small]))


def eucf_at_d(sets, labels, d: int):
    sets, labels = np.asarray(sets, dtype=bool), np.asarray(labels)
    small = set_sizes(sets) <= d
    if not small.any():
        return UNDEFINED
    return float(np.mean(~_covered(sets, labels)[small]))


def coverage(sets, labels) -> float:
    sets, labels = np.asarray(sets, dtype=bool), np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty dataset")
    return float(np.mean(_covered(sets, labels)))


def inefficiency_rate(sets, threshold: int) -> float:
    """Fraction of sets strictly larger than ``threshold``."""
    sizes = set_sizes(np.asarray(sets, dtype=bool))
    if sizes.size == 0:
        raise ValueError("no prediction sets")
    return float(np.mean(sizes > threshold))


def harmonic_mean(values) -> float:
    values = list(values)
    if not values:
        raise ValueError("harmonic mean of nothing")
    if any(v is UNDEFINED or v == 0 for v in values):
        return 0.0
    return len(values) / sum(1.0 / v for v in values)


@dataclass
class MetricsReport:
    accuracy: dict = field(default_factory=dict)
    ecf: dict = field(default_factory=dict)  # subset -> value at c
    eucf: dict = field(default_factory=dict)  # subset -> value at d
    inefficiency: dict = field(default_factory=dict)  # (subset, threshold) -> rate
    h_ce: float = 0.0
    beta_hat: float | None = None
    alpha_used: float = 0.1
    c: int = 0
    d: int = 0
    q_hat: float = math.inf
    tt_seconds: float = 0.0

    def to_dict(self, include_time: bool = True) -> dict:
        out = {"alpha": self.alpha_used, "c": self.c, "d": self.d, "q_hat": self.q_hat}
        for k, v in self.accuracy.items():
            out[f"acc.{k}"] = v
        for k, v in self.ecf.items():
            out[f"ecf.{k}.c"] = v
        for k, v in self.eucf.items():
            out[f"eucf.{k}.d"] = v
        for (k, t), v in self.inefficiency.items():
            out[f"ineff.{k}.{t}"] = v
        out["h_ce"] = self.h_ce
        out["beta_hat"] = self.beta_hat
        if include_time:
            out["tt_s"] = round(self.tt_seconds, 2)
        return out

    def to_text(self, include_time: bool = True) -> str:
        return dumps_flat(self.to_dict(include_time))


def _fmt(v) -> str:
    if v is UNDEFINED:
        return "undefined"
    if isinstance(v, float) and math.isinf(v):
        return '"inf"'
    return json.dumps(v)


def dumps_flat(record: dict) -> str:
    """JSON-style object, one key per line, ``undefined`` as a bare literal."""
    body = ",\n".join(f"  {json.dumps(k)}: {_fmt(v)}" for k, v in record.items())
    return "{\n" + body + "\n}\n"


def loads_flat(text: str) -> dict:
    text = re.sub(r":\s*undefined\b", ": null", text)
    rec = json.loads(text)
    return {k: (math.inf if v == "inf" else v) for k, v in rec.items()}


# ---------------------------------------------------------------------------
# evaluation over a bundle


def _subset_sets(params, calib, data: Dataset):
    return prediction_sets(params, data.features, calib), data.labels


def evaluate_all(
    params: ModelParams,
    bundle: SplitBundle,
    alpha: float,
    c: int,
    d: int | None = None,
    tt_seconds: float = 0.0,
    tie_noise_seed: int | None = None,
) -> MetricsReport:
    """Six-subset report calibrated on the held-out test calibration set.

    ECF@c is reported for retain-role subsets and EuCF@d for forget-role
    subsets.  Subsets that are empty in the bundle (e.g. the unseen forget
    set of an instance split) are left out of the report and of H(CE).
    """
    d = c if d is None else d
    cal = calibrate(params, bundle.test_calib, alpha, tie_noise_seed)
    rep = MetricsReport(alpha_used=float(alpha), c=int(c), d=int(d), q_hat=cal.q_hat, tt_seconds=tt_seconds)
    components = []
    for short, name in SUBSETS.items():
        data = getattr(bundle, name)
        if data is None or len(data) == 0:
            continue
        rep.accuracy[short] = accuracy(params, data)
        sets, labels = _subset_sets(params, cal, data)
        if short in RETAIN_ROLE:
            rep.ecf[short] = ecf_at_c(sets, labels, c)
            rep.inefficiency[(short, int(c))] = inefficiency_rate(sets, c)
            components.append(rep.ecf[short])
        else:
            rep.eucf[short] = eucf_at_d(sets, labels, d)
            rep.inefficiency[(short, int(d))] = inefficiency_rate(sets, d)
            components.append(rep.eucf[short])
            if short == "Df":
                rep.beta_hat = 1.0 - coverage(sets, labels)
    rep.h_ce = harmonic_mean(components) if components else 0.0
    return rep


@dataclass
class DefinitionCheck:
    def1_holds: bool
    def2_holds: bool
    estimates: dict


def check_conformal_definition(
    params: ModelParams,
    bundle: SplitBundle,
    alpha: float,
    beta: float,
    c: int,
    d: int,
    tie_noise_seed: int | None = None,
) -> DefinitionCheck:
    """Frequency estimates of the (alpha, beta) and (c, d)-efficient criteria on D_unlearn."""
    if not 0 <= alpha <= beta <= 1:
        raise ValueError("need 0 <= alpha <= beta <= 1")
    cal = calibrate(params, bundle.test_calib, alpha, tie_noise_seed)
    r_sets, r_lab = _subset_sets(params, cal, bundle.unlearn_retain)
    f_sets, f_lab = _subset_sets(params, cal, bundle.unlearn_forget)
    est = {
        "retain_coverage": coverage(r_sets, r_lab) if r_lab.size else UNDEFINED,
        "forget_uncoverage": 1.0 - coverage(f_sets, f_lab) if f_lab.size else UNDEFINED,
        "retain_ecf": ecf_at_c(r_sets, r_lab, c) if r_lab.size else UNDEFINED,
        "forget_eucf": eucf_at_d(f_sets, f_lab, d) if f_lab.size else UNDEFINED,
        "zeta_c": inefficiency_rate(r_sets, c) if r_lab.size else UNDEFINED,
        "eta_d": inefficiency_rate(f_sets, d) if f_lab.size else UNDEFINED,
    }
    n_f, n_r = f_lab.size, r_lab.size
    est["p_forget"] = n_f / (n_f + n_r) if n_f + n_r else UNDEFINED
    if est["p_forget"] is not UNDEFINED and est["forget_uncoverage"] is not UNDEFINED:
        est["tradeoff_lhs"] = est["p_forget"] * est["forget_uncoverage"]
    else:
        est["tradeoff_lhs"] = UNDEFINED

    def ok(value, bound):
        return value is not UNDEFINED and value >= bound

    return DefinitionCheck(
        def1_holds=ok(est["retain_coverage"], 1 - alpha) and ok(est["forget_uncoverage"], beta),
        def2_holds=ok(est["retain_ecf"], 1 - alpha) and ok(est["forget_eucf"], beta),
        estimates=est,
    )


def prob_forget_score_above(forget_scores, retain_scores) -> float:
    """Exact fraction of (forget, retain) pairs with forget score >= retain score."""
    f = np.asarray(forget_scores, dtype=np.float64)
    r = np.sort(np.asarray(retain_scores, dtype=np.float64))
    if f.size == 0 or r.size == 0:
        raise ValueError("both score sets must be non-empty")
    # for each forget score, number of retain scores <= it
    counts = np.searchsorted(r, f, side="right")
    return float(counts.sum() / (f.size * r.size))


def estimate_proposition1(params: ModelParams, forget: Dataset, retain: Dataset) -> float:
    if len(forget) == 0 or len(retain) == 0:
        raise ValueError("forget and retain sets must be non-empty")
    return prob_forget_score_above(true_label_scores(params, forget), true_label_scores(params, retain))
