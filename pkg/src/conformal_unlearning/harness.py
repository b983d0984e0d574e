"""Seeded experiment runner and ablation sweeps.

Configs are flat ``key=value`` text with dotted sections, e.g.::

    method=cpmu
    train.epochs=20
    eval.c=1,5,10

Per seed the runner generates data, splits it, trains the base model,
applies the unlearning method and evaluates every ``(c, d)`` pair.  Metric
files never contain wall-clock values, so identical configs produce
byte-identical metric files; unlearning times go to ``timing.csv``.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import baselines, cpmu
from .data import (
    DEFAULT_FRACTIONS,
    POOL_ORDER,
    SCENARIOS,
    Dataset,
    SplitBundle,
    cut_pools,
    generate_mixture,
    split_class_wise,
    split_group_wise,
    split_instance_wise,
)
from .metrics import UNDEFINED, MetricsReport, evaluate_all
from .model import ModelParams, TrainConfig, embed, init_params, train

METHODS = ("cpmu", "rt", "amn", "nabla_tau", "none")
SWEEPS = ("c", "alpha", "lambda", "reg_norm")


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        self.key = key
        super().__init__(f"{key}: {msg}")


@dataclass
class ScenarioConfig:
    kind: str = "class_wise"
    forget: str = "auto"  # "auto" or comma-separated values
    n_forget: int = 1
    n_clusters: int = 20
    embedding: str = "model"  # "model" (penultimate layer) or "features"


@dataclass
class DataConfig:
    n_classes: int = 10
    n_dims: int = 8
    n_per_class: int = 600
    separation: float = 3.5


@dataclass
class EvalConfig:
    alpha: float = 0.1
    c_values: list = field(default_factory=lambda: [5])
    d_values: list | None = None  # None pairs each c with d = c

    def pairs(self) -> list[tuple[int, int]]:
        if self.d_values is None:
            return [(c, c) for c in self.c_values]
        return [(c, d) for c in self.c_values for d in self.d_values]


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    data: DataConfig = field(default_factory=DataConfig)
    fractions: dict = field(default_factory=lambda: dict(DEFAULT_FRACTIONS))
    hidden: tuple = (64,)
    train: TrainConfig = field(default_factory=TrainConfig)
    method: str = "cpmu"
    cpmu: cpmu.CpmuConfig = field(default_factory=cpmu.CpmuConfig)
    baseline: baselines.BaselineConfig = field(default_factory=baselines.BaselineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "results"

    def validate(self) -> "ExperimentConfig":
        if self.scenario.kind not in SCENARIOS:
            raise ConfigError("scenario.kind", f"must be one of {SCENARIOS}")
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {METHODS}")
        if not self.seeds:
            raise ConfigError("seeds", "must be non-empty")
        k = self.data.n_classes
        for key, vals in (("eval.c", self.eval.c_values), ("eval.d", self.eval.d_values or [])):
            if not vals and key == "eval.c":
                raise ConfigError(key, "must be non-empty")
            for v in vals:
                if not 0 <= v <= k:
                    raise ConfigError(key, f"{v} outside [0, {k}]")
        if not 0 < self.eval.alpha <= 1:
            raise ConfigError("eval.alpha", "must lie in (0, 1]")
        return self


# ---------------------------------------------------------------------------
# config text


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


_SECTIONS = {
    "scenario": ("scenario", ScenarioConfig),
    "data": ("data", DataConfig),
    "train": ("train", TrainConfig),
    "cpmu": ("cpmu", cpmu.CpmuConfig),
    "baseline": ("baseline", baselines.BaselineConfig),
}


def _coerce(key: str, raw: str, current):
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    flat = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        flat[key] = value
    return config_from_flat(flat)


def config_from_flat(flat: dict) -> ExperimentConfig:
    parts: dict[str, dict] = {name: {} for name in _SECTIONS}
    cfg = ExperimentConfig()
    ev = {}
    for key, raw in flat.items():
        raw = str(raw)
        section, _, name = key.partition(".")
        if section in _SECTIONS and name:
            attr, cls = _SECTIONS[section]
            defaults = getattr(cfg, attr)
            if name not in {f.name for f in dataclasses.fields(cls)}:
                raise ConfigError(key, "unknown key")
            parts[section][name] = _coerce(key, raw, getattr(defaults, name))
        elif section == "split" and name in POOL_ORDER:
            cfg.fractions[name] = _coerce(key, raw, 0.0)
        elif key == "model.hidden":
            try:
                cfg.hidden = tuple(_ints(raw))
            except ValueError:
                raise ConfigError(key, f"cannot parse {raw!r}") from None
        elif key == "eval.alpha":
            ev["alpha"] = _coerce(key, raw, 0.0)
        elif key in ("eval.c", "eval.d"):
            try:
                ev["c_values" if key == "eval.c" else "d_values"] = _ints(raw)
            except ValueError:
                raise ConfigError(key, f"cannot parse {raw!r}") from None
        elif key == "method":
            cfg.method = raw
        elif key == "seeds":
            try:
                cfg.seeds = _ints(raw)
            except ValueError:
                raise ConfigError(key, f"cannot parse {raw!r}") from None
        elif key == "output_dir":
            cfg.output_dir = raw
        else:
            raise ConfigError(key, "unknown key")
    for section, values in parts.items():
        attr, cls = _SECTIONS[section]
        try:
            setattr(cfg, attr, dataclasses.replace(getattr(cfg, attr), **values))
        except ValueError as exc:
            key = f"{section}.{next(iter(values), '?')}" if len(values) == 1 else section
            raise ConfigError(key, str(exc)) from None
    cfg.eval = dataclasses.replace(cfg.eval, **ev)
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# per-seed pipeline


def forget_values(cfg: ExperimentConfig, seed: int, data: Dataset) -> list[int]:
    sc = cfg.scenario
    if sc.forget != "auto":
        try:
            return _ints(sc.forget)
        except ValueError:
            raise ConfigError("scenario.forget", f"cannot parse {sc.forget!r}") from None
    if sc.kind == "class_wise":
        k = cfg.data.n_classes
        return [(seed + i) % k for i in range(sc.n_forget)]
    if sc.kind == "group_wise":
        return [(seed + i) % sc.n_clusters for i in range(sc.n_forget)]
    rng = np.random.default_rng(seed + 7919)
    return sorted(rng.choice(data.ids, size=sc.n_forget, replace=False).tolist())


def _train_cfg(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(cfg.train, seed=seed)


@dataclass
class SeedSetup:
    seed: int
    data: Dataset
    bundle: SplitBundle
    theta_o: ModelParams


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedSetup:
    """Data, split and base model for one seed."""
    d = cfg.data
    data = generate_mixture(d.n_classes, d.n_dims, d.n_per_class, d.separation, seed)
    kind = cfg.scenario.kind
    forget = forget_values(cfg, seed, data)
    init = init_params(d.n_dims, d.n_classes, cfg.hidden, seed)
    if kind == "class_wise":
        bundle = split_class_wise(data, forget, cfg.fractions, seed)
        theta_o = train(init, bundle.train, _train_cfg(cfg, seed))
    elif kind == "group_wise":
        # the training pool does not depend on the groups, so the base
        # model can be trained first and used to embed every point
        pools = cut_pools(len(data), cfg.fractions, seed)
        theta_o = train(init, data.take(pools["train"]), _train_cfg(cfg, seed))
        emb = embed(theta_o, data.features) if cfg.scenario.embedding == "model" else data.features
        bundle = split_group_wise(data, emb, cfg.scenario.n_clusters, forget, cfg.fractions, seed)
    else:
        bundle = split_instance_wise(data, forget, cfg.fractions, seed)
        theta_o = train(init, bundle.train, _train_cfg(cfg, seed))
    return SeedSetup(seed, data, bundle, theta_o)


def cpmu_config(cfg: ExperimentConfig, seed: int) -> cpmu.CpmuConfig:
    return dataclasses.replace(cfg.cpmu, alpha=cfg.eval.alpha, seed=seed)


def apply_method(cfg: ExperimentConfig, setup: SeedSetup):
    """Returns ``(theta_u, seconds, trace)``; time covers the unlearning call only."""
    seed, bundle, theta_o = setup.seed, setup.bundle, setup.theta_o
    trace = None
    start = time.monotonic()
    if cfg.method == "none":
        theta_u = theta_o
    elif cfg.method == "cpmu":
        theta_u, trace = cpmu.unlearn(theta_o, bundle, cpmu_config(cfg, seed))
    elif cfg.method == "rt":
        theta_u = baselines.rt_unlearn(bundle, _train_cfg(cfg, seed), cfg.hidden)
    else:
        bcfg = dataclasses.replace(cfg.baseline, method=cfg.method, seed=seed)
        if cfg.method == "amn":
            theta_u = baselines.amn_unlearn(theta_o, bundle, bcfg)
        else:
            theta_u = baselines.nabla_tau_unlearn(theta_o, bundle, None, bcfg)
    return theta_u, time.monotonic() - start, trace


def displacement(theta_u: ModelParams, theta_o: ModelParams) -> float:
    a, b = theta_u.flatten(), theta_o.flatten()
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if v is UNDEFINED:
        return "undefined"
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def _metric_rows(report: MetricsReport) -> list[tuple[str, object]]:
    return list(report.to_dict(include_time=False).items())


def write_seed_reports(out: Path, seed: int, reports: dict, seconds: float, method: str) -> None:
    sdir = out / f"seed_{seed}"
    sdir.mkdir(parents=True, exist_ok=True)
    for (c, d), rep in reports.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "value"])
        for k, v in _metric_rows(rep):
            w.writerow([k, _fmt(v)])
        (sdir / f"metrics_c{c}_d{d}.csv").write_text(buf.getvalue())
    (sdir / "timing.csv").write_text(f"seed,method,tt_s\n{seed},{method},{seconds:.2f}\n")


def mean_std(values: Iterable) -> tuple:
    """Mean and population std of the defined values; ``(None, None)`` if none."""
    vals = [float(v) for v in values if v is not UNDEFINED]
    if not vals:
        return UNDEFINED, UNDEFINED
    arr = np.asarray(vals)
    if np.isinf(arr).any():
        return (math.inf, 0.0) if np.isinf(arr).all() else (math.inf, math.nan)
    return float(arr.mean()), float(arr.std())


def aggregate(per_seed: dict) -> dict:
    """``{(c, d): {key: (mean, std, n_defined)}}`` from ``{seed: {(c, d): report}}``."""
    out: dict = {}
    seeds = sorted(per_seed)
    pairs = list(per_seed[seeds[0]])
    for pair in pairs:
        rows = [dict(_metric_rows(per_seed[s][pair])) for s in seeds]
        keys = list(dict.fromkeys(k for r in rows for k in r))
        block = {}
        for k in keys:
            vals = [r.get(k, UNDEFINED) for r in rows]
            m, sd = mean_std(vals)
            block[k] = (m, sd, sum(v is not UNDEFINED for v in vals))
        out[pair] = block
    return out


def write_aggregate(out: Path, agg: dict) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["c", "d", "metric", "mean", "std", "n"])
    js = {}
    for (c, d), block in agg.items():
        js_block = {}
        for k, (m, sd, n) in block.items():
            w.writerow([c, d, k, _fmt(m), _fmt(sd), n])
            js_block[k] = {"mean": _json_val(m), "std": _json_val(sd), "n": n}
        js[f"c={c},d={d}"] = js_block
    (out / "aggregate.csv").write_text(buf.getvalue())
    (out / "aggregate.json").write_text(json.dumps(js, indent=2) + "\n")


def _json_val(v):
    if v is UNDEFINED:
        return "undefined"
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def read_metrics_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    out = {}
    for k, v in rows:
        out[k] = UNDEFINED if v == "undefined" else (math.inf if v == "inf" else float(v))
    return out


# ---------------------------------------------------------------------------
# drivers


def run_seed(cfg: ExperimentConfig, seed: int, setup: SeedSetup | None = None):
    setup = setup or prepare_seed(cfg, seed)
    theta_u, seconds, _ = apply_method(cfg, setup)
    reports = {
        (c, d): evaluate_all(theta_u, setup.bundle, cfg.eval.alpha, c, d, tt_seconds=seconds)
        for c, d in cfg.eval.pairs()
    }
    return reports, seconds


def run_experiment(cfg: ExperimentConfig, seeds: Iterable[int] | None = None) -> Path:
    """Run every seed, writing per-seed files as each finishes, then aggregate."""
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_seed = {}
    timing = ["seed,method,tt_s"]
    for seed in (cfg.seeds if seeds is None else seeds):
        reports, seconds = run_seed(cfg, seed)
        write_seed_reports(out, seed, reports, seconds, cfg.method)
        per_seed[seed] = reports
        timing.append(f"{seed},{cfg.method},{seconds:.2f}")
    write_aggregate(out, aggregate(per_seed))
    (out / "timing.csv").write_text("\n".join(timing) + "\n")
    return out


def _variant(cfg: ExperimentConfig, sweep: str, value) -> ExperimentConfig:
    k = cfg.data.n_classes
    if sweep == "c":
        v = min(int(value), k)
        return dataclasses.replace(cfg, eval=EvalConfig(cfg.eval.alpha, [v], None))
    if sweep == "alpha":
        return dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, alpha=float(value)))
    if sweep == "lambda":
        return dataclasses.replace(cfg, cpmu=dataclasses.replace(cfg.cpmu, lambda_reg=float(value)))
    if sweep == "reg_norm":
        return dataclasses.replace(cfg, cpmu=dataclasses.replace(cfg.cpmu, reg_norm=str(value)))
    raise ConfigError("sweep", f"must be one of {SWEEPS}")


ABLATION_COLUMNS = [
    "sweep_value", "seed", "c", "d", "alpha", "h_ce",
    "ecf.Tr.c", "ecf.Dr.c", "ecf.Vr.c", "eucf.Tf.d", "eucf.Df.d", "eucf.Vf.d", "displacement",
]


def run_ablation(cfg: ExperimentConfig, sweep: str, grid: list) -> Path:
    """Long-format table ``ablation_<sweep>.csv`` plus a run directory per grid value.

    Each seed's data, split and base model are built once and shared by
    every grid value.  Sweeping only ``c`` also reuses the unlearned model.
    """
    if sweep not in SWEEPS:
        raise ConfigError("sweep", f"must be one of {SWEEPS}")
    if not grid:
        raise ConfigError("grid", "must be non-empty")
    cfg.validate()
    variants = []
    for value in grid:
        try:
            var = _variant(cfg, sweep, value)
            var.validate()
            if sweep == "alpha" and not 0 < float(value) < 1:
                raise ConfigError("eval.alpha", "must lie in (0, 1) when sweeping")
            if sweep in ("lambda", "reg_norm"):
                cpmu.CpmuConfig(**dataclasses.asdict(var.cpmu))
        except ValueError as exc:
            raise ConfigError("grid", f"invalid value {value!r}: {exc}") from None
        variants.append((value, var))

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    per_value: dict = {str(v): {} for v, _ in variants}
    for seed in cfg.seeds:
        setup = prepare_seed(cfg, seed)
        cache: dict = {}
        for value, var in variants:
            key = (var.method, repr(var.cpmu), repr(var.baseline), var.eval.alpha)
            if key not in cache:
                cache[key] = apply_method(var, setup)
            theta_u, seconds, _ = cache[key]
            reports = {
                (c, d): evaluate_all(theta_u, setup.bundle, var.eval.alpha, c, d, tt_seconds=seconds)
                for c, d in var.eval.pairs()
            }
            vdir = out / f"{sweep}_{value}"
            write_seed_reports(vdir, seed, reports, seconds, var.method)
            per_value[str(value)][seed] = reports
            disp = displacement(theta_u, setup.theta_o)
            for (c, d), rep in reports.items():
                flat = rep.to_dict(include_time=False)
                row = {"sweep_value": value, "seed": seed, "c": c, "d": d, "alpha": var.eval.alpha,
                       "h_ce": rep.h_ce, "displacement": disp}
                for col in ABLATION_COLUMNS[6:-1]:
                    row[col] = flat.get(col, UNDEFINED)
                rows.append(row)
    for value, _ in variants:
        write_aggregate(out / f"{sweep}_{value}", aggregate(per_value[str(value)]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[col]) for col in ABLATION_COLUMNS])
    table = out / f"ablation_{sweep}.csv"
    table.write_text(buf.getvalue())
    return table
