"""Command-line entry point: ``cpmu-unlearn <verb> --config ... --seed ... --out ...``.

Exit codes: 0 success, 2 configuration error, 3 numeric error.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import harness
from .conformal import calibrate, save_calibration
from .cpmu import format_trace
from .data import generate_mixture, save_dataset
from .metrics import evaluate_all
from .model import NumericError, load_params, save_params

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    if args.out:
        cfg.output_dir = args.out
    if args.seed is not None:
        cfg.seeds = [args.seed]
    return cfg.validate()


def _out(cfg) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args):
    cfg = _config(args)
    d = cfg.data
    data = generate_mixture(d.n_classes, d.n_dims, d.n_per_class, d.separation, cfg.seeds[0])
    path = _out(cfg) / "data.csv"
    save_dataset(data, path)
    print(path)


def cmd_train(args):
    cfg = _config(args)
    setup = harness.prepare_seed(cfg, cfg.seeds[0])
    path = _out(cfg) / "theta_o.params"
    save_params(setup.theta_o, path)
    print(path)


def cmd_unlearn(args):
    cfg = _config(args)
    setup = harness.prepare_seed(cfg, cfg.seeds[0])
    if args.params:
        setup = dataclasses.replace(setup, theta_o=load_params(args.params))
    theta_u, seconds, trace = harness.apply_method(cfg, setup)
    out = _out(cfg)
    save_params(theta_u, out / "theta_u.params")
    if trace is not None:
        (out / "trace.tsv").write_text(format_trace(trace))
    (out / "timing.csv").write_text(f"seed,method,tt_s\n{cfg.seeds[0]},{cfg.method},{seconds:.2f}\n")
    print(out / "theta_u.params")


def cmd_evaluate(args):
    cfg = _config(args)
    setup = harness.prepare_seed(cfg, cfg.seeds[0])
    params = load_params(args.params) if args.params else setup.theta_o
    out = _out(cfg)
    for c, d in cfg.eval.pairs():
        rep = evaluate_all(params, setup.bundle, cfg.eval.alpha, c, d)
        (out / f"metrics_c{c}_d{d}.txt").write_text(rep.to_text(include_time=False))
    save_calibration(calibrate(params, setup.bundle.test_calib, cfg.eval.alpha), out / "calibration.txt")
    print(out)


def cmd_experiment(args):
    cfg = _config(args)
    print(harness.run_experiment(cfg))


def cmd_ablation(args):
    cfg = _config(args)
    grid = [v for v in args.grid.split(",") if v.strip()]
    if args.sweep in ("c",):
        grid = [int(v) for v in grid]
    elif args.sweep in ("alpha", "lambda"):
        grid = [float(v) for v in grid]
    print(harness.run_ablation(cfg, args.sweep, grid))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="run only this seed")
    common.add_argument("--out", help="output directory (overrides output_dir)")

    parser = argparse.ArgumentParser(prog="cpmu-unlearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset").set_defaults(func=cmd_gen_data)
    sub.add_parser("train", parents=[common], help="train the base model").set_defaults(func=cmd_train)
    p = sub.add_parser("unlearn", parents=[common], help="apply the configured method")
    p.add_argument("--params", help="base checkpoint (default: retrain from config)")
    p.set_defaults(func=cmd_unlearn)
    p = sub.add_parser("evaluate", parents=[common], help="six-subset metrics for a checkpoint")
    p.add_argument("--params", help="checkpoint to evaluate (default: base model)")
    p.set_defaults(func=cmd_evaluate)
    sub.add_parser("experiment", parents=[common], help="full multi-seed run").set_defaults(func=cmd_experiment)
    p = sub.add_parser("ablation", parents=[common], help="sweep one setting")
    p.add_argument("--sweep", required=True, choices=harness.SWEEPS)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (harness.ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
