"""Command-line harness: run experiments, baselines, and plots.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys

from . import harness, planning
from .core import ConfigError, RdplearnError, deserialize_mealy


def _load_config(path: str) -> harness.ExperimentConfig:
    with open(path) as fh:
        return harness.parse_experiment_config(fh.read())


def _cmd_run(args) -> int:
    cfg = _load_config(args.config)
    if args.output_dir:
        cfg = harness.ExperimentConfig(**{**cfg.__dict__, "output_dir": args.output_dir})
    artifacts = harness.run_s3m(cfg)
    paths = harness.save_artifacts(artifacts, cfg.output_dir, prefix="s3m")
    mean, std = artifacts.summary()
    print(f"final policy mean per-step reward: {mean:.4f} +/- {std:.4f} "
          f"({len([r for r in artifacts.records if r])}/{cfg.repetitions} repetitions)")
    for rep, msg in artifacts.diagnostics:
        print(f"repetition {rep} failed: {msg}", file=sys.stderr)
    print(f"results: {paths['csv']}")
    if args.plot:
        rows = harness.read_csv(paths["csv"])
        plot_path = paths["csv"].replace("_results.csv", "_plot.svg")
        harness.emit_plot(rows, plot_path, optimal=args.optimal)
        print(f"plot: {plot_path}")
    return 0


def _cmd_baseline(args) -> int:
    cfg = _load_config(args.config)
    if args.output_dir:
        cfg = harness.ExperimentConfig(**{**cfg.__dict__, "output_dir": args.output_dir})
    artifacts = harness.run_baseline_rmax(cfg)
    paths = harness.save_artifacts(artifacts, cfg.output_dir, prefix="rmax")
    mean, std = artifacts.summary()
    print(f"final R-max mean per-step reward: {mean:.4f} +/- {std:.4f}")
    print(f"results: {paths['csv']}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    with open(args.machine) as fh:
        machine = deserialize_mealy(fh.read())
    with open(args.labels) as fh:
        labels = harness.parse_labels(fh.read())
    mdp = planning.build_product_mdp(machine, labels, cfg.env.observation_space(),
                                     terminal_obs=cfg.env.terminal_observations)
    policy = planning.UctPolicy(machine, mdp, cfg.uct_iterations, cfg.uct_c, cfg.gamma)
    trials = args.trials or cfg.eval_trials
    result = planning.evaluate_policy(cfg.env, policy, trials, cfg.eval_horizon,
                                      seed=cfg.master_seed)
    print(f"mean per-step reward: {result.mean_per_step:.4f} +/- {result.std:.4f} "
          f"over {trials} trials")
    return 0


def _cmd_oracle(args) -> int:
    cfg = _load_config(args.config)
    policy = harness.oracle_policy(cfg.env, gamma=cfg.gamma)
    trials = args.trials or cfg.eval_trials
    result = planning.evaluate_policy(cfg.env, policy, trials, cfg.eval_horizon,
                                      seed=cfg.master_seed)
    print(f"oracle mean per-step reward: {result.mean_per_step:.4f} +/- {result.std:.4f} "
          f"over {trials} trials")
    return 0


def _cmd_plot(args) -> int:
    rows = harness.read_csv(args.csv)
    harness.emit_plot(rows, args.out, optimal=args.optimal)
    print(f"plot: {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdplearn",
                                     description="Learn and solve Regular Decision Processes")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full S3M experiment from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--output-dir")
    p_run.add_argument("--plot", action="store_true", help="also write the results plot")
    p_run.add_argument("--optimal", type=float, help="optimal-value overlay for the plot")
    p_run.set_defaults(func=_cmd_run)

    p_base = sub.add_parser("baseline", help="R-max baseline with the same budget")
    p_base.add_argument("--config", required=True)
    p_base.add_argument("--output-dir")
    p_base.set_defaults(func=_cmd_baseline)

    p_eval = sub.add_parser("eval", help="evaluate a saved machine file")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--machine", required=True)
    p_eval.add_argument("--labels", required=True)
    p_eval.add_argument("--trials", type=int)
    p_eval.set_defaults(func=_cmd_eval)

    p_oracle = sub.add_parser("oracle", help="evaluate the ground-truth machine")
    p_oracle.add_argument("--config", required=True)
    p_oracle.add_argument("--trials", type=int)
    p_oracle.set_defaults(func=_cmd_oracle)

    p_plot = sub.add_parser("plot", help="results CSV to a vector plot")
    p_plot.add_argument("--csv", required=True)
    p_plot.add_argument("--out", required=True)
    p_plot.add_argument("--optimal", type=float)
    p_plot.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (RdplearnError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
