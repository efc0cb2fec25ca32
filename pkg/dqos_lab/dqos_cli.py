#!/usr/bin/env python3
import argparse
import dataclasses
import json
import logging
import os
import sys

from .loaders import ConfigError, ExperimentConfig, load_experiment_config
from .pipeline import (
    PipelineError,
    resolve_topology,
    run_attack_experiment,
    run_baseline,
    run_collect,
    run_eval,
    run_topology,
    run_train,
)
from .predictor import DimensionMismatch, EmptyDataset
from .simcore import SimulationInvariantError
from .telemetry import MODEL_IDS, LayoutMismatch
from .topology import dump_topology

EXIT_CONFIG_ERROR = 1
EXIT_RUNTIME_ERROR = 2
RUNTIME_ERRORS = (SimulationInvariantError, LayoutMismatch, DimensionMismatch, EmptyDataset, PipelineError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dqos-lab",
        description="Simulate SDN flow-table DQoS attacks: baselines, datasets, drop-rate models and attacks.",
    )
    parser.add_argument("--config", default=None, help="Experiment config JSON (default: built-in values).")
    parser.add_argument("--seed", type=int, default=None, help="Override the config seed.")
    parser.add_argument("--out", default="output", help="Output directory (default: output).")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    sub = parser.add_subparsers(dest="command", required=True)

    topo = sub.add_parser("topology", help="Write the configured topology as JSON.")
    topo.add_argument("--dump", action="store_true", help="Print the topology JSON to stdout instead.")

    sub.add_parser("baseline", help="No-attack run plus forced table-miss latency scenarios.")

    coll = sub.add_parser("collect", help="Collect a snapshot dataset.")
    coll.add_argument("--duration", type=float, default=None, help="Collection duration in seconds.")

    train = sub.add_parser("train", help="Train drop-rate models on a dataset.")
    train.add_argument("--dataset", required=True, help="Dataset file written by `collect`.")
    train.add_argument("--models", nargs="+", type=int, default=list(MODEL_IDS), help="Model ids (1-10).")
    train.add_argument("--jobs", type=int, default=1, help="Parallel training processes.")

    ev = sub.add_parser("eval", help="Trace predicted vs actual drop rates on a fresh run.")
    ev.add_argument("--model", required=True, help="Checkpoint written by `train`.")
    ev.add_argument("--noisy-inputs", action="store_true", help="Feed noisy models noisy inputs.")

    att = sub.add_parser("attack", help="Run the rate-controlled attack per stealth band.")
    att.add_argument("--model", required=True, help="Checkpoint written by `train`.")
    att.add_argument("--bands", nargs="+", type=float, default=None, help="Band widths k in percent.")
    att.add_argument("--band-k", type=float, default=None, help="Single band width k in percent.")
    att.add_argument("--interval", type=float, default=None, help="Reassessment interval in seconds.")
    att.add_argument("--duration", type=float, default=None, help="Attack duration in seconds.")
    att.add_argument("--p", type=float, default=None, help="Rate increment step.")
    att.add_argument("--q", type=float, default=None, help="Rate decrement step.")
    att.add_argument("--no-attack", action="store_true", help="Keep all attack rates at zero.")
    return parser


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.command == "collect" and args.duration is not None:
        config.collect = dataclasses.replace(config.collect, duration_s=args.duration)
    if args.command == "eval" and args.noisy_inputs:
        config.evaluation = dataclasses.replace(config.evaluation, noisy_inputs=True)
    if args.command == "attack":
        changes = {
            "interval_s": args.interval,
            "duration_s": args.duration,
            "increment_p": args.p,
            "decrement_q": args.q,
        }
        changes = {k: v for k, v in changes.items() if v is not None}
        if changes:
            config.attack = dataclasses.replace(config.attack, **changes)
    return config


def _dispatch(config: ExperimentConfig, args: argparse.Namespace) -> None:
    out = args.out
    if args.command == "topology":
        if args.dump:
            json.dump(dump_topology(resolve_topology(config)), sys.stdout, indent=2, sort_keys=True)
            sys.stdout.write("\n")
        else:
            print(run_topology(config, out))
    elif args.command == "baseline":
        result = run_baseline(config, out)
        print(f"Mean no-attack video latency: {result.report.mean_latency():.2f} ms")
    elif args.command == "collect":
        print(run_collect(config, out))
    elif args.command == "train":
        summary = run_train(config, args.dataset, out, args.models, args.jobs)
        print(summary.to_string(index=False))
    elif args.command == "eval":
        run_eval(config, args.model, out)
    elif args.command == "attack":
        bands = [args.band_k] if args.band_k is not None else args.bands
        summary = run_attack_experiment(config, args.model, out, bands, args.no_attack)
        print(summary.to_string(index=False))


def main(argv: list[str] | None = None) -> None:
    """Main entry point for the dqos-lab CLI."""
    args = build_parser().parse_args(argv)

    os.makedirs(args.out, exist_ok=True)
    logging.basicConfig(
        filename=os.path.join(args.out, "run_log.txt"),
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    logging.info("Starting dqos-lab %s", args.command)

    try:
        config = _apply_overrides(load_experiment_config(args.config), args)
    except (ConfigError, OSError, ValueError) as exc:
        logging.exception("Configuration error")
        print(f"Configuration error: {exc}", file=sys.stderr)
        sys.exit(EXIT_CONFIG_ERROR)

    try:
        _dispatch(config, args)
    except RUNTIME_ERRORS as exc:
        logging.exception("Runtime invariant violated")
        print(f"Error: {exc}", file=sys.stderr)
        sys.exit(EXIT_RUNTIME_ERROR)
    except (OSError, ValueError) as exc:
        logging.exception("Known error in processing")
        print(f"Error: {exc}", file=sys.stderr)
        sys.exit(EXIT_CONFIG_ERROR)
    except Exception:
        logging.exception("Unexpected error in processing")
        sys.exit(EXIT_CONFIG_ERROR)


if __name__ == "__main__":  # pragma: no cover
    main()
