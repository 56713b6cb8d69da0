"""Command line entry point.

Exit status: 0 on success, 1 for configuration errors, 2 for runtime errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, parse_config
from .data import load_checkpoint, load_dataset
from .exceptions import ConfigError, MLNTError
from .harness import evaluate, export_features, export_noisy_data, run_experiment, run_sweep

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _load(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    update = {}
    if args.output_dir is not None:
        update["output_dir"] = Path(args.output_dir)
    if args.seed is not None:
        update["seed"] = args.seed
    if getattr(args, "n_seeds", None) is not None:
        if args.n_seeds < 1:
            raise ConfigError("--n-seeds must be >= 1")
        update["n_seeds"] = args.n_seeds
    return cfg.model_copy(update=update) if update else cfg


def cmd_inject_noise(args) -> int:
    cfg = _load(args)
    for seed in cfg.seeds():
        print(export_noisy_data(cfg, seed))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    for seed in cfg.seeds():
        print(export_features(cfg, seed))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    summary = run_experiment(cfg)
    for i, it in enumerate(summary["mean"]["iterations"], start=1):
        test = it["test_acc_best"]
        print(f"iteration {i}: val {it['best_val_acc']:.4f}" + ("" if test is None else f"  test {test:.4f}"))
    print(Path(cfg.output_dir) / "summary.json")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if cfg.sweep is None:
        raise ConfigError("config has no 'sweep' section")
    run_sweep(cfg)
    print(Path(cfg.output_dir) / "sweep.csv")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset, args.n_classes or ckpt.spec.n_classes, split="test")
    report = evaluate(ckpt, dataset).to_dict()
    text = json.dumps(report, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlnt", description="Noise-tolerant training experiments")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, func, help_text, seeds=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--output-dir", help="override output_dir from the config")
        p.add_argument("--seed", type=int, help="override the master seed")
        if seeds:
            p.add_argument("--n-seeds", type=int, help="override the number of replicate seeds")
        p.set_defaults(func=func)
        return p

    with_config("inject-noise", cmd_inject_noise, "write clean splits and corrupted training labels")
    with_config("pretrain-features", cmd_pretrain, "train the CE feature network and dump its pre-softmax features")
    with_config("train", cmd_train, "run the full protocol for every seed")
    with_config("sweep", cmd_sweep, "run the config's sweep section")

    p = sub.add_parser("evaluate", help="accuracy and confusion counts of a checkpoint on a dataset CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MLNTError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:
        logging.getLogger(__name__).exception("unexpected failure")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
