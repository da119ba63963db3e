"""Command-line entry point: ``confopt {run,oracle,eval,validate-config}``.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_config, resolved
from .errors import ConfigError, DegenerateDenominator, LayoutMismatch, NumericalFailure, SchemaError
from .experiment import evaluate_saved, run_bayes_oracle, run_experiment, write_json

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="confopt", description="Optimize confusion-matrix metrics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        if out:
            p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=_u64, help="override the config seed")
        p.add_argument("--allow-mismatch", action="store_true",
                       help="run solver/metric pairs that lack a convergence guarantee")

    run = sub.add_parser("run", help="train, solve and evaluate")
    common(run)
    run.add_argument("--trials", type=int, help="override the number of trials")
    common(sub.add_parser("oracle", help="grid-search reference value for a synthetic problem"))
    ev = sub.add_parser("eval", help="re-evaluate a saved classifier")
    common(ev)
    ev.add_argument("--classifier", required=True, help="classifier JSON written by 'run'")
    ev.add_argument("--trial", type=int, default=0, help="trial whose data to use")
    common(sub.add_parser("validate-config", help="check a config and print it with defaults filled in"),
           out=False)
    return parser


def _load(args):
    cfg = load_config(args.config, allow_mismatch=args.allow_mismatch)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        if args.trials < 1:
            raise ConfigError("--trials must be at least 1")
        updates["n_trials"] = args.trials
    return cfg.model_copy(update=updates) if updates else cfg


def _emit(data, out_dir, name):
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_json(Path(out_dir) / name, data)
    print(json.dumps(data, indent=2, sort_keys=True))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "validate-config":
            print(json.dumps(resolved(cfg), indent=2, sort_keys=True))
        elif args.command == "run":
            summary = run_experiment(cfg, args.out)
            print(json.dumps(summary["aggregate"], indent=2, sort_keys=True))
        elif args.command == "oracle":
            _emit(run_bayes_oracle(cfg), args.out, "oracle.json")
        else:
            _emit(evaluate_saved(cfg, args.classifier, args.trial), args.out, "eval.json")
    except (ConfigError, SchemaError, LayoutMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, DegenerateDenominator) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as exc:  # noqa: BLE001 - last-resort exit code for the shell
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
