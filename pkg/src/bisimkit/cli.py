"""``bisimkit`` command line.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

import argparse
import os
import sys
import warnings

from .config import ConfigError, load_config
from .validation import ConvergenceError, NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _commands():
    from . import experiments

    return {
        "exact": experiments.run_exact,
        "train": experiments.run_train,
        "eval-corr": experiments.run_eval_corr,
        "eval-inv": experiments.run_eval_inv,
        "eval-transfer": experiments.run_eval_transfer,
    }


def build_parser():
    parser = argparse.ArgumentParser(prog="bisimkit", description="Bisimulation metrics and representation learning.")
    parser.add_argument("command", choices=["exact", "train", "eval-corr", "eval-inv", "eval-transfer"])
    parser.add_argument("--config", required=True, help="TOML or JSON experiment config")
    parser.add_argument("--seed", required=True, type=int, help="unsigned 64-bit seed; overrides the config")
    parser.add_argument("--out", required=True, help="output directory (created if missing)")
    return parser


def run(command, config_path, seed, out_dir):
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    cfg = load_config(config_path).replace(seed=seed)
    os.makedirs(out_dir, exist_ok=True)
    return _commands()[command](cfg, out_dir)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda msg, *a, **k: print(f"warning: {msg}", file=sys.stderr)
            run(args.command, args.config, args.seed, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ConvergenceError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
