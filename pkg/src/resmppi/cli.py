"""Command-line entry point.

Exit codes: 0 success, 1 invalid config or input, 2 oracle acceptance violation, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__, harness
from .dynamics import ConfigHashMismatch, InsufficientDataError
from .nn import WeightFormatError

EXIT_OK, EXIT_INVALID, EXIT_VIOLATION, EXIT_IO = 0, 1, 2, 3


def _print_agg(agg, prefix=""):
    for k, (mu, sd, n) in agg.items():
        print(f"{prefix}{k:>24s}  {mu:14.6f} ± {sd:.6f}  (n={n})")


def _train(cfg, args):
    rep = harness.cmd_train_dynamics(cfg, args.seed)
    err = " ".join(f"{e:.3e}" for e in rep["heldout_rms_error"])
    print(f"trained on {rep['n_transitions']} transitions; final loss {rep['final_loss']:.3e}")
    print(f"held-out {rep['heldout_horizon']}-step RMS error per dimension: {err}")


def _run(cfg, args):
    _, agg = harness.cmd_run(cfg, args.seed)
    _print_agg(agg)


def _fewshot(cfg, args):
    history, sizes = harness.cmd_fewshot(cfg, args.seed, args.iterations)
    for it, agg in history:
        print(f"iteration {it} (dataset {sizes[min(it, len(sizes) - 1)]} transitions)")
        _print_agg(agg, "  ")


def _oracle(cfg, args):
    results = harness.cmd_oracle_check(cfg)
    worst = {}
    for r in results:
        key = (r.kind, r.expect)
        worst[key] = max(worst.get(key, 0.0), r.measured)
    print(f"{len(results)} fixtures ok")
    for (kind, expect), tv in sorted(worst.items()):
        label = "max TV" if expect == "pass" else "max TV (expected above tolerance)"
        print(f"  {kind:>9s} {label}: {tv:.3e}")


COMMANDS = {"train-dynamics": _train, "run": _run, "fewshot": _fewshot, "oracle-check": _oracle}


def build_parser():
    p = argparse.ArgumentParser(prog="resmppi", description="Residual-MPPI planner experiments driven by JSON configs.")
    p.add_argument("--version", action="version", version=f"resmppi {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("train-dynamics", "collect prior rollouts and train a dynamics model"),
        ("run", "run the planner (or the prior) for n_episodes and write metrics"),
        ("fewshot", "alternate planner runs and online dynamics fine-tuning"),
        ("oracle-check", "verify the tabular equivalence fixtures"),
    ]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="experiment config (JSON)")
        s.add_argument("--seed", type=int, default=None, help="override run.seed")
        if name == "fewshot":
            s.add_argument("--iterations", type=int, default=None, help="override run.fewshot_iterations")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = harness.load_config(args.config)
        COMMANDS[args.command](cfg, args)
    except harness.OracleViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (harness.ConfigError, ConfigHashMismatch, InsufficientDataError, WeightFormatError,
            json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
