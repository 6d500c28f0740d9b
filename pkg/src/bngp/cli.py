"""Command line entry point.

Exit codes: 0 success, 1 a verification contract failed, 2 invalid
config or arguments, 3 training failed.
"""
import argparse
import logging
import os
import sys

from .config import load_config
from .defense import calibrate_dp_epsilon
from .errors import (CapabilityError, ContractError, MetricError, NumericError, ParameterError, ParseError,
                     TrainingError)
from .runner import capacity_sweep, gaps_non_increasing, median_auc, run_experiment
from .verification import VerificationGuards, run_verification_suite

log = logging.getLogger("bngp")

EXIT_OK, EXIT_CONTRACT, EXIT_CONFIG, EXIT_TRAINING = 0, 1, 2, 3


def _cmd_run(args):
    cfg = load_config(args.config)
    out_dir, rows = run_experiment(cfg, args.out)
    print(f"wrote {out_dir}")
    for dname in cfg["defender"]["kinds"]:
        for aname in cfg["attacker"]["kinds"]:
            for k in cfg.kappas:
                print(f"{dname:>12} {aname:>12} kappa={k:<6g} median auc "
                      f"{median_auc(rows, dname, aname, float(k)):.4f}")
    return EXIT_OK


def _cmd_sweep(args):
    cfg = load_config(args.config)
    out_dir, summary = capacity_sweep(cfg, args.out)
    print(f"wrote {out_dir}")
    for s in summary:
        print(f"width {s['width']:>5}  median gap {s['median_gap']:.5f}  std {s['std_gap']:.5f}")
    print("median gaps non-increasing in width: " + ("yes" if gaps_non_increasing(summary) else "no"))
    return EXIT_OK


def _cmd_verify(args):
    path = os.path.join(args.out, "verification.csv")
    rows = run_verification_suite(VerificationGuards(), args.seed, path)
    print(f"{len(rows)} checks passed; wrote {path}")
    return EXIT_OK


def _cmd_calibrate(args):
    dp = calibrate_dp_epsilon(args.utility, args.m, args.kdagger)
    print(f"epsilon {dp.epsilon!r}  sensitivity {dp.sensitivity!r}  laplace scale {dp.scale!r}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="bngp", description="Generative noise defenses and membership "
                                "inference attacks on summary-statistic releases.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train the configured defenders and evaluate every attacker")
    run.add_argument("config")
    run.add_argument("--out", help="run directory (default: <run.output_dir>/<run id>)")
    run.set_defaults(fn=_cmd_run)
    ver = sub.add_parser("verify", help="run the exact-oracle contract suite")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--out", default=".")
    ver.set_defaults(fn=_cmd_verify)
    sw = sub.add_parser("sweep-capacity", help="discriminator width vs exact CEL gap")
    sw.add_argument("config")
    sw.add_argument("--out")
    sw.set_defaults(fn=_cmd_sweep)
    cal = sub.add_parser("calibrate-dp", help="Laplace epsilon for a target mean |noise|")
    cal.add_argument("--utility", type=float, required=True, help="target mean absolute noise")
    cal.add_argument("--m", type=int, required=True, help="number of released attributes")
    cal.add_argument("--kdagger", type=int, required=True, help="population size in the sensitivity")
    cal.set_defaults(fn=_cmd_calibrate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ContractError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ParameterError, ParseError, CapabilityError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (NumericError, MetricError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
