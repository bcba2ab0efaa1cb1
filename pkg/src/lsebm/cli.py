"""Command-line interface: train / eval / sample / diagnose.

All subcommands are batch-mode and exit with documented codes:
0 success, 1 diagnostic failure, 2 config or dataset error,
3 training divergence, 4 checkpoint version mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import parse_config
from .errors import CheckpointError, ConfigError, InvalidInput, ParseError
from .run import (TrainingDiverged, run_diagnostics, run_eval, run_sample,
                  run_training)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_CKPT_VERSION = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lsebm",
        description="Semi-supervised latent-prior EBM: train, evaluate, "
                    "sample and diagnose.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override [run] out_dir")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--threads", type=int, help="override [run] threads")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="classify a dataset with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True, help="dataset config")
    p.add_argument("--n-mc", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for the JSON report")

    p = sub.add_parser("sample", help="draw prior samples and decode them")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--step-size", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="samples")

    p = sub.add_parser("diagnose", help="run the verification battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for the JSON report")
    p.add_argument("--inject-fault", action="store_true",
                   help="corrupt one gradient to exercise the failure path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cfg = parse_config(args.config)
            if args.out:
                cfg.out_dir = args.out
            if args.seed is not None:
                cfg.seed = args.seed
            if args.threads is not None:
                cfg.threads = args.threads
            run_training(cfg, resume=args.resume)
            return EXIT_OK
        if args.command == "eval":
            cfg = parse_config(args.config)
            report_path = None
            if args.out:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                report_path = Path(args.out) / "eval_report.json"
            report = run_eval(args.checkpoint, cfg, n_mc=args.n_mc,
                              report_path=report_path, seed=args.seed)
            print(f"accuracy: {report['accuracy']:.4f}")
            for cls, acc in sorted(report["per_class_accuracy"].items()):
                print(f"  class {cls}: {acc:.4f}")
            return EXIT_OK
        if args.command == "sample":
            path = run_sample(args.checkpoint, args.count, args.steps,
                              args.step_size, args.out, seed=args.seed)
            print(f"samples written to {path}")
            return EXIT_OK
        if args.command == "diagnose":
            records = run_diagnostics(seed=args.seed,
                                      inject_fault=args.inject_fault)
            for rec in records:
                status = "PASS" if rec["pass"] else "FAIL"
                print(f"{status} {rec['check']}: value={rec['value']:.3e} "
                      f"tolerance={rec['tolerance']:.0e}")
            if args.out:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "diagnostics.json").write_text(
                    json.dumps(records, indent=2))
            if not all(rec["pass"] for rec in records):
                failing = [r["check"] for r in records if not r["pass"]]
                print(f"failed checks: {', '.join(failing)}", file=sys.stderr)
                return EXIT_CHECK_FAILED
            return EXIT_OK
    except (ConfigError, ParseError, InvalidInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CKPT_VERSION
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
