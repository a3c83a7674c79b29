"""``donna`` command line."""
from __future__ import annotations

import argparse
import csv
import fcntl
import logging
import sys
from pathlib import Path

from .pipeline import LEDGER_HEADER, PIPELINE_ORDER, Context, MissingUpstream, ledger_rows, load_config, run_all, run_stage

COMMANDS = PIPELINE_ORDER + ("cost-ledger", "all")

HELP = {
    "gen-data": "generate the synthetic image dataset",
    "train-ref": "train the reference (teacher) network",
    "bkd": "distill every block choice against the teacher",
    "sample": "draw predictor training and test architectures",
    "finetune-lib": "finetune the sampled architectures",
    "fit-predictor": "fit the accuracy predictor on block quality metrics",
    "eval-predictor": "score the predictor on held-out architectures",
    "search": "evolutionary multi-objective search with the predictor",
    "finetune-optima": "finetune chosen Pareto-optimal models",
    "explore": "search constrained variants of the space (no training)",
    "report": "write the comparison tables and the cost ledger",
    "cost-ledger": "print the training-cost ledger as CSV",
    "all": "run every stage in order, skipping up-to-date ones",
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults apply for missing keys)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--workers", type=int, default=1, help="parallel training processes")
    common.add_argument("--out", default="donna-out", help="output directory")
    common.add_argument("--force", action="store_true", help="rerun even if the stage is up to date")
    common.add_argument("-q", "--quiet", action="store_true")
    p = argparse.ArgumentParser(prog="donna", description="Desk-scale blockwise-distillation NAS pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(message)s",
        datefmt="%H:%M:%S",
    )
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg["seed"])
    ctx = Context(cfg, Path(args.out), seed=seed, workers=max(1, args.workers))
    lock = open(ctx.out / ".donna.lock", "w")
    try:
        fcntl.flock(lock, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except BlockingIOError:
        print(f"donna: another donna process is working in {ctx.out}", file=sys.stderr)
        return 3
    try:
        if args.command == "all":
            run_all(ctx)
        elif args.command == "cost-ledger":
            w = csv.writer(sys.stdout)
            w.writerow(LEDGER_HEADER)
            w.writerows(ledger_rows(ctx))
        else:
            run_stage(args.command, ctx, force=args.force)
    except MissingUpstream as exc:
        print(f"donna: {exc}", file=sys.stderr)
        return 2
    finally:
        lock.close()
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
