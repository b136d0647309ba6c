"""Command-line entry point: ``fedreg <command> [options]``.

Commands:
    generate   synthesise a scenario and write it as a corpus file
    run        train one configuration for every seed
    sweep      grid over communication frequency, system or tap position
    check      run the oracle suites
    compare    matched-pairs test between two run directories
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ExperimentConfig, load_config
from .decorators import track_errors
from .errors import FedRegError
from .experiment import (
    SWEEP_AXES,
    compare_runs,
    run_seeds,
    sweep_comm_frequency,
    sweep_reg_method,
    sweep_tap_position,
    write_manifest,
)
from .oracles import run_checks
from .synthdata import generate_scenario, partition_stats, write_corpus
from .telemetry import get_telemetry, track_command

logger = logging.getLogger("fedreg")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True
    )


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="run a single seed")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--threads", type=int, help="worker threads for client training")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedreg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fedreg {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic corpus")
    _common(gen)

    run = sub.add_parser("run", help="train one configuration")
    _common(run)
    run.add_argument("--system", type=int, help="regularizer layout preset 0..15")
    run.add_argument("--local-steps", help="e.g. 1bt, 0.25ep, epoch")
    run.add_argument("--rounds", type=int, help="communication rounds")

    sweep = sub.add_parser("sweep", help="run a grid of experiments")
    _common(sweep)
    sweep.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sweep.add_argument("--frequencies", nargs="+", help="comm-frequency settings")
    sweep.add_argument("--total-steps", type=int, help="per-client step budget")
    sweep.add_argument("--systems", nargs="+", type=int, help="reg-method systems")
    sweep.add_argument("--method", choices=("loss", "embed"), default="loss")

    check = sub.add_parser("check", help="run the oracle suites")
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--only", nargs="+", choices=("ctc", "wer", "gradients", "fedavg"))

    compare = sub.add_parser("compare", help="matched-pairs test between two runs")
    compare.add_argument("run_a", type=Path)
    compare.add_argument("run_b", type=Path)
    compare.add_argument("--alpha", type=float, default=0.05)
    return parser


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out is not None:
        cfg = replace(cfg, out_dir=str(args.out))
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    if getattr(args, "system", None) is not None:
        cfg = cfg.for_system(args.system)
    schedule = cfg.schedule
    if getattr(args, "local_steps", None):
        schedule = replace(schedule, local_steps=args.local_steps)
    if getattr(args, "rounds", None) is not None:
        schedule = replace(schedule, total_rounds=args.rounds)
    return replace(cfg, schedule=schedule)


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    scenario = cfg.scenario
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    corpus = generate_scenario(scenario)
    out = Path(cfg.out_dir)
    path = out / "corpus.jsonl"
    write_corpus(corpus, path)
    write_manifest(out, replace(cfg, scenario=scenario), scenario.seed, corpus=str(path))
    stats = partition_stats(corpus.shards, scenario.vocab_size)
    print(
        json.dumps(
            {
                "corpus": str(path),
                "clients": len(corpus.shards),
                "train": stats.total,
                "test": len(corpus.test),
                "label_skew": round(stats.skew, 4),
                "severity": {str(k): v for k, v in corpus.client_severity.items()},
            },
            indent=2,
        )
    )
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    outputs = run_seeds(cfg)
    print(json.dumps([{k: v for k, v in o.summary.items() if k != "final"} for o in outputs], indent=2))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out_dir) / args.axis
    if args.axis == "comm-frequency":
        kwargs = {"frequencies": args.frequencies} if args.frequencies else {}
        result = sweep_comm_frequency(cfg, out, total_steps=args.total_steps, **kwargs)
    elif args.axis == "reg-method":
        kwargs = {"systems": args.systems} if args.systems else {}
        result = sweep_reg_method(cfg, out, **kwargs)
    else:
        result = sweep_tap_position(cfg, out, method=args.method)
    print(json.dumps({"axis": result.axis, "best": result.best, "rows": result.rows}, indent=2))
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    results = run_checks(seed=args.seed, only=args.only)
    for result in results:
        print(result.summary())
        for failure in result.failures[:10]:
            print(f"    {failure}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def cmd_compare(args: argparse.Namespace) -> int:
    result = compare_runs(args.run_a, args.run_b, alpha=args.alpha)
    print(json.dumps({**result.as_dict(), "verdict": result.verdict()}, indent=2))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "check": cmd_check,
    "compare": cmd_compare,
}


@track_errors()
def _dispatch(args: argparse.Namespace) -> int:
    return COMMANDS[args.command](args)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    telemetry = get_telemetry()
    telemetry.initialize(package_version=__version__)
    telemetry.set_tag("command", args.command)
    try:
        code = _dispatch(args)
    except FedRegError as e:
        print(f"fedreg {args.command}: error: {e}", file=sys.stderr)
        track_command(args.command, success=False, error=type(e).__name__)
        code = EXIT_INVALID
    except Exception as e:
        logger.exception("unexpected failure in %s", args.command)
        print(f"fedreg {args.command}: internal error: {e}", file=sys.stderr)
        track_command(args.command, success=False, error=type(e).__name__)
        code = EXIT_FAILURE
    else:
        track_command(args.command, success=code == EXIT_OK)
    finally:
        telemetry.flush()
    return code


if __name__ == "__main__":
    sys.exit(main())
