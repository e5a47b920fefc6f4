"""Command-line entry point for the federated compositional optimization simulator."""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from harness.harness import load_run_config, report, run_experiment, sweep, with_overrides
from harness.storage import dump_json
from logger.sim_logger import get_logger
from oracles.oracles import verify_suite
from problems.datasets import build_synthetic_logistic, save_csv_dataset
from problems.models import ConfigError, FedCOError, ScheduleError, VerificationError

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3


def _csv_list(raw: str, cast=str) -> List:
    items = [item.strip() for item in raw.split(",") if item.strip()]
    try:
        return [cast(item) for item in items]
    except ValueError:
        raise ConfigError(f"cannot parse list {raw!r}")


def cmd_run(args) -> int:
    config = load_run_config(args.config)
    if args.seed is not None:
        config = with_overrides(config, seed=args.seed)
    result = run_experiment(config, args.out)
    logger.info(f"Run {config.name!r} done: x_final={result.x_final.tolist()}, "
                f"sampled index a(T)={result.sampled_index}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = load_run_config(args.config)
    values = _csv_list(args.values)
    seeds = _csv_list(args.seeds, int)
    summary = sweep(config, args.axis, values, seeds, output_dir=args.out, workers=args.workers)
    logger.info(f"Sweep done: {len(summary)} cells")
    return EXIT_OK


def cmd_verify(args) -> int:
    result = verify_suite(seed=args.seed)
    payload = dump_json({"passed": result.passed, **result.model_dump()})
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)
    result.raise_for_failures()
    logger.info(f"Verification passed: {len(result.checks)} checks")
    return EXIT_OK


def cmd_report(args) -> int:
    summary = report(args.dir)
    logger.info(f"Report regenerated for {args.dir}: {len(summary)} cells")
    return EXIT_OK


def cmd_generate(args) -> int:
    dataset, _ = build_synthetic_logistic(args.n, args.dim, imbalance_ratio=args.imbalance,
                                          seed=args.seed, margin=args.margin)
    save_csv_dataset(dataset, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run one experiment from a JSON config")
    run.add_argument("--config", required=True, help="Path to the run config")
    run.add_argument("--seed", type=int, default=None, help="Override the master seed")
    run.add_argument("--out", default=None, help="Output directory (default: FEDCO_OUTPUT_DIR/<name>)")
    run.set_defaults(handler=cmd_run)

    sw = commands.add_parser("sweep", help="Run a parameter sweep")
    sw.add_argument("--config", required=True)
    sw.add_argument("--axis", required=True, choices=["K", "I", "eta", "T"])
    sw.add_argument("--values", required=True, help="Comma-separated axis values")
    sw.add_argument("--seeds", default="0", help="Comma-separated seeds")
    sw.add_argument("--out", default=None)
    sw.add_argument("--workers", type=int, default=None,
                    help="Cells run concurrently (default: FEDCO_SWEEP_WORKERS)")
    sw.set_defaults(handler=cmd_sweep)

    verify = commands.add_parser("verify", help="Run the oracle-backed checks")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--out", default=None, help="Write the JSON report here instead of stdout")
    verify.set_defaults(handler=cmd_verify)

    rep = commands.add_parser("report", help="Regenerate summary.csv for a sweep directory")
    rep.add_argument("--dir", required=True)
    rep.set_defaults(handler=cmd_report)

    gen = commands.add_parser("generate", help="Write a synthetic imbalanced logistic dataset CSV")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n", type=int, default=500)
    gen.add_argument("--dim", type=int, default=5)
    gen.add_argument("--imbalance", type=float, default=1.0, help="Minority / majority ratio")
    gen.add_argument("--margin", type=float, default=1.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(handler=cmd_generate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, ScheduleError, ValidationError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except VerificationError as e:
        logger.error(f"Verification failed: {e}")
        return EXIT_VERIFY
    except (FedCOError, OSError, FloatingPointError, ArithmeticError) as e:
        logger.error(f"Runtime error: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
