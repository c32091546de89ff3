import argparse
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv

from config import ConfigError, ExperimentConfig, setup_logging
from models.cell import ArchitectureError
from services import experiments
from utils.data_io import DatasetError

logger = logging.getLogger("run_experiments")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="ENAS sentence-pair search and tuning experiments")
    parser.add_argument("--config", help="YAML experiment config (dataset/embedding/model/budget blocks)")
    parser.add_argument("--seed", type=int, help="Seed for data splits, studies and searches")
    parser.add_argument("--trials", type=int, help="Tuning trials per study")
    parser.add_argument("--concurrency", type=int, help="Trials run at once")
    parser.add_argument("--out", help="Root directory for run directories (default $ENAS_RUNS_DIR or runs/)")
    parser.add_argument("--preset", choices=["desk", "full"], help="Budget preset")
    parser.add_argument("--mode", choices=["tpe", "random"], help="Study sampler")
    parser.add_argument("--memory-cap", action="store_true", help="Restrict hidden dims and batch sizes")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING (default $ENAS_LOG_LEVEL or INFO)")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("tune-baseline", help="Tune the LSTM-only model")
    commands.add_parser("search", help="Run ENAS and derive candidate architectures")

    derived = commands.add_parser("tune-derived", help="Tune with derived architectures as a choice")
    derived.add_argument("arch_file", help="Architecture file written by search")
    derived.add_argument("--plan", help="Layer plan, e.g. 'E', 'E / L', 'L / E'")

    random = commands.add_parser("random-baseline", help="Tune with uniformly sampled architectures")
    random.add_argument("-k", type=int, default=10, help="Number of random architectures")
    random.add_argument("--plan", help="Layer plan, e.g. 'RND', 'RND / L'")

    transfer = commands.add_parser("transfer", help="Tune with another dataset's architectures")
    transfer.add_argument("arch_file", help="Architecture file from the source dataset's search")
    transfer.add_argument("--source", required=True, help="Dataset the architectures were searched on")
    transfer.add_argument("--plan", help="Layer plan")

    report = commands.add_parser("report", help="Collect run directories into a report table")
    report.add_argument("run_dirs", nargs="*", help="Run directories (default: every run under --out)")
    report.add_argument("--output", "-o", help="Directory for report.tsv and report.txt")

    export = commands.add_parser("export-arch-table", help="Print an architecture file as a node table")
    export.add_argument("arch_file")
    export.add_argument("--output", "-o", help="Write the table to this file")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file values with command-line flags layered on top."""
    config = ExperimentConfig.from_yaml(args.config) if args.config else ExperimentConfig()
    budget = {k: v for k, v in {
        "trials": args.trials,
        "concurrency": args.concurrency,
        "preset": args.preset,
        "mode": args.mode,
    }.items() if v is not None}
    update = {}
    if budget:
        update["budget"] = config.budget.model_copy(update=budget)
    if args.seed is not None:
        update["seed"] = args.seed
    if args.out:
        update["out"] = args.out
    if args.memory_cap:
        update["memory_cap"] = True
    config = config.model_copy(update=update)
    # model_copy skips validation
    return ExperimentConfig.model_validate(config.model_dump())


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "export-arch-table":
        print(experiments.cmd_export_arch_table(args.arch_file, args.output))
        return 0

    config = load_config(args)
    if args.command == "report":
        run_dirs = args.run_dirs or experiments.find_run_dirs(config.runs_root())
        frame = experiments.cmd_report(run_dirs, args.output)
        print(experiments.format_report(frame))
        return 0

    if args.command == "tune-baseline":
        summary = experiments.cmd_tune_baseline(config)
    elif args.command == "search":
        path = experiments.cmd_search(config)
        print(f"Derived architectures written to {path}")
        return 0
    elif args.command == "tune-derived":
        summary = experiments.cmd_tune_derived(config, args.arch_file, args.plan)
    elif args.command == "random-baseline":
        summary = experiments.cmd_random_baseline(config, args.k, args.plan)
    else:
        summary = experiments.cmd_transfer(config, args.arch_file, args.source, args.plan)

    print(f"Best trial {summary['trial_id']} of {summary['trials']}: "
          f"dev {summary['dev']['primary']:.4f}, test {summary['test']['primary']:.4f}")
    print(f"Params: {summary['params']}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return dispatch(args)
    except (ConfigError, DatasetError, ArchitectureError, FileNotFoundError) as e:
        logger.error("%s", e)
        return 2
    except Exception:
        logger.exception("Unexpected error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
