import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config import ConfigError, RunConfig, parse_ratio
from .const import STAGES
from .runner import StageError, run

_FILE = Path(__file__)
_LOGGER = logging.getLogger(_FILE.stem)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scratch_tickets",
        description="Search, evaluate and switch robust scratch tickets",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in STAGES + ("run",):
        sub = subparsers.add_parser(command, help="Run every [run] stage" if command == "run" else f"Run the {command} stage")
        sub.add_argument("-c", "--config", help="Path to INI run config (default: built-in defaults)")
        #
        sub.add_argument(
            "--ratio",
            type=parse_ratio,
            action="append",
            help="Remaining ratio (repeatable, percents accepted)",
        )
        sub.add_argument("--eps", type=float, action="append", help="Attack epsilon (repeatable)")
        sub.add_argument("--seed", type=int, help="Root seed")
        sub.add_argument(
            "--attack",
            action="append",
            help="Named attack: search adversary for search/train/finetune, eval attack otherwise",
        )
        #
        sub.add_argument("-j", "--jobs", type=int, help="Worker threads for independent jobs")
        sub.add_argument("-o", "--output-dir", "--output_dir", help="Root directory for run outputs")
        sub.add_argument(
            "--data-dir",
            "--data_dir",
            help="Dataset root directory (default: $RST_DATA_DIR or ./data)",
        )
        #
        sub.add_argument("--debug", action="store_true", help="Print DEBUG messages to console")

    return parser


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Command-line values replace the matching config fields."""
    overrides: Dict[str, Any] = {
        "seed": args.seed,
        "jobs": args.jobs,
        "output_dir": args.output_dir,
    }
    if args.ratio:
        overrides["ratios"] = tuple(args.ratio)
    if args.eps:
        overrides["epsilon"] = args.eps[0]
        overrides["epsilons"] = tuple(args.eps)
        overrides["distance_epsilons"] = tuple(args.eps)
    if args.attack:
        if args.command in ("search", "train", "finetune"):
            overrides["search_attack"] = args.attack[0]
        else:
            overrides["eval_attacks"] = tuple(args.attack)

    return config.with_overrides(**overrides)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.INFO)
    _LOGGER.debug(args)

    try:
        config = RunConfig.load(args.config) if args.config else RunConfig()
        config = apply_overrides(config, args)
        stages = None if args.command == "run" else [args.command]
        run_dir = run(config, stages, data_root=args.data_dir)
    except (StageError, ConfigError) as err:
        message = str(err)
        if not message.startswith("["):
            message = f"[{args.command}] {message}"
        print(message, file=sys.stderr)
        return 2

    _LOGGER.info("Outputs in %s", run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
