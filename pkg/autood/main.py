import argparse
import sys
from typing import List, Optional

import structlog
from pydantic import ValidationError

from autood.cli import commands
from autood.config import settings
from autood.errors import AutoODError, ContractError
from autood.services import experiments
from autood.utils.logging import configure_logging

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="run configuration JSON file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="output directory (AUTOOD_OUT takes precedence)")
    parser.add_argument("--workers", type=int, help="parallel child evaluations per controller step")
    parser.add_argument("--budget", type=int, help="child training steps per evaluation")
    parser.add_argument("--data", help="load splits from a saved dataset directory instead of generating them")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autood", description="Automated outlier-detector search")
    parser.add_argument("--version", action="version", version=f"{settings.APP_NAME} {settings.APP_VERSION}")
    parser.add_argument("--log-level", help="override LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    search = sub.add_parser("search", help="curiosity-guided search with self-imitation")
    _run_flags(search)
    search.set_defaults(handler=commands.search_command)

    random = sub.add_parser("random-search", help="uniform random search at the same budget")
    _run_flags(random)
    random.set_defaults(handler=commands.random_search_command)

    train_one = sub.add_parser("train-one", help="train and score a single model spec")
    _run_flags(train_one)
    train_one.add_argument("--spec", required=True, help="model spec JSON file")
    train_one.set_defaults(handler=commands.train_one_command)

    evaluate = sub.add_parser("evaluate", help="score a child checkpoint on a split")
    _run_flags(evaluate)
    evaluate.add_argument("--checkpoint", required=True, help="child checkpoint directory")
    evaluate.add_argument("--split", choices=["valid", "test"], default="test")
    evaluate.set_defaults(handler=commands.evaluate_command)

    report = sub.add_parser("report", help="summarise a search log directory")
    report.add_argument("--log", required=True, help="directory holding searchlog.jsonl")
    report.add_argument("--top", type=int, default=5)
    report.add_argument("--window", type=int, default=20, help="epochs per summary row")
    report.set_defaults(handler=commands.report_command)

    make_data = sub.add_parser("make-data", help="generate the configured task as IDX files")
    _run_flags(make_data)
    make_data.set_defaults(handler=commands.make_data_command)

    ablate = sub.add_parser("ablate", help="paired-seed comparison of search, random search and ablations")
    _run_flags(ablate)
    ablate.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ablate.add_argument("--arms", nargs="+", default=list(experiments.DEFAULT_ARMS),
                        choices=sorted(experiments.ARMS))
    ablate.add_argument("--at", type=int, nargs="+", default=list(experiments.DEFAULT_EPOCHS),
                        help="epoch counts to report")
    ablate.set_defaults(handler=commands.ablate_command)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except ValidationError as exc:
        logger.error("Invalid input", code="VALIDATION_ERROR", errors=exc.errors(include_url=False))
        return EXIT_USAGE
    except ContractError as exc:
        logger.error("Invalid input", **exc.to_dict())
        return EXIT_USAGE
    except FileNotFoundError as exc:
        logger.error("File not found", code="FILE_NOT_FOUND", path=exc.filename)
        return EXIT_USAGE
    except AutoODError as exc:
        logger.error("Run failed", **exc.to_dict())
        return EXIT_RUNTIME
    except Exception as exc:
        logger.exception("Unexpected error", code="INTERNAL_ERROR", error=str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
