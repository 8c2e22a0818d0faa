"""search and compare commands"""

import argparse
import logging

from ..core.dependencies import get_dataset, resolve_output_dir
from ..services import artifacts
from ..services.trainer import compare_schedules, run_search
from .common import add_config_arguments, load_config, print_record

logger = logging.getLogger(__name__)


def cmd_search(args: argparse.Namespace) -> int:
    """Run the alternating search and write genotype.txt, search_log.csv and checkpoints."""
    config = load_config(args)
    out = resolve_output_dir(config, args.out)
    resume = artifacts.load_checkpoint(args.resume) if args.resume else None
    result = run_search(config, get_dataset(config), out_dir=out, resume=resume)
    print(result.genotype.to_text(), end="")
    print(f"steps: {result.state.step}")
    print(f"alpha updates: {len(result.state.alpha_updates)}")
    if result.epochs:
        print(f"final epoch train loss: {result.epochs[-1].mean_train_loss:.6f}")
    print(f"artifacts: {out}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    """Gated schedule vs one-step alternation on the same data and seed."""
    config = load_config(args)
    out = resolve_output_dir(config, args.out)
    for report in compare_schedules(config, get_dataset(config), out_dir=out):
        print_record(report)
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("search", help="differentiable search with the dynamic schedule")
    add_config_arguments(parser)
    parser.add_argument("--force-one-step", action="store_true",
                        help="update the architecture on every step (one-step alternation)")
    parser.add_argument("--resume", type=str, default=None, metavar="CHECKPOINT",
                        help="continue from a search-epochNNN.json checkpoint written with the same config")
    parser.add_argument("--epochs", type=int, default=None, help="search epochs (overrides search.epochs)")
    parser.set_defaults(handler=cmd_search, epochs_section="search")

    parser = subparsers.add_parser("compare", help="paired report: dynamic schedule vs one-step alternation")
    add_config_arguments(parser)
    parser.add_argument("--epochs", type=int, default=None, help="search epochs (overrides search.epochs)")
    parser.set_defaults(handler=cmd_compare, epochs_section="search")
