"""retrain, baseline and random-search commands"""

import argparse
import logging

from ..core.dependencies import get_dataset, resolve_output_dir
from ..schemas.genotype import baseline_genotype
from ..services.artifacts import read_genotype
from ..services.trainer import retrain, run_random_search
from .common import add_config_arguments, load_config, print_record

logger = logging.getLogger(__name__)


def cmd_retrain(args: argparse.Namespace) -> int:
    config = load_config(args)
    genotype = read_genotype(args.genotype).validate_for(config.space)
    out = resolve_output_dir(config, args.out)
    result = retrain(genotype, config, get_dataset(config), out_dir=out)
    print_record(result.metrics)
    return 0


def cmd_baseline(args: argparse.Namespace) -> int:
    """Retrain the hand-designed reference architecture."""
    config = load_config(args)
    genotype = baseline_genotype(config.space.num_blocks).validate_for(config.space)
    out = resolve_output_dir(config, args.out)
    result = retrain(genotype, config, get_dataset(config), out_dir=out)
    print_record(result.metrics)
    return 0


def cmd_random_search(args: argparse.Namespace) -> int:
    config = load_config(args)
    out = resolve_output_dir(config, args.out)
    result = run_random_search(config, get_dataset(config), trials=args.trials, out_dir=out)
    for record in result.trials:
        print_record(record)
    print_record(result.selection)
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("retrain", help="train a genotype from scratch")
    parser.add_argument("genotype", type=str, help="genotype file written by search")
    add_config_arguments(parser)
    parser.add_argument("--epochs", type=int, default=None, help="training epochs (overrides retrain.epochs)")
    parser.set_defaults(handler=cmd_retrain, epochs_section="retrain")

    parser = subparsers.add_parser("baseline", help="train the reference Conformer genotype")
    add_config_arguments(parser)
    parser.add_argument("--epochs", type=int, default=None, help="training epochs (overrides retrain.epochs)")
    parser.set_defaults(handler=cmd_baseline, epochs_section="retrain")

    parser = subparsers.add_parser("random-search", help="sample and train genotypes, keep the best")
    add_config_arguments(parser)
    parser.add_argument("--trials", type=int, default=None, help="sampled genotypes (overrides random_search.trials)")
    parser.add_argument("--epochs", type=int, default=None,
                        help="epochs per trial (overrides random_search.budget_epochs)")
    parser.set_defaults(handler=cmd_random_search, epochs_section="random_search")
