"""eval, count-space and inspect-alpha commands"""

import argparse
import logging

from ..core.dependencies import get_dataset
from ..core.exceptions import ArtifactError
from ..schemas.genotype import SLOTS
from ..services.artifacts import genotype_from_weights, group_weights, load_checkpoint, read_search_log
from ..services.data import SPLITS
from ..services.search_space import count_architectures
from ..services.trainer import evaluate, network_from_checkpoint
from .common import add_config_arguments, load_config

logger = logging.getLogger(__name__)


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    config = checkpoint.config
    network = network_from_checkpoint(checkpoint)
    utterances = get_dataset(config).splits[args.split]
    report = evaluate(network, utterances, config.retrain.batch_size, args.split)
    print(f"split: {report.split}")
    print(f"utterances: {report.utterances}")
    print(f"loss: {report.loss:.6f}")
    print(f"token_error_rate: {report.token_error_rate:.6f}")
    return 0


def cmd_count_space(args: argparse.Namespace) -> int:
    config = load_config(args)
    print(count_architectures(config.space))
    return 0


def cmd_inspect_alpha(args: argparse.Namespace) -> int:
    """Final per-slot weights of a search log and the genotype they would derive."""
    rows = read_search_log(args.log)
    if not rows:
        raise ArtifactError(f"search log {args.log} has no rows")
    final = rows[-1]
    groups = group_weights(final.weights)
    print(f"step: {final.step}")
    for block in sorted({b for b, _ in groups}):
        for slot in SLOTS:
            weights = "  ".join(f"{name}={value:.6f}" for name, value in groups[(block, slot.value)])
            print(f"block {block} {slot.value}: {weights}")
    print(genotype_from_weights(final.weights).to_text(), end="")
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("eval", help="loss and token error rate of a checkpoint")
    parser.add_argument("checkpoint", type=str, help="checkpoint index (.json)")
    parser.add_argument("--split", choices=SPLITS, default="test", help="split to evaluate")
    parser.set_defaults(handler=cmd_eval)

    parser = subparsers.add_parser("count-space", help="exact number of architectures in the search space")
    add_config_arguments(parser)
    parser.set_defaults(handler=cmd_count_space)

    parser = subparsers.add_parser("inspect-alpha", help="final architecture weights from a search log")
    parser.add_argument("log", type=str, help="search_log.csv")
    parser.set_defaults(handler=cmd_inspect_alpha)
