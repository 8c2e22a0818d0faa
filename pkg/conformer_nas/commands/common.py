"""Arguments and helpers shared by every command"""

import argparse
import json
from typing import Optional

from pydantic import BaseModel

from ..core.dependencies import get_run_config
from ..schemas.config import RunConfig


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None,
                        help="run configuration file (section.key = value); defaults to the desk preset")
    parser.add_argument("--out", type=str, default=None, help="output directory (overrides run.out_dir)")
    parser.add_argument("--seed", type=int, default=None, help="root seed (overrides run.seed)")


def load_config(args: argparse.Namespace) -> RunConfig:
    """Config file plus the command-line overrides present on ``args``"""
    config = get_run_config(args.config, args.seed)
    if getattr(args, "force_one_step", False):
        config = config.model_copy(update={"dss": config.dss.model_copy(update={"force_one": True})})
    epochs: Optional[int] = getattr(args, "epochs", None)
    if epochs is not None and getattr(args, "epochs_section", None):
        section = getattr(config, args.epochs_section)
        field = "budget_epochs" if args.epochs_section == "random_search" else "epochs"
        config = config.model_copy(update={args.epochs_section: section.model_copy(update={field: epochs})})
    return RunConfig.model_validate(config.model_dump())


def print_record(record: BaseModel) -> None:
    print(json.dumps(record.model_dump(), default=str))
