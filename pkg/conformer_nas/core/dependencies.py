"""Cached builders shared by the commands"""

import logging
from functools import lru_cache
from pathlib import Path
from typing import Optional

from ..config import settings
from ..schemas.config import RunConfig, SyntheticTaskSpec, load_run_config
from ..services.data import Dataset, generate_dataset

logger = logging.getLogger(__name__)


@lru_cache(maxsize=8)
def _dataset_for(task_json: str) -> Dataset:
    spec = SyntheticTaskSpec.model_validate_json(task_json)
    logger.info(f"Generating synthetic dataset (seed {spec.seed})")
    return generate_dataset(spec)


def get_dataset(config: RunConfig) -> Dataset:
    """Dataset for ``config.task``; identical task specs share one instance"""
    return _dataset_for(config.task.model_dump_json())


def get_run_config(path: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    """Load ``path`` or fall back to the desk preset; ``seed`` overrides run.seed"""
    config = load_run_config(path) if path else RunConfig.desk()
    if seed is not None:
        config = config.model_copy(update={"run": config.run.model_copy(update={"seed": seed})})
    return config


def resolve_output_dir(config: RunConfig, cli_value: Optional[str] = None) -> Path:
    """CNAS_OUTPUT_DIR wins over --out, which wins over run.out_dir"""
    if settings.OUTPUT_DIR:
        return Path(settings.OUTPUT_DIR)
    return Path(cli_value or config.run.out_dir)


def reset_services():
    """Drop cached datasets (useful for testing)"""
    logger.info("Resetting cached datasets")
    _dataset_for.cache_clear()
