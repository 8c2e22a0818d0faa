"""Experiment configuration models and the flat ``section.key = value`` file format."""

import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..core.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

MHSA_CANDIDATES = ["mhsa_head4", "mhsa_head8", "mhsa_head16"]
CONV_CANDIDATES = ["identity", "conv_7", "conv_11", "conv_15", "dil_conv_7", "dil_conv_11", "dil_conv_15"]
FFN_CANDIDATES = ["ffn_1024", "ffn_512", "ffn_256"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SearchSpaceConfig(_Section):
    num_blocks: int = Field(4, description="Number of searchable blocks N", ge=1)
    d_model: int = Field(256, description="Attention dimension shared by every block", ge=1)
    feature_dim: int = Field(16, description="Input feature dimension F of the dataset", ge=1)
    vocab_size: int = Field(8, description="Output vocabulary size including blank (id 0)", ge=2)
    mhsa_candidates: List[str] = Field(default_factory=lambda: list(MHSA_CANDIDATES), description="MHSA slot candidates")
    conv_candidates: List[str] = Field(default_factory=lambda: list(CONV_CANDIDATES), description="Conv slot candidates")
    ffn_candidates: List[str] = Field(default_factory=lambda: list(FFN_CANDIDATES), description="FFN slot candidates")
    dropout_rate: float = Field(0.1, description="Dropout rate inside every module", ge=0.0, lt=1.0)
    relative_position: bool = Field(True, description="Add the relative sinusoidal bias to attention logits")

    @field_validator("mhsa_candidates", "conv_candidates", "ffn_candidates", mode="before")
    @classmethod
    def _split_names(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [name.strip() for name in value.split(",") if name.strip()]
        return value

    @field_validator("mhsa_candidates", "conv_candidates", "ffn_candidates")
    @classmethod
    def _non_empty(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("candidate list must not be empty")
        if len(set(value)) != len(value):
            raise ValueError(f"duplicate candidate names in {value}")
        return value


class NoamConfig(_Section):
    d_model: int = Field(256, description="d_model in the Noam formula", ge=1)
    warmup_steps: int = Field(25000, description="Linear warm-up length", ge=1)
    lr_scale: float = Field(1.0, description="Multiplier on the Noam rate", gt=0.0)
    beta1: float = Field(0.9, description="Adam first-moment decay for operation weights", ge=0.0, lt=1.0)
    beta2: float = Field(0.98, description="Adam second-moment decay for operation weights", ge=0.0, lt=1.0)
    eps: float = Field(1e-9, description="Adam epsilon for operation weights", gt=0.0)
    grad_clip: float = Field(5.0, description="Global-norm clip for operation weights (0 disables)", ge=0.0)


class DssConfig(_Section):
    beta: float = Field(2.0, description="Normalization coefficient of the schedule", gt=0.0)
    warmup_steps: int = Field(25000, description="Warm-up shared with the Noam schedule", ge=1)
    force_one: bool = Field(False, description="Fix the approximation steps to 1 (one-step alternation)")


class ObjectiveConfig(_Section):
    label_smoothing: bool = Field(False, description="Add the KL-to-uniform posterior penalty")
    label_smoothing_weight: float = Field(0.1, description="Weight of the smoothing penalty", ge=0.0)


class AugmentConfig(_Section):
    enabled: bool = Field(False, description="Apply time/frequency masking to training inputs")
    time_masks: int = Field(2, description="Number of time masks", ge=0)
    freq_masks: int = Field(2, description="Number of feature masks", ge=0)
    max_time_width: int = Field(5, description="Maximum time-mask width", ge=0)
    max_freq_width: int = Field(3, description="Maximum feature-mask width", ge=0)


class SyntheticTaskSpec(_Section):
    feature_dim: int = Field(16, description="Feature dimension F", ge=1)
    vocab_size: int = Field(8, description="Vocabulary size including blank", ge=2)
    min_length: int = Field(48, description="Shortest utterance in frames", ge=1)
    max_length: int = Field(96, description="Longest utterance in frames", ge=1)
    context_width: int = Field(15, description="Planted context width W in frames", ge=1)
    label_rate: float = Field(0.05, description="Label tokens per frame", gt=0.0, le=1.0)
    noise_level: float = Field(0.3, description="Standard deviation of additive noise", ge=0.0)
    train_size: int = Field(64, description="Training utterances", ge=1)
    valid_size: int = Field(32, description="Validation utterances", ge=1)
    test_size: int = Field(32, description="Test utterances", ge=1)
    seed: int = Field(0, description="Generation seed")

    @model_validator(mode="after")
    def _length_range(self) -> "SyntheticTaskSpec":
        if self.min_length > self.max_length:
            raise ValueError(f"min_length {self.min_length} exceeds max_length {self.max_length}")
        return self


class SearchConfig(_Section):
    epochs: int = Field(4, description="Search epochs over the training split", ge=1)
    batch_size: int = Field(8, description="Utterances per batch", ge=1)
    alpha_lr: float = Field(3e-4, description="Architecture learning rate", gt=0.0)
    alpha_beta1: float = Field(0.9, description="Adam first-moment decay for alpha", ge=0.0, lt=1.0)
    alpha_beta2: float = Field(0.999, description="Adam second-moment decay for alpha", ge=0.0, lt=1.0)
    alpha_eps: float = Field(1e-8, description="Adam epsilon for alpha", gt=0.0)
    alpha_log_every: int = Field(1, description="Steps between alpha table rows", ge=1)


class TrainingConfig(_Section):
    epochs: int = Field(4, description="Retraining epochs", ge=1)
    batch_size: int = Field(8, description="Utterances per batch", ge=1)


class RandomSearchConfig(_Section):
    trials: int = Field(15, description="Sampled architectures", ge=1)
    budget_epochs: int = Field(2, description="Training epochs per sampled architecture", ge=1)


class RunSection(_Section):
    seed: int = Field(0, description="Root seed for every random stream")
    out_dir: str = Field("runs/default", description="Directory for artifacts")


class RunConfig(_Section):
    space: SearchSpaceConfig = Field(default_factory=SearchSpaceConfig)
    noam: NoamConfig = Field(default_factory=NoamConfig)
    dss: DssConfig = Field(default_factory=DssConfig)
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    task: SyntheticTaskSpec = Field(default_factory=SyntheticTaskSpec)
    search: SearchConfig = Field(default_factory=SearchConfig)
    retrain: TrainingConfig = Field(default_factory=TrainingConfig)
    random_search: RandomSearchConfig = Field(default_factory=RandomSearchConfig)
    run: RunSection = Field(default_factory=RunSection)

    @model_validator(mode="after")
    def _consistent(self) -> "RunConfig":
        if self.dss.warmup_steps != self.noam.warmup_steps:
            raise ValueError(
                f"dss.warmup_steps ({self.dss.warmup_steps}) must equal noam.warmup_steps ({self.noam.warmup_steps})"
            )
        if self.space.feature_dim != self.task.feature_dim:
            raise ValueError(f"space.feature_dim ({self.space.feature_dim}) != task.feature_dim ({self.task.feature_dim})")
        if self.space.vocab_size != self.task.vocab_size:
            raise ValueError(f"space.vocab_size ({self.space.vocab_size}) != task.vocab_size ({self.task.vocab_size})")
        return self

    @classmethod
    def full_scale(cls) -> "RunConfig":
        """Constants as published: N=4, d_model 256, warm-up 25000, beta 2.0."""
        return cls(objective=ObjectiveConfig(label_smoothing=True))

    @classmethod
    def desk(cls) -> "RunConfig":
        """CPU-sized preset that keeps the shape of both schedules.

        Warm-up is a quarter of the search steps, so the gate opens early and
        reaches one architecture update per step well before the last epoch.
        """
        task = SyntheticTaskSpec()
        search = SearchConfig(epochs=24, batch_size=4, alpha_lr=1e-3)
        total_steps = search.epochs * math.ceil(task.train_size / search.batch_size)
        warmup = total_steps // 4
        return cls(
            space=SearchSpaceConfig(d_model=64),
            noam=NoamConfig(d_model=64, warmup_steps=warmup, lr_scale=0.5),
            dss=DssConfig(warmup_steps=warmup),
            task=task,
            search=search,
            retrain=TrainingConfig(epochs=12, batch_size=4),
        )


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    if isinstance(value, str):
        return json.dumps(value)
    return str(value)


def _parse_value(text: str, source: str, number: int) -> str:
    """Unquoted values end at ``#``; double-quoted values may contain it."""
    if not text.startswith('"'):
        return text.split("#", 1)[0].strip()
    try:
        value, end = json.JSONDecoder().raw_decode(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{source}:{number}: bad quoted value {text!r}: {e.msg}") from e
    rest = text[end:].strip()
    if rest and not rest.startswith("#"):
        raise ConfigurationError(f"{source}:{number}: unexpected text after quoted value: {rest!r}")
    return value


def dump_run_config(config: RunConfig) -> str:
    lines = []
    for section_name in RunConfig.model_fields:
        section = getattr(config, section_name)
        lines.append(f"# {section_name}")
        for key in type(section).model_fields:
            lines.append(f"{section_name}.{key} = {_format_value(getattr(section, key))}")
        lines.append("")
    return "\n".join(lines)


def parse_run_config(text: str, source: str = "<string>") -> RunConfig:
    sections: Dict[str, Dict[str, str]] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line.split("#", 1)[0]:
            raise ConfigurationError(f"{source}:{number}: expected 'section.key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), _parse_value(value.strip(), source, number)
        if "." not in key:
            raise ConfigurationError(f"{source}:{number}: key {key!r} has no section prefix")
        section, name = key.split(".", 1)
        if section not in RunConfig.model_fields:
            raise ConfigurationError(
                f"{source}:{number}: unknown section {section!r} (valid: {', '.join(RunConfig.model_fields)})"
            )
        if name in sections.setdefault(section, {}):
            raise ConfigurationError(f"{source}:{number}: duplicate key {key!r}")
        sections[section][name] = value
    try:
        return RunConfig.model_validate(sections)
    except ValidationError as e:
        raise ConfigurationError(f"{source}: invalid configuration: {e}") from e


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    logger.info(f"Loading run configuration from {path}")
    return parse_run_config(path.read_text(encoding="utf-8"), source=str(path))


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(dump_run_config(config).encode("utf-8")).hexdigest()
