"""Synthetic planted-context tasks, batching and SpecAugment-style masking.

Each label token owns a template: ``W`` consecutive frames, each frame one of
a small pool of shared feature patterns. Because every pattern is reused by
many tokens, a token can only be identified by looking at its whole W-frame
window, so networks whose receptive field covers W are favored.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..autograd import Tensor
from ..autograd.serialization import atomic_write_text, load_tensors, save_tensors
from ..core.exceptions import ArtifactError, ConfigurationError, DimensionError
from ..schemas.config import AugmentConfig, SyntheticTaskSpec
from .objectives import min_frames

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    features: np.ndarray
    labels: Tuple[int, ...]

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class Dataset:
    spec: SyntheticTaskSpec
    splits: Dict[str, List[Utterance]]

    @property
    def train(self) -> List[Utterance]:
        return self.splits["train"]

    @property
    def valid(self) -> List[Utterance]:
        return self.splits["valid"]

    @property
    def test(self) -> List[Utterance]:
        return self.splits["test"]


@dataclass
class Batch:
    """Utterances packed along time; ``lengths`` marks the boundaries."""
    split: str
    features: np.ndarray
    lengths: List[int]
    labels: List[Tuple[int, ...]]
    utt_ids: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.lengths)

    def tensor(self) -> Tensor:
        return Tensor(self.features)


@dataclass
class TaskTemplates:
    patterns: np.ndarray
    codes: np.ndarray


def _pool_size(num_tokens: int, width: int) -> int:
    size = 2
    while size ** width < num_tokens:
        size += 1
    return size


def check_feasible(spec: SyntheticTaskSpec) -> None:
    if spec.min_length < spec.context_width:
        raise ConfigurationError(
            f"min_length {spec.min_length} is shorter than the planted context width {spec.context_width}"
        )
    if spec.label_rate * spec.context_width > 1.0:
        raise ConfigurationError(
            f"label_rate {spec.label_rate} with context width {spec.context_width} needs more frames than exist"
        )


def _templates(spec: SyntheticTaskSpec, rng: np.random.Generator) -> TaskTemplates:
    num_tokens = spec.vocab_size - 1
    pool = _pool_size(num_tokens, spec.context_width)
    patterns = rng.standard_normal((pool, spec.feature_dim))
    codes: List[Tuple[int, ...]] = []
    seen = set()
    while len(codes) < num_tokens:
        code = tuple(int(d) for d in rng.integers(pool, size=spec.context_width))
        if code not in seen:
            seen.add(code)
            codes.append(code)
    return TaskTemplates(patterns=patterns, codes=np.asarray(codes, dtype=np.int64))


def _utterance(
    utt_id: str, spec: SyntheticTaskSpec, templates: TaskTemplates, rng: np.random.Generator
) -> Utterance:
    width = spec.context_width
    length = int(rng.integers(spec.min_length, spec.max_length + 1))
    count = max(1, int(length * spec.label_rate))
    tokens = [int(t) for t in rng.integers(1, spec.vocab_size, size=count)]
    while min_frames(tokens) > length:
        tokens.pop()
    count = len(tokens)

    free = length - count * width
    gaps = rng.multinomial(free, [1.0 / (count + 1)] * (count + 1))
    features = spec.noise_level * rng.standard_normal((length, spec.feature_dim))
    position = 0
    for token, gap in zip(tokens, gaps):
        position += int(gap)
        code = templates.codes[token - 1]
        features[position:position + width] += templates.patterns[code]
        position += width
    return Utterance(utt_id=utt_id, features=features, labels=tuple(tokens))


def _standardize(splits: Dict[str, List[Utterance]]) -> Dict[str, List[Utterance]]:
    frames = np.concatenate([u.features for u in splits["train"]], axis=0)
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    std[std < 1e-12] = 1.0
    return {
        name: [Utterance(u.utt_id, (u.features - mean) / std, u.labels) for u in utterances]
        for name, utterances in splits.items()
    }


def generate_dataset(spec: SyntheticTaskSpec) -> Dataset:
    """Deterministic train/valid/test splits for ``spec``; each split has its own seed stream."""
    check_feasible(spec)
    task_seq, *split_seqs = np.random.SeedSequence(spec.seed & 0xFFFFFFFF).spawn(1 + len(SPLITS))
    templates = _templates(spec, np.random.default_rng(task_seq))
    sizes = {"train": spec.train_size, "valid": spec.valid_size, "test": spec.test_size}
    splits: Dict[str, List[Utterance]] = {}
    for name, seq in zip(SPLITS, split_seqs):
        rng = np.random.default_rng(seq)
        splits[name] = [_utterance(f"{name}-{i:05d}", spec, templates, rng) for i in range(sizes[name])]
    splits = _standardize(splits)
    logger.info(
        f"Generated synthetic task: W={spec.context_width}, vocab={spec.vocab_size}, "
        + ", ".join(f"{k}={len(v)}" for k, v in splits.items())
    )
    return Dataset(spec=spec, splits=splits)


def make_batches(
    utterances: Sequence[Utterance],
    batch_size: int,
    split: str,
    rng: Optional[np.random.Generator] = None,
) -> List[Batch]:
    """Pack utterances into batches; shuffled when ``rng`` is given."""
    order = np.arange(len(utterances))
    if rng is not None:
        order = rng.permutation(len(utterances))
    batches = []
    for start in range(0, len(order), batch_size):
        chosen = [utterances[i] for i in order[start:start + batch_size]]
        batches.append(Batch(
            split=split,
            features=np.concatenate([u.features for u in chosen], axis=0),
            lengths=[u.num_frames for u in chosen],
            labels=[u.labels for u in chosen],
            utt_ids=[u.utt_id for u in chosen],
        ))
    return batches


def spec_augment(
    features: Union[Tensor, np.ndarray],
    time_masks: int,
    freq_masks: int,
    max_widths: Tuple[int, int],
    rng: np.random.Generator,
) -> Union[Tensor, np.ndarray]:
    """Zero ``time_masks`` frame ranges and ``freq_masks`` feature bands of uniform random width."""
    array = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    frames, dims = array.shape
    max_time, max_freq = max_widths
    if time_masks and max_time >= frames:
        raise DimensionError(f"time-mask width {max_time} must be shorter than {frames} frames")
    if freq_masks and max_freq >= dims:
        raise DimensionError(f"feature-mask width {max_freq} must be narrower than {dims} features")
    out = array.copy()
    for _ in range(time_masks):
        width = int(rng.integers(0, max_time + 1))
        start = int(rng.integers(0, frames - width + 1))
        out[start:start + width, :] = 0.0
    for _ in range(freq_masks):
        width = int(rng.integers(0, max_freq + 1))
        start = int(rng.integers(0, dims - width + 1))
        out[:, start:start + width] = 0.0
    return Tensor(out) if isinstance(features, Tensor) else out


def augment_batch(batch: Batch, config: AugmentConfig, rng: np.random.Generator) -> Batch:
    """Mask every utterance of a training batch independently."""
    if not config.enabled:
        return batch
    pieces, start = [], 0
    for length in batch.lengths:
        utterance = batch.features[start:start + length]
        max_time = min(config.max_time_width, length - 1)
        max_freq = min(config.max_freq_width, utterance.shape[1] - 1)
        pieces.append(spec_augment(utterance, config.time_masks, config.freq_masks, (max_time, max_freq), rng))
        start += length
    return Batch(batch.split, np.concatenate(pieces, axis=0), list(batch.lengths), list(batch.labels),
                 list(batch.utt_ids))


def save_dataset(dataset: Dataset, directory: Union[str, Path]) -> None:
    """Per split: ``<split>.index.tsv`` (id, T, labels) and a tensor blob with its manifest."""
    directory = Path(directory)
    for name, utterances in dataset.splits.items():
        lines = ["utt_id\tframes\tlabels"]
        lines += [f"{u.utt_id}\t{u.num_frames}\t{' '.join(map(str, u.labels))}" for u in utterances]
        atomic_write_text(directory / f"{name}.index.tsv", "\n".join(lines) + "\n")
        save_tensors(
            {u.utt_id: u.features for u in utterances},
            directory / f"{name}.bin",
            directory / f"{name}.manifest.json",
            extra={"split": name, "task": dataset.spec.model_dump()},
        )
    logger.info(f"Saved dataset to {directory}")


def load_dataset(directory: Union[str, Path]) -> Dataset:
    directory = Path(directory)
    splits: Dict[str, List[Utterance]] = {}
    spec: Optional[SyntheticTaskSpec] = None
    for name in SPLITS:
        tensors, extra = load_tensors(directory / f"{name}.manifest.json")
        spec = spec or SyntheticTaskSpec.model_validate(extra["task"])
        try:
            rows = (directory / f"{name}.index.tsv").read_text(encoding="utf-8").splitlines()[1:]
        except OSError as e:
            raise ArtifactError(f"missing dataset index for split {name}: {e}") from e
        utterances = []
        for row in rows:
            utt_id, frames, labels = (row.split("\t") + [""])[:3]
            features = tensors[utt_id]
            if features.shape[0] != int(frames):
                raise ArtifactError(f"{utt_id}: index says {frames} frames, blob has {features.shape[0]}")
            utterances.append(Utterance(utt_id, features, tuple(int(t) for t in labels.split())))
        splits[name] = utterances
    return Dataset(spec=spec, splits=splits)


def iter_feature_hashes(utterances: Sequence[Utterance]) -> Iterator[bytes]:
    for u in utterances:
        yield u.features.tobytes()
