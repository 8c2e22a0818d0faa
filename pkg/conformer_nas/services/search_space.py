"""The chain-constrained supernet, genotype derivation, counting and sampling."""

import itertools
import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..autograd import Tensor, softmax
from ..core.exceptions import DimensionError, GenotypeError, SearchSpaceOverflowError
from ..models.module import Initializer, Module, Parameter
from ..models.ops import (
    CandidateOp,
    DropoutContext,
    InputEmbedding,
    OutputHead,
    SlotNorm,
    build_candidate,
)
from ..schemas.config import SearchSpaceConfig
from ..schemas.genotype import SLOTS, CandidateOpSpec, Genotype, Slot, parse_candidate, slot_candidates

logger = logging.getLogger(__name__)

MAX_ARCHITECTURES = 2 ** 63 - 1


def _slot_path(block: int, slot: Slot) -> str:
    return f"blocks.{block}.{slot.value}"


def _needs_norm(specs: Sequence[CandidateOpSpec]) -> bool:
    return any(not spec.is_identity for spec in specs)


class AlphaTable:
    """Architecture logits: one vector per (block, slot), disjoint from network weights."""

    def __init__(self, config: SearchSpaceConfig):
        self.config = config
        self.logits: Dict[Tuple[int, Slot], Parameter] = {}
        for block in range(config.num_blocks):
            for slot in SLOTS:
                size = len(slot_candidates(config, slot))
                self.logits[(block, slot)] = Parameter(np.zeros(size), name=f"alpha.{block}.{slot.value}")

    def __getitem__(self, key: Tuple[int, Slot]) -> Parameter:
        return self.logits[key]

    def keys(self) -> List[Tuple[int, Slot]]:
        return list(self.logits)

    def parameters(self) -> List[Parameter]:
        return list(self.logits.values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def candidate_names(self, slot: Slot) -> List[str]:
        return slot_candidates(self.config, slot)

    def weights(self, block: int, slot: Slot) -> Tensor:
        return softmax(self.logits[(block, slot)], axis=-1)

    def weight_arrays(self) -> Dict[Tuple[int, Slot], np.ndarray]:
        result = {}
        for key, logits in self.logits.items():
            shifted = np.exp(logits.data - np.max(logits.data))
            result[key] = shifted / shifted.sum()
        return result

    def set_logits(self, block: int, slot: Slot, values: Sequence[float]) -> None:
        target = self.logits[(block, slot)]
        values = np.asarray(values, dtype=np.float64)
        if values.shape != target.shape:
            raise DimensionError(f"alpha for block {block} {slot.value} has the wrong length", values.shape, target.shape)
        target.data[...] = values

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data[...] = state[p.name]

    def rows(self, step: int) -> Iterator[Tuple[int, int, str, str, float, float]]:
        """(step, block, slot, candidate_name, logit, softmax_weight) rows."""
        weights = self.weight_arrays()
        for (block, slot), logits in self.logits.items():
            for index, name in enumerate(self.candidate_names(slot)):
                yield step, block, slot.value, name, float(logits.data[index]), float(weights[(block, slot)][index])


class MixedOp(Module):
    """Softmax-weighted sum of every candidate of one slot."""

    def __init__(self, specs: List[CandidateOpSpec], config: SearchSpaceConfig, init: Initializer,
                 context: DropoutContext):
        super().__init__()
        self.norm = SlotNorm(config.d_model, init.child("norm")) if _needs_norm(specs) else None
        self.candidates: List[CandidateOp] = [
            build_candidate(spec, config.d_model, init.child(spec.name), context, config.relative_position)
            for spec in specs
        ]

    def forward(self, x: Tensor, weights: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
        normed = self.norm(x) if self.norm is not None else None
        total = None
        for index, op in enumerate(self.candidates):
            term = weights[index] * op(x, normed, lengths)
            total = term if total is None else total + term
        return total

    def candidate_outputs(self, x: Tensor, lengths: Optional[Sequence[int]] = None) -> List[Tensor]:
        normed = self.norm(x) if self.norm is not None else None
        return [op(x, normed, lengths) for op in self.candidates]


class ChosenOp(Module):
    """One slot of a materialized network: its pre-norm and a single candidate."""

    def __init__(self, spec: CandidateOpSpec, config: SearchSpaceConfig, init: Initializer, context: DropoutContext):
        super().__init__()
        self.norm = SlotNorm(config.d_model, init.child("norm")) if _needs_norm([spec]) else None
        self.op = build_candidate(spec, config.d_model, init.child(spec.name), context, config.relative_position)

    def forward(self, x: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
        normed = self.norm(x) if self.norm is not None else None
        return self.op(x, normed, lengths)


class ConformerNetwork(Module):
    """Embedding, N blocks of MHSA -> CONV -> FFN slots, final norm and output head."""

    def __init__(self, config: SearchSpaceConfig, seed: int):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        init = Initializer(seed)
        self._dropout = DropoutContext(config.dropout_rate, seed)
        self.embedding = InputEmbedding(config.feature_dim, config.d_model, init.child("embedding"), self._dropout)
        self.head = OutputHead(config.d_model, config.vocab_size, init.child("head"))

    @property
    def dropout_rng(self) -> np.random.Generator:
        return self._dropout.rng

    @dropout_rng.setter
    def dropout_rng(self, rng: np.random.Generator) -> None:
        self._dropout.rng = rng

    def _slot_forward(self, block: int, slot: Slot, x: Tensor, lengths: Optional[Sequence[int]]) -> Tensor:
        raise NotImplementedError

    def forward(self, features: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self.config.feature_dim:
            raise DimensionError(
                f"expected features of width {self.config.feature_dim}", features.shape
            )
        x = self.embedding(features, lengths)
        for block in range(self.config.num_blocks):
            for slot in SLOTS:
                x = self._slot_forward(block, slot, x, lengths)
        return self.head(x)


class Supernet(ConformerNetwork):
    """Every candidate in every slot, plus the architecture logits."""

    def __init__(self, config: SearchSpaceConfig, seed: int):
        super().__init__(config, seed)
        init = Initializer(seed)
        self.alpha = AlphaTable(config)
        self.mixed_ops: List[MixedOp] = []
        for block in range(config.num_blocks):
            for slot in SLOTS:
                specs = [parse_candidate(name, slot) for name in slot_candidates(config, slot)]
                self.mixed_ops.append(MixedOp(specs, config, init.child(_slot_path(block, slot)), self._dropout))
        self.trace: List[Tuple[int, int]] = []

    def mixed_op(self, block: int, slot: Slot) -> MixedOp:
        return self.mixed_ops[block * len(SLOTS) + SLOTS.index(slot)]

    def candidate_count(self) -> int:
        return sum(len(op.candidates) for op in self.mixed_ops)

    def _slot_forward(self, block: int, slot: Slot, x: Tensor, lengths: Optional[Sequence[int]]) -> Tensor:
        out = self.mixed_op(block, slot)(x, self.alpha.weights(block, slot), lengths)
        self.trace.append((x.node_id, out.node_id))
        return out

    def forward(self, features: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
        self.trace = []
        return super().forward(features, lengths)


class DerivedModel(ConformerNetwork):
    """A standalone network containing only the genotype's operations."""

    def __init__(self, genotype: Genotype, config: SearchSpaceConfig, seed: int):
        super().__init__(config, seed)
        genotype.validate_for(config)
        self.genotype = genotype
        init = Initializer(seed)
        self.slots: List[ChosenOp] = []
        for block, choice in enumerate(genotype.blocks):
            for slot in SLOTS:
                spec = parse_candidate(choice.name_for(slot), slot)
                self.slots.append(ChosenOp(spec, config, init.child(_slot_path(block, slot)), self._dropout))

    def _slot_forward(self, block: int, slot: Slot, x: Tensor, lengths: Optional[Sequence[int]]) -> Tensor:
        return self.slots[block * len(SLOTS) + SLOTS.index(slot)](x, lengths)


def build_supernet(config: SearchSpaceConfig, seed: int) -> Supernet:
    supernet = Supernet(config, seed)
    logger.info(
        f"Built supernet: {config.num_blocks} blocks, {supernet.candidate_count()} candidate operations, "
        f"{supernet.parameter_count():,} weights"
    )
    return supernet


def mixed_forward(
    supernet: Supernet, x: Tensor, train_mode: bool, lengths: Optional[Sequence[int]] = None
) -> Tensor:
    supernet.train(train_mode)
    return supernet(x, lengths)


def derive_genotype(alpha: AlphaTable) -> Genotype:
    """Largest-logit candidate per slot; ties go to the lowest index."""
    rows = []
    for block in range(alpha.config.num_blocks):
        row = []
        for slot in SLOTS:
            logits = alpha[(block, slot)].data
            if np.isnan(logits).any():
                raise GenotypeError(f"alpha for block {block} {slot.value} contains NaN")
            row.append(alpha.candidate_names(slot)[int(np.argmax(logits))])
        rows.append(row)
    return Genotype.from_names(rows)


def count_architectures(config: SearchSpaceConfig) -> int:
    per_block = 1
    for slot in SLOTS:
        per_block *= len(slot_candidates(config, slot))
    message = f"{per_block}^{config.num_blocks} architectures exceed the supported range ({MAX_ARCHITECTURES})"
    # Log-space test first so a huge block count never builds the integer.
    if config.num_blocks * math.log(per_block) > math.log(MAX_ARCHITECTURES) + 1e-9:
        raise SearchSpaceOverflowError(message)
    total = per_block ** config.num_blocks
    if total > MAX_ARCHITECTURES:
        raise SearchSpaceOverflowError(message)
    return total


def enumerate_genotypes(config: SearchSpaceConfig) -> Iterator[Genotype]:
    block_choices = list(itertools.product(*(slot_candidates(config, slot) for slot in SLOTS)))
    for rows in itertools.product(block_choices, repeat=config.num_blocks):
        yield Genotype.from_names(rows)


def sample_random_genotype(config: SearchSpaceConfig, rng: np.random.Generator) -> Genotype:
    rows = []
    for _ in range(config.num_blocks):
        row = []
        for slot in SLOTS:
            names = slot_candidates(config, slot)
            row.append(names[int(rng.integers(len(names)))])
        rows.append(row)
    return Genotype.from_names(rows)


def materialize(genotype: Genotype, config: SearchSpaceConfig, seed: int) -> DerivedModel:
    """Fresh network for ``genotype``; weights come from ``seed``, never from a supernet."""
    model = DerivedModel(genotype, config, seed)
    logger.info(f"Materialized genotype with {model.parameter_count():,} weights")
    return model


def parameter_manifest(network: Module) -> Dict[str, Tuple[int, ...]]:
    return {name: p.shape for name, p in network.named_parameters()}
