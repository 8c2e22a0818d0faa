"""Candidate operation specs and discrete architectures (genotypes)."""

import re
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field

from ..core.exceptions import GenotypeError
from .config import CONV_CANDIDATES, FFN_CANDIDATES, MHSA_CANDIDATES, SearchSpaceConfig


class Slot(str, Enum):
    """Module slots inside one block, in execution order"""
    MHSA = "MHSA"
    CONV = "CONV"
    FFN = "FFN"


SLOTS: Tuple[Slot, ...] = (Slot.MHSA, Slot.CONV, Slot.FFN)

CANDIDATE_NAMES: Dict[Slot, List[str]] = {
    Slot.MHSA: MHSA_CANDIDATES,
    Slot.CONV: CONV_CANDIDATES,
    Slot.FFN: FFN_CANDIDATES,
}
VALID_NAMES: List[str] = [name for names in CANDIDATE_NAMES.values() for name in names]

_NAME_PATTERN = re.compile(r"^(?:mhsa_head(?P<heads>\d+)|(?P<dil>dil_)?conv_(?P<kernel>\d+)|ffn_(?P<hidden>\d+)|identity)$")


class CandidateOpSpec(BaseModel):
    """One candidate operation, identified by its exact table name"""
    model_config = ConfigDict(frozen=True)

    module_slot: Slot = Field(..., description="Slot the operation fills")
    name: str = Field(..., description="Exact candidate name")
    heads: Optional[int] = Field(None, description="Attention heads (MHSA)")
    kernel: Optional[int] = Field(None, description="Depthwise kernel size (CONV)")
    dilation: Optional[int] = Field(None, description="Depthwise dilation (CONV)")
    hidden_dim: Optional[int] = Field(None, description="Hidden width (FFN)")

    @property
    def is_identity(self) -> bool:
        return self.name == "identity"

    @property
    def receptive_field(self) -> int:
        if self.module_slot is not Slot.CONV or self.is_identity:
            return 1
        return (self.kernel - 1) * self.dilation + 1

    def __str__(self) -> str:
        return self.name

    @classmethod
    def from_name(cls, name: str) -> "CandidateOpSpec":
        name = name.strip()
        if name not in VALID_NAMES:
            raise GenotypeError(f"unknown candidate operation {name!r}", VALID_NAMES)
        match = _NAME_PATTERN.match(name)
        if match.group("heads"):
            return cls(module_slot=Slot.MHSA, name=name, heads=int(match.group("heads")))
        if match.group("kernel"):
            dilation = 2 if match.group("dil") else 1
            return cls(module_slot=Slot.CONV, name=name, kernel=int(match.group("kernel")), dilation=dilation)
        if match.group("hidden"):
            return cls(module_slot=Slot.FFN, name=name, hidden_dim=int(match.group("hidden")))
        return cls(module_slot=Slot.CONV, name=name)


def parse_candidate(name: str, slot: Optional[Slot] = None) -> CandidateOpSpec:
    spec = CandidateOpSpec.from_name(name)
    if slot is not None and spec.module_slot is not slot:
        raise GenotypeError(f"{name!r} is not a {slot.value} candidate", CANDIDATE_NAMES[slot])
    return spec


def slot_candidates(config: SearchSpaceConfig, slot: Slot) -> List[str]:
    return {
        Slot.MHSA: config.mhsa_candidates,
        Slot.CONV: config.conv_candidates,
        Slot.FFN: config.ffn_candidates,
    }[slot]


class BlockChoice(BaseModel):
    """The three operations chosen for one block"""
    model_config = ConfigDict(frozen=True)

    mhsa: str = Field(..., description="Chosen MHSA candidate")
    conv: str = Field(..., description="Chosen Conv candidate")
    ffn: str = Field(..., description="Chosen FFN candidate")

    def name_for(self, slot: Slot) -> str:
        return {Slot.MHSA: self.mhsa, Slot.CONV: self.conv, Slot.FFN: self.ffn}[slot]


class Genotype(BaseModel):
    """A discrete architecture: one choice per slot for every block"""
    model_config = ConfigDict(frozen=True)

    blocks: Tuple[BlockChoice, ...] = Field(..., description="Per-block choices, first block first")

    def __len__(self) -> int:
        return len(self.blocks)

    @classmethod
    def from_names(cls, rows: Sequence[Sequence[str]]) -> "Genotype":
        return cls(blocks=tuple(BlockChoice(mhsa=m, conv=c, ffn=f) for m, c, f in rows))

    def as_names(self) -> List[Tuple[str, str, str]]:
        return [(b.mhsa, b.conv, b.ffn) for b in self.blocks]

    def validate_for(self, config: SearchSpaceConfig) -> "Genotype":
        if len(self.blocks) != config.num_blocks:
            raise GenotypeError(f"genotype has {len(self.blocks)} blocks, search space has {config.num_blocks}")
        for index, block in enumerate(self.blocks):
            for slot in SLOTS:
                name = block.name_for(slot)
                parse_candidate(name, slot)
                allowed = slot_candidates(config, slot)
                if name not in allowed:
                    raise GenotypeError(f"block {index}: {name!r} is not in the {slot.value} candidate list", allowed)
        return self

    def to_text(self) -> str:
        lines = ["# block: MHSA CONV FFN"]
        for index, block in enumerate(self.blocks):
            lines.append(f"block {index}: {block.mhsa} {block.conv} {block.ffn}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Genotype":
        rows = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            label, _, names = line.partition(":")
            parts = names.split()
            if not label.strip().startswith("block") or len(parts) != 3:
                raise GenotypeError(f"malformed genotype line {raw!r}; expected 'block <i>: <mhsa> <conv> <ffn>'")
            for slot, name in zip(SLOTS, parts):
                parse_candidate(name, slot)
            rows.append(parts)
        if not rows:
            raise GenotypeError("genotype file contains no blocks")
        return cls.from_names(rows)


def baseline_genotype(num_blocks: int = 4) -> Genotype:
    """Hand-designed reference: every block uses mhsa_head4, conv_15, ffn_1024."""
    return Genotype.from_names([("mhsa_head4", "conv_15", "ffn_1024")] * num_blocks)
