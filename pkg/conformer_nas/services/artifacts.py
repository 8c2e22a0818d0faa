"""Run artifacts: CSV logs, JSON-lines records, genotype files and checkpoints.

Every writer goes through a temporary sibling plus rename, so an interrupted
run leaves either the previous complete file or the new complete file.
"""

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from ..autograd.serialization import atomic_write_text, load_tensors, save_tensors
from ..core.exceptions import ArtifactError, GenotypeError
from ..schemas.config import RunConfig, config_hash, dump_run_config, parse_run_config
from ..schemas.genotype import SLOTS, Genotype, Slot
from ..schemas.records import SearchLogRow

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SEARCH_LOG = "search_log.csv"
ALPHA_TABLE = "alpha.csv"
GENOTYPE_FILE = "genotype.txt"
SEARCH_LOG_COLUMNS = ["step", "train_loss", "valid_loss", "lrate", "S_a", "alpha_updated"]
ALPHA_COLUMNS = ["step", "block", "slot", "candidate", "logit", "weight"]


def weight_column(block: int, slot: Union[Slot, str], name: str) -> str:
    slot = slot.value if isinstance(slot, Slot) else slot
    return f"alpha.{block}.{slot}.{name}"


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buffer.getvalue())


def write_jsonl(path: PathLike, records: Iterable[Union[BaseModel, Dict[str, Any]]]) -> None:
    lines = []
    for record in records:
        payload = record.model_dump() if isinstance(record, BaseModel) else record
        lines.append(json.dumps(payload, sort_keys=False, default=str))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ArtifactError(f"cannot read {path}: {e}") from e
    try:
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    except json.JSONDecodeError as e:
        raise ArtifactError(f"{path}: malformed JSON line: {e}") from e


class SearchLogWriter:
    """Accumulates search rows and rewrites search_log.csv on every flush."""

    def __init__(self, path: Optional[PathLike], weight_columns: List[str]):
        self.path = Path(path) if path is not None else None
        self.weight_columns = weight_columns
        self.rows: List[SearchLogRow] = []

    @property
    def header(self) -> List[str]:
        return SEARCH_LOG_COLUMNS + self.weight_columns

    def append(self, row: SearchLogRow) -> None:
        self.rows.append(row)

    def flush(self) -> None:
        if self.path is None:
            return
        write_csv(self.path, self.header, (row.csv_row(self.weight_columns) for row in self.rows))
        logger.debug(f"Flushed {len(self.rows)} search log rows to {self.path}")


def _parse_float(value: str) -> Optional[float]:
    return None if value == "" else float(value)


def read_search_log(path: PathLike) -> List[SearchLogRow]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ArtifactError(f"cannot read search log {path}: {e}") from e
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ArtifactError(f"search log {path} is empty")
    if header[:len(SEARCH_LOG_COLUMNS)] != SEARCH_LOG_COLUMNS:
        raise ArtifactError(f"{path} is not a search log (header {header[:len(SEARCH_LOG_COLUMNS)]})")
    columns = header[len(SEARCH_LOG_COLUMNS):]
    rows = []
    for number, record in enumerate(reader, start=2):
        if len(record) != len(header):
            raise ArtifactError(f"{path}:{number}: expected {len(header)} fields, got {len(record)}")
        try:
            rows.append(SearchLogRow(
                step=int(record[0]),
                train_loss=float(record[1]),
                valid_loss=_parse_float(record[2]),
                lrate=float(record[3]),
                s_a=float(record[4]),
                alpha_updated=record[5] == "1",
                weights={c: float(v) for c, v in zip(columns, record[len(SEARCH_LOG_COLUMNS):])},
            ))
        except ValueError as e:
            raise ArtifactError(f"{path}:{number}: {e}") from e
    return rows


def group_weights(weights: Dict[str, float]) -> Dict[Tuple[int, str], List[Tuple[str, float]]]:
    """Split alpha.<block>.<slot>.<candidate> columns into per-slot lists, column order preserved."""
    groups: Dict[Tuple[int, str], List[Tuple[str, float]]] = {}
    for column, value in weights.items():
        prefix, block, slot, name = column.split(".", 3)
        if prefix != "alpha":
            raise ArtifactError(f"unexpected weight column {column!r}")
        groups.setdefault((int(block), slot), []).append((name, value))
    return groups


def genotype_from_weights(weights: Dict[str, float]) -> Genotype:
    """Largest weight per slot, lowest column index on ties; softmax preserves the logit order."""
    groups = group_weights(weights)
    blocks = sorted({block for block, _ in groups})
    rows = []
    for block in blocks:
        row = []
        for slot in SLOTS:
            candidates = groups.get((block, slot.value))
            if not candidates:
                raise GenotypeError(f"no weights for block {block} {slot.value}")
            values = [value for _, value in candidates]
            if any(math.isnan(v) for v in values):
                raise GenotypeError(f"weights for block {block} {slot.value} contain NaN")
            row.append(candidates[int(np.argmax(values))][0])
        rows.append(row)
    return Genotype.from_names(rows)


def write_alpha_table(path: PathLike, rows: Iterable[Tuple[int, int, str, str, float, float]]) -> None:
    write_csv(path, ALPHA_COLUMNS, ([s, b, slot, name, repr(logit), repr(w)] for s, b, slot, name, logit, w in rows))


def write_genotype(path: PathLike, genotype: Genotype) -> None:
    atomic_write_text(path, genotype.to_text())
    logger.info(f"Wrote genotype to {path}")


def read_genotype(path: PathLike) -> Genotype:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ArtifactError(f"cannot read genotype file {path}: {e}") from e
    return Genotype.from_text(text)


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    header: Dict[str, Any]

    @property
    def config(self) -> RunConfig:
        return parse_run_config(self.header["config"], source="checkpoint header")

    @property
    def genotype(self) -> Optional[Genotype]:
        text = self.header.get("genotype")
        return Genotype.from_text(text) if text else None

    def section(self, prefix: str) -> Dict[str, np.ndarray]:
        """Entries under ``prefix/`` with the prefix removed."""
        start = f"{prefix}/"
        return {k[len(start):]: v for k, v in self.tensors.items() if k.startswith(start)}


def save_checkpoint(
    directory: PathLike,
    name: str,
    sections: Dict[str, Dict[str, np.ndarray]],
    config: RunConfig,
    header: Dict[str, Any],
) -> Path:
    """Write ``<name>.bin`` and its ``<name>.json`` index; returns the index path."""
    directory = Path(directory)
    tensors = {f"{prefix}/{key}": value for prefix, entries in sections.items() for key, value in entries.items()}
    full_header = dict(header)
    full_header["config_hash"] = config_hash(config)
    full_header["config"] = dump_run_config(config)
    index_path = directory / f"{name}.json"
    save_tensors(tensors, directory / f"{name}.bin", index_path, extra=full_header)
    logger.info(f"Saved checkpoint {index_path}")
    return index_path


def load_checkpoint(path: PathLike) -> Checkpoint:
    tensors, header = load_tensors(path)
    if "config" not in header:
        raise ArtifactError(f"{path} has no run configuration in its header")
    return Checkpoint(tensors=tensors, header=header)


def rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    return rng.bit_generator.state


def restore_rng(state: Dict[str, Any]) -> np.random.Generator:
    bit_generator = getattr(np.random, state["bit_generator"])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)
