"""Named-tensor blobs.

Blob layout (little-endian), one record per tensor, back to back:

    uint32  rank
    uint64  dim[0] ... dim[rank-1]
    float64 data[prod(dims)]   (row-major)

The human-readable index (JSON) maps each tensor name to its byte offset,
shape and the blob file it lives in.
"""

import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from ..core.exceptions import ArtifactError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_RANK = struct.Struct("<I")
_DIM = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=_DTYPE, order="C")
    header = _RANK.pack(array.ndim) + b"".join(_DIM.pack(d) for d in array.shape)
    return header + array.tobytes(order="C")


def decode_tensor(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, next offset)."""
    try:
        (rank,) = _RANK.unpack_from(buffer, offset)
        offset += _RANK.size
        dims = []
        for _ in range(rank):
            (dim,) = _DIM.unpack_from(buffer, offset)
            dims.append(dim)
            offset += _DIM.size
        count = int(np.prod(dims)) if dims else 1
        end = offset + count * _DTYPE.itemsize
        if end > len(buffer):
            raise ArtifactError(f"tensor record truncated at byte {offset}")
        array = np.frombuffer(buffer, dtype=_DTYPE, count=count, offset=offset).reshape(dims)
        return array.astype(np.float64), end
    except struct.error as e:
        raise ArtifactError(f"corrupt tensor record at byte {offset}: {e}") from e


def atomic_write_bytes(path: PathLike, payload: bytes) -> None:
    """Write to a temporary sibling then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp, path)
    except OSError as e:
        raise ArtifactError(f"failed to write {path}: {e}") from e


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_tensors(
    tensors: Mapping[str, np.ndarray],
    blob_path: PathLike,
    index_path: PathLike,
    extra: Optional[Dict[str, Any]] = None,
) -> None:
    """Write ``tensors`` to one blob plus a JSON index."""
    blob_path, index_path = Path(blob_path), Path(index_path)
    chunks = []
    entries = []
    offset = 0
    for name, array in tensors.items():
        record = encode_tensor(np.asarray(array))
        entries.append({"name": name, "offset": offset, "shape": list(np.shape(array))})
        chunks.append(record)
        offset += len(record)
    index = {"format": "f64-le/v1", "blob": blob_path.name, "tensors": entries}
    if extra:
        index["extra"] = extra
    atomic_write_bytes(blob_path, b"".join(chunks))
    atomic_write_text(index_path, json.dumps(index, indent=2, sort_keys=False))
    logger.debug(f"Saved {len(entries)} tensors to {blob_path}")


def load_tensors(index_path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read an index written by :func:`save_tensors`; returns (tensors, extra)."""
    index_path = Path(index_path)
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"))
        buffer = (index_path.parent / index["blob"]).read_bytes()
    except FileNotFoundError as e:
        raise ArtifactError(f"missing tensor file: {e.filename}") from e
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise ArtifactError(f"unreadable tensor index {index_path}: {e}") from e

    tensors: Dict[str, np.ndarray] = {}
    for entry in index.get("tensors", []):
        array, _ = decode_tensor(buffer, entry["offset"])
        if list(array.shape) != list(entry["shape"]):
            raise ArtifactError(f"shape mismatch for {entry['name']}: index says {entry['shape']}")
        tensors[entry["name"]] = array
    return tensors, index.get("extra", {})
