"""Versioned flat binary container shared by models, checkpoints, features and dataset caches.

Layout (little-endian):
    magic b"DELFI\\0" | uint32 version | uint64 header length | JSON header (sorted keys)
    | uint32 array count | per array: uint32 name length, name, 1-byte dtype code,
    uint32 ndim, uint64 shape[ndim], row-major payload
"""

import json
import logging
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .data_model import DelfiError

_logger = logging.getLogger(__name__)

MAGIC = b"DELFI\x00"
FORMAT_VERSION = 1

_DTYPES = {b"f": np.dtype("<f8"), b"i": np.dtype("<i8")}


class NoArtifactFound(DelfiError):
    pass


class ArtifactFormatError(DelfiError):
    pass


def _dtype_code(array: np.ndarray) -> bytes:
    if np.issubdtype(array.dtype, np.integer):
        return b"i"
    if np.issubdtype(array.dtype, np.floating):
        return b"f"
    raise ArtifactFormatError(f"Unsupported array dtype {array.dtype}")


def store_arrays(path: str | Path, header: dict[str, Any], arrays: dict[str, np.ndarray]):
    """Writes header and arrays to path; identical inputs give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    chunks.append(struct.pack("<Q", len(header_bytes)))
    chunks.append(header_bytes)
    chunks.append(struct.pack("<I", len(arrays)))
    for name, array in arrays.items():
        array = np.asarray(array)
        code = _dtype_code(array)
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(code)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes(order="C"))

    tmp_path = path.with_name(path.name + ".tmp")
    tmp_path.write_bytes(b"".join(chunks))
    os.replace(tmp_path, path)
    _logger.info(f"Stored {len(arrays)} arrays to {path}")


def load_arrays(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Reads a container written by store_arrays."""
    path = Path(path)
    if not path.exists():
        raise NoArtifactFound(f"Artifact not found: {path}")

    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise ArtifactFormatError(f"Bad magic in {path}")
    offset = len(MAGIC)

    def take(fmt: str) -> tuple:
        nonlocal offset
        values = struct.unpack_from(fmt, data, offset)
        offset += struct.calcsize(fmt)
        return values

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise ArtifactFormatError(f"Unsupported format version {version} in {path}")
    (header_len,) = take("<Q")
    header = json.loads(data[offset : offset + header_len].decode("utf-8"))
    offset += header_len

    (count,) = take("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        code = data[offset : offset + 1]
        offset += 1
        if code not in _DTYPES:
            raise ArtifactFormatError(f"Unknown dtype code {code!r} for {name} in {path}")
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        dtype = _DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = (
            np.frombuffer(data, dtype=dtype, count=n_bytes // dtype.itemsize, offset=offset)
            .reshape(shape)
            .astype(dtype.newbyteorder("="))
        )
        offset += n_bytes

    if offset != len(data):
        raise ArtifactFormatError(f"Trailing bytes in {path}")
    return header, arrays


def has_artifact(path: str | Path) -> bool:
    return Path(path).exists()


def delete_artifact(path: str | Path):
    """Deletes the artifact if present."""
    path = Path(path)
    if path.exists():
        path.unlink()
        _logger.info(f"Deleted {path}")
