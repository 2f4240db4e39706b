"""Read and write the versioned binary containers used for every artifact.

Container layout (little-endian)::

    magic (4 bytes) | header length u32 | UTF-8 JSON header | body | CRC32 u32

The CRC covers every byte before it.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Any, Callable, Final

import numpy as np

from beam_align.errors import (
    ArtifactIOError,
    ChecksumError,
    ConfigError,
    DataFormatError,
    TruncatedFileError,
    VersionMismatchError,
)
from beam_align.utils import canonical_json

logger = logging.getLogger(__name__)

_LEN: Final = struct.Struct("<I")
_CRC: Final = struct.Struct("<I")


def write_container(path: str | Path, magic: bytes, header: dict[str, Any], body: bytes) -> Path:
    """Write a container atomically and return its path."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactIOError(f"cannot create {path.parent}: {e.strerror or e}") from e
    header_bytes = canonical_json(header).encode("utf-8")
    blob = magic + _LEN.pack(len(header_bytes)) + header_bytes + body
    blob += _CRC.pack(zlib.crc32(blob) & 0xFFFFFFFF)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as e:
        raise ArtifactIOError(f"cannot write {path}: {e.strerror or e}") from e
    logger.debug("Wrote %s (%d bytes)", path, len(blob))
    return path


def read_container(
        path: str | Path,
        magic: bytes,
        version: int,
        body_size: Callable[[dict[str, Any]], int],
) -> tuple[dict[str, Any], bytes]:
    """Read and verify a container.

    Args:
        path: File to read.
        magic: Expected 4-byte magic.
        version: The format version this reader understands.
        body_size: Computes the expected body length from the header.

    Returns:
        The decoded header and the raw body bytes.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as e:
        raise ConfigError(f"{path} is missing; run the stage that produces it first") from e
    except OSError as e:
        raise ArtifactIOError(f"cannot read {path}: {e.strerror or e}") from e
    if len(blob) < 8:
        raise TruncatedFileError(f"{path}: file too short for a header")
    if blob[:4] != magic:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    (header_len,) = _LEN.unpack_from(blob, 4)
    header_end = 8 + header_len
    if len(blob) < header_end:
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        header = json.loads(blob[8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: header is not valid JSON") from e
    if header.get("version") != version:
        raise VersionMismatchError(
            f"{path}: format version {header.get('version')} is not supported (expected {version})"
        )
    expected = body_size(header)
    present = len(blob) - header_end - _CRC.size
    if present < expected:
        raise TruncatedFileError(f"{path}: header announces {expected} body bytes, found {max(present, 0)}")
    if present > expected:
        raise DataFormatError(f"{path}: {present - expected} unexpected trailing bytes")
    (stored_crc,) = _CRC.unpack_from(blob, len(blob) - _CRC.size)
    actual_crc = zlib.crc32(blob[: len(blob) - _CRC.size]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(f"{path}: CRC32 mismatch ({stored_crc:#010x} != {actual_crc:#010x})")
    return header, blob[header_end: header_end + expected]


def sidecar_path(path: str | Path) -> Path:
    """Return the JSON sidecar path of a raw complex export."""
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_complex_rows(path: str | Path, rows: np.ndarray, sidecar: dict[str, Any]) -> Path:
    """Export complex rows as interleaved little-endian float64 (re, im) pairs."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.complex128))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(rows.astype("<c16").tobytes())
    meta = {**sidecar, "rows": int(rows.shape[0]), "cols": int(rows.shape[1])}
    sidecar_path(path).write_text(canonical_json(meta), encoding="utf-8")
    return path


def read_complex_rows(path: str | Path) -> tuple[np.ndarray, dict[str, Any]]:
    """Read rows written by :func:`write_complex_rows`."""
    path = Path(path)
    try:
        meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise DataFormatError(f"missing export or sidecar for {path}") from e
    rows, cols = int(meta["rows"]), int(meta["cols"])
    if len(raw) != rows * cols * 16:
        raise TruncatedFileError(f"{path}: expected {rows * cols * 16} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<c16").reshape(rows, cols).astype(np.complex128), meta
