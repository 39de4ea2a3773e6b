"""Binary weight files.

Layout, all little-endian:

    magic "QIDW" | format version u32 | entry count u32
    per entry: name length u16 | name utf-8 | rank u8 | dims u32 each
               | payload, product(dims) float32 values

Rank 0 entries carry exactly one float32 and are used for scalar bookkeeping
(optimizer step counters and the like). Entry order is preserved, so a
load/save round trip reproduces the file byte for byte.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .errors import FormatError
from .numerics import Tensor

MAGIC = b"QIDW"
FORMAT_VERSION = 1


def entry_nbytes(name: str, shape: tuple[int, ...]) -> int:
    """On-disk size of one entry, header plus payload."""
    n_values = 1
    for d in shape:
        n_values *= d
    return 2 + len(name.encode("utf-8")) + 1 + 4 * len(shape) + 4 * n_values


def save_checkpoint(path: str, entries: Mapping[str, "np.ndarray | Tensor"]) -> None:
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<I", FORMAT_VERSION)
    payload += struct.pack("<I", len(entries))
    for name, value in entries.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:32]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"entry rank {arr.ndim} exceeds format limit")
        payload += struct.pack("<H", len(name_bytes))
        payload += name_bytes
        payload += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            payload += struct.pack("<I", d)
        payload += arr.tobytes()
    with open(path, "wb") as f:
        f.write(payload)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read a weight file into name -> float32 array, preserving order."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    pos = 4
    version, pos = _read_u32(blob, pos, path)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    count, pos = _read_u32(blob, pos, path)
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, pos = _read_struct(blob, pos, "<H", path)
        name = _take(blob, pos, name_len, path).decode("utf-8")
        pos += name_len
        rank, pos = _read_struct(blob, pos, "<B", path)
        dims = []
        for _ in range(rank):
            d, pos = _read_u32(blob, pos, path)
            dims.append(d)
        n_values = 1
        for d in dims:
            n_values *= d
        raw = _take(blob, pos, 4 * n_values, path)
        pos += 4 * n_values
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{path}: entry '{name}' holds non-finite values")
        if name in entries:
            raise FormatError(f"{path}: duplicate entry '{name}'")
        entries[name] = arr
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes after last entry")
    return entries


def _read_u32(blob: bytes, pos: int, path: str) -> tuple[int, int]:
    return _read_struct(blob, pos, "<I", path)


def _read_struct(blob: bytes, pos: int, fmt: str, path: str) -> tuple[int, int]:
    size = struct.calcsize(fmt)
    raw = _take(blob, pos, size, path)
    return struct.unpack(fmt, raw)[0], pos + size


def _take(blob: bytes, pos: int, n: int, path: str) -> bytes:
    if pos + n > len(blob):
        raise FormatError(f"{path}: truncated file ({len(blob)} bytes, need {pos + n})")
    return blob[pos : pos + n]
