"""Fixed-width bit-packed token files, codebook files and label files.

Token file layout (little-endian)::

    "STOK" | version u8 | K u32 | h u16 | w u16 | count u64 | body

The body holds every index of every grid, row-major, grid after grid, each in
exactly ``ceil(log2 K)`` bits, least significant bit first within each byte.
The final byte is zero-padded.
"""

from __future__ import annotations

import math
import struct
from typing import Sequence, Union

import numpy as np

from ..errors import DataError, FormatError, ShapeError
from .vq import Codebook, TokenGrid, check_indices

TOKEN_MAGIC = b"STOK"
CODEBOOK_MAGIC = b"SCBK"
VERSION = 1

_TOKEN_HEADER = struct.Struct("<4sBIHHQ")
_CODEBOOK_HEADER = struct.Struct("<4sBII")
HEADER_BYTES = _TOKEN_HEADER.size  # 21


def bits_per_token(K: int) -> int:
    if K < 2:
        raise DataError(f"K must be >= 2, got {K}")
    return math.ceil(math.log2(K))


def body_bytes(count: int, h: int, w: int, K: int) -> int:
    """Exact packed body size in bytes."""
    return -(-count * h * w * bits_per_token(K) // 8)


def packed_size(count: int, h: int, w: int, K: int) -> int:
    return HEADER_BYTES + body_bytes(count, h, w, K)


def _stack(grids) -> np.ndarray:
    if isinstance(grids, np.ndarray):
        arr = grids
    else:
        arr = np.stack([g.indices if isinstance(g, TokenGrid) else np.asarray(g) for g in grids])
    if arr.ndim != 3:
        raise ShapeError(f"expected a batch of 2-D grids, got shape {arr.shape}")
    return arr


def pack_bits(values: np.ndarray, bits: int) -> bytes:
    """Pack non-negative integers into ``bits``-wide LSB-first fields."""
    v = np.asarray(values, dtype=np.uint64).ravel()
    shifts = np.arange(bits, dtype=np.uint64)
    planes = ((v[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(planes.ravel(), bitorder="little").tobytes()


def unpack_bits(data: bytes, bits: int, count: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    planes = np.unpackbits(raw, count=count * bits, bitorder="little").reshape(count, bits)
    weights = np.uint64(1) << np.arange(bits, dtype=np.uint64)
    return (planes.astype(np.uint64) * weights).sum(1).astype(np.int64)


def pack_tokens(grids: Union[np.ndarray, Sequence], K: int) -> bytes:
    """Serialize a batch of equally-shaped token grids."""
    arr = _stack(grids)
    count, h, w = arr.shape
    if h > 0xFFFF or w > 0xFFFF or K > 0xFFFFFFFF:
        raise DataError("grid or codebook size exceeds header field width")
    check_indices(arr, K)
    header = _TOKEN_HEADER.pack(TOKEN_MAGIC, VERSION, K, h, w, count)
    return header + pack_bits(arr, bits_per_token(K))


def read_header(payload: bytes) -> tuple[int, int, int, int]:
    """Validate the header; returns ``(K, h, w, count)``."""
    if len(payload) < HEADER_BYTES:
        raise FormatError(f"truncated header: {len(payload)} of {HEADER_BYTES} bytes", len(payload))
    magic, version, K, h, w, count = _TOKEN_HEADER.unpack_from(payload, 0)
    if magic != TOKEN_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TOKEN_MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if K < 2:
        raise FormatError(f"invalid codebook size K={K}", 5)
    if h == 0 or w == 0:
        raise FormatError(f"invalid grid shape {h}x{w}", 9)
    return K, h, w, count


def unpack_tokens(payload: bytes) -> np.ndarray:
    """Parse a token file into an ``(count, h, w)`` int64 array."""
    payload = bytes(payload)
    K, h, w, count = read_header(payload)
    expected = packed_size(count, h, w, K)
    if len(payload) < expected:
        raise FormatError(f"truncated payload: {len(payload)} of {expected} bytes", len(payload))
    if len(payload) > expected:
        raise FormatError(f"{len(payload) - expected} trailing bytes after payload", expected)
    bits = bits_per_token(K)
    n = count * h * w
    values = unpack_bits(payload[HEADER_BYTES:], bits, n)
    pad_bits = (expected - HEADER_BYTES) * 8 - n * bits
    if pad_bits and payload[-1] >> (8 - pad_bits):
        raise FormatError("non-zero padding bits", expected - 1)
    if n and values.max() >= K:
        pos = int(np.argmax(values >= K))
        raise FormatError(f"token value {int(values[pos])} >= K={K}", HEADER_BYTES + pos * bits // 8)
    return values.reshape(count, h, w)


def pack_codebook(codebook: Codebook) -> bytes:
    header = _CODEBOOK_HEADER.pack(CODEBOOK_MAGIC, VERSION, codebook.K, codebook.d)
    return header + codebook.entries.astype("<f4").tobytes()


def unpack_codebook(payload: bytes) -> Codebook:
    payload = bytes(payload)
    if len(payload) < _CODEBOOK_HEADER.size:
        raise FormatError("truncated codebook header", len(payload))
    magic, version, K, d = _CODEBOOK_HEADER.unpack_from(payload, 0)
    if magic != CODEBOOK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CODEBOOK_MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = _CODEBOOK_HEADER.size + 4 * K * d
    if len(payload) != expected:
        raise FormatError(f"codebook payload is {len(payload)} bytes, expected {expected}",
                          min(len(payload), expected))
    entries = np.frombuffer(payload, dtype="<f4", offset=_CODEBOOK_HEADER.size).reshape(K, d)
    return Codebook(entries.copy())


def pack_labels(labels) -> bytes:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise DataError("labels must fit in u16")
    return labels.astype("<u2").tobytes()


def unpack_labels(payload: bytes, count: int) -> np.ndarray:
    if len(payload) != 2 * count:
        raise FormatError(f"label file is {len(payload)} bytes, expected {2 * count}",
                          min(len(payload), 2 * count))
    return np.frombuffer(payload, dtype="<u2").astype(np.int64)
