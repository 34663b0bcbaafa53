"""Named-parameter checkpoint container.

Layout (little-endian)::

    magic (4 bytes) | version u8 | header_len u32 | header (UTF-8 JSON) | f32 payload

The JSON header carries ``config``, ``codebook_id``, free-form ``meta`` and
``params``: an ordered list of ``[name, shape]`` describing the payload.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, MissingArtifactError
from .fileio import atomic_write

VERSION = 1
MAGICS = (b"STAM", b"SMTM", b"SMOD")
_PREFIX = struct.Struct("<4sBI")


@dataclass
class Checkpoint:
    magic: bytes
    config: dict
    state: "OrderedDict[str, torch.Tensor]"
    codebook_id: str = ""
    meta: dict = field(default_factory=dict)


def dumps(ckpt: Checkpoint) -> bytes:
    if ckpt.magic not in MAGICS:
        raise ValueError(f"unknown checkpoint magic {ckpt.magic!r}")
    names, blobs = [], []
    for name, tensor in ckpt.state.items():
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        names.append([name, list(arr.shape)])
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = json.dumps({"config": ckpt.config, "codebook_id": ckpt.codebook_id,
                         "meta": ckpt.meta, "params": names}, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(ckpt.magic, VERSION, len(header)) + header + b"".join(blobs)


def loads(data: bytes, expect_magic: bytes = None) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise FormatError("truncated checkpoint prefix", len(data))
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic not in MAGICS or (expect_magic is not None and magic != expect_magic):
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise FormatError("truncated checkpoint header", len(data))
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", start) from exc
    offset = start + hlen
    state = OrderedDict()
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(data):
            raise FormatError(f"truncated parameter {name!r}", len(data))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
        offset = end
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes", offset)
    return Checkpoint(magic, header["config"], state, header.get("codebook_id", ""),
                      header.get("meta", {}))


def save(path, ckpt: Checkpoint) -> Path:
    return atomic_write(path, dumps(ckpt))


def load(path, expect_magic: bytes = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    return loads(path.read_bytes(), expect_magic)
