"""On-disk token datasets and storage accounting.

A dataset directory holds one codebook file and, per split, three files::

    codebook.scbk
    <split>.stok            packed token grids
    <split>.labels          count little-endian u16 labels
    <split>.manifest.json   DatasetManifest
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import DataError, MissingArtifactError
from ..fileio import atomic_write, atomic_write_text
from . import packing
from .vq import Codebook

MANIFEST_KEYS = ("num_images", "grid_h", "grid_w", "K", "bits_per_token", "codebook_id",
                 "payload_bytes", "raw_pixel_bytes", "checksum", "class_names")


@dataclass
class DatasetManifest:
    num_images: int
    grid_h: int
    grid_w: int
    K: int
    bits_per_token: int
    codebook_id: str
    payload_bytes: int
    raw_pixel_bytes: int
    checksum: str
    class_names: list = field(default_factory=list)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.grid_h, self.grid_w

    @property
    def body_bytes(self) -> int:
        return packing.body_bytes(self.num_images, self.grid_h, self.grid_w, self.K)

    @property
    def compression_ratio(self) -> float:
        return self.payload_bytes / self.raw_pixel_bytes

    def validate(self) -> None:
        if self.bits_per_token != packing.bits_per_token(self.K):
            raise DataError(f"bits_per_token {self.bits_per_token} inconsistent with K={self.K}")
        expected = packing.packed_size(self.num_images, self.grid_h, self.grid_w, self.K)
        if self.payload_bytes != expected:
            raise DataError(f"payload_bytes {self.payload_bytes} != analytic size {expected}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        data = json.loads(text)
        keys = set(data)
        if keys != set(MANIFEST_KEYS):
            missing = sorted(set(MANIFEST_KEYS) - keys)
            extra = sorted(keys - set(MANIFEST_KEYS))
            raise DataError(f"manifest keys mismatch: missing={missing} unexpected={extra}")
        manifest = cls(**data)
        manifest.validate()
        return manifest


def build_manifest(payload: bytes, codebook: Codebook, raw_pixel_bytes: int,
                   class_names=()) -> DatasetManifest:
    K, h, w, count = packing.read_header(payload)
    if K != codebook.K:
        raise DataError(f"token file K={K} does not match codebook K={codebook.K}")
    return DatasetManifest(
        num_images=count, grid_h=h, grid_w=w, K=K, bits_per_token=packing.bits_per_token(K),
        codebook_id=codebook.id, payload_bytes=len(payload), raw_pixel_bytes=int(raw_pixel_bytes),
        checksum=hashlib.sha256(payload).hexdigest(), class_names=list(class_names))


def dataset_stats(manifest: DatasetManifest) -> dict:
    """Storage report for one split."""
    return {
        "num_images": manifest.num_images,
        "grid": f"{manifest.grid_h}x{manifest.grid_w}",
        "K": manifest.K,
        "bits_per_token": manifest.bits_per_token,
        "header_bytes": packing.HEADER_BYTES,
        "body_bytes": manifest.body_bytes,
        "payload_bytes": manifest.payload_bytes,
        "raw_pixel_bytes": manifest.raw_pixel_bytes,
        "compression_ratio": manifest.compression_ratio,
        "body_ratio": manifest.body_bytes / manifest.raw_pixel_bytes,
    }


def format_stats(stats: dict) -> str:
    return "\n".join([
        f"images            {stats['num_images']}",
        f"grid              {stats['grid']}  (K={stats['K']}, {stats['bits_per_token']} bits/token)",
        f"raw pixel bytes   {stats['raw_pixel_bytes']:,}",
        f"token body bytes  {stats['body_bytes']:,}",
        f"token file bytes  {stats['payload_bytes']:,}  (header {stats['header_bytes']})",
        f"ratio             {100 * stats['compression_ratio']:.4f}%  "
        f"(body only {100 * stats['body_ratio']:.4f}%)",
    ])


@dataclass
class TokenSplit:
    tokens: np.ndarray
    labels: Optional[np.ndarray]
    manifest: DatasetManifest


def write_codebook(directory, codebook: Codebook) -> Path:
    return atomic_write(Path(directory) / "codebook.scbk", packing.pack_codebook(codebook))


def read_codebook(path) -> Codebook:
    path = Path(path)
    if path.is_dir():
        path = path / "codebook.scbk"
    if not path.exists():
        raise MissingArtifactError(f"codebook not found: {path}")
    return packing.unpack_codebook(path.read_bytes())


def write_split(directory, split: str, tokens: np.ndarray, codebook: Codebook,
                raw_pixel_bytes: int, labels=None, class_names=()) -> DatasetManifest:
    directory = Path(directory)
    payload = packing.pack_tokens(tokens, codebook.K)
    manifest = build_manifest(payload, codebook, raw_pixel_bytes, class_names)
    atomic_write(directory / f"{split}.stok", payload)
    if labels is not None:
        if len(labels) != len(tokens):
            raise DataError(f"{len(labels)} labels for {len(tokens)} grids")
        atomic_write(directory / f"{split}.labels", packing.pack_labels(labels))
    atomic_write_text(directory / f"{split}.manifest.json", manifest.to_json())
    return manifest


def read_manifest(directory, split: str) -> DatasetManifest:
    path = Path(directory) / f"{split}.manifest.json"
    if not path.exists():
        raise MissingArtifactError(f"manifest not found: {path}")
    return DatasetManifest.from_json(path.read_text("utf-8"))


def read_split(directory, split: str, codebook: Optional[Codebook] = None) -> TokenSplit:
    directory = Path(directory)
    manifest = read_manifest(directory, split)
    token_path = directory / f"{split}.stok"
    if not token_path.exists():
        raise MissingArtifactError(f"token file not found: {token_path}")
    payload = token_path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest.checksum:
        raise DataError(f"checksum mismatch for {token_path}")
    if codebook is not None and codebook.id != manifest.codebook_id:
        raise DataError(f"{token_path} was made with codebook {manifest.codebook_id}, "
                        f"active codebook is {codebook.id}")
    tokens = packing.unpack_tokens(payload)
    label_path = directory / f"{split}.labels"
    labels = None
    if label_path.exists():
        labels = packing.unpack_labels(label_path.read_bytes(), manifest.num_images)
    return TokenSplit(tokens, labels, manifest)
