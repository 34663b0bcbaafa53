"""Image dataset ingestion for the command line.

Two layouts are accepted:

* an ``.npz`` archive with ``images`` (N, H, W, 3) uint8, optional ``labels``
  (N,) integers and optional ``class_names``;
* a class-per-directory folder, ``root/<class>/<name>.npy``, each file one
  (H, W, 3) uint8 image. Classes are the sorted subdirectory names.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, MissingArtifactError
from .fileio import atomic_write


@dataclass
class ImageSet:
    images: np.ndarray
    labels: Optional[np.ndarray] = None
    class_names: list = field(default_factory=list)

    @property
    def raw_bytes(self) -> int:
        return int(self.images.size)


def _check_images(images: np.ndarray, where) -> np.ndarray:
    if images.dtype != np.uint8:
        raise DataError(f"{where}: images must be uint8, got {images.dtype}")
    if images.ndim != 4 or images.shape[-1] != 3:
        raise DataError(f"{where}: expected (N, H, W, 3) images, got {images.shape}")
    if len(images) == 0:
        raise DataError(f"{where}: no images")
    return images


def load_images(path) -> ImageSet:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"dataset not found: {path}")
    if path.is_dir():
        return _load_folder(path)
    if path.suffix != ".npz":
        raise DataError(f"{path}: expected an .npz archive or a class-per-directory folder")
    try:
        with np.load(path, allow_pickle=False) as archive:
            if "images" not in archive:
                raise DataError(f"{path}: archive has no 'images' array")
            images = _check_images(archive["images"], path)
            labels = archive["labels"].astype(np.int64) if "labels" in archive else None
            names = [str(n) for n in archive["class_names"]] if "class_names" in archive else []
    except (OSError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: unreadable archive ({exc})") from exc
    if labels is not None and labels.shape != (len(images),):
        raise DataError(f"{path}: {labels.shape} labels for {len(images)} images")
    return ImageSet(images, labels, names)


def _load_folder(root: Path) -> ImageSet:
    entries = sorted(root.iterdir())
    stray = [p for p in entries if not p.is_dir()]
    if stray:
        raise DataError(f"{stray[0]}: expected only class subdirectories in {root}")
    if not entries:
        raise DataError(f"{root}: empty dataset folder")
    images, labels = [], []
    shape = None
    for label, class_dir in enumerate(entries):
        for item in sorted(class_dir.iterdir()):
            if item.suffix != ".npy" or not item.is_file():
                raise DataError(f"{item}: expected .npy image files")
            img = np.load(item, allow_pickle=False)
            if img.dtype != np.uint8 or img.ndim != 3 or img.shape[-1] != 3:
                raise DataError(f"{item}: expected (H, W, 3) uint8, got {img.dtype} {img.shape}")
            if shape is not None and img.shape != shape:
                raise DataError(f"{item}: shape {img.shape} differs from {shape}")
            shape = img.shape
            images.append(img)
            labels.append(label)
    if not images:
        raise DataError(f"{root}: no images found")
    return ImageSet(np.stack(images), np.asarray(labels, dtype=np.int64),
                    [p.name for p in entries])


def save_npz(path, data: ImageSet) -> Path:
    buf = io.BytesIO()
    arrays = {"images": data.images}
    if data.labels is not None:
        arrays["labels"] = data.labels
    if data.class_names:
        arrays["class_names"] = np.asarray(data.class_names)
    np.savez(buf, **arrays)
    return atomic_write(path, buf.getvalue())


def write_ppm(path, image: np.ndarray) -> Path:
    """Binary PPM (P6); enough for quick visual inspection without imaging libraries."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    return atomic_write(path, f"P6 {w} {h} 255\n".encode("ascii") + image.tobytes())
