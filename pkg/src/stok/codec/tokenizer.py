"""Patch k-means toy tokenizer.

Stands in for a learned VQ tokenizer: every non-overlapping ``p x p`` RGB patch
is flattened (row, column, channel order) and replaced by its nearest codeword.
Pixel values stay in their native 0..255 units throughout.
"""

from __future__ import annotations

from typing import Optional, Protocol

import numpy as np

from ..errors import DataError, ShapeError
from .vq import Codebook, _nearest, lookup, quantize


class Tokenizer(Protocol):
    """What the rest of the package needs from a tokenizer."""

    codebook: Codebook

    def tokenize(self, images: np.ndarray) -> np.ndarray: ...

    def decode(self, indices: np.ndarray) -> np.ndarray: ...


def _as_batch(images) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ShapeError(f"expected image(s) of shape ([N,] H, W, 3), got {images.shape}")
    return images


def extract_patches(images, patch_size: int) -> np.ndarray:
    """``(N, H, W, 3)`` -> ``(N, H/p, W/p, p*p*3)`` float64 patch vectors."""
    images = _as_batch(images)
    N, H, W, C = images.shape
    p = int(patch_size)
    if p < 1 or H % p or W % p:
        raise ShapeError(f"patch_size {p} must divide image size {H}x{W}")
    x = images.astype(np.float64).reshape(N, H // p, p, W // p, p, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(N, H // p, W // p, p * p * C)


def assemble_patches(vectors: np.ndarray, patch_size: int) -> np.ndarray:
    """Inverse of :func:`extract_patches` for a ``(N, h, w, p*p*3)`` array."""
    N, h, w, d = vectors.shape
    p = int(patch_size)
    if d != p * p * 3:
        raise ShapeError(f"codeword dimension {d} != patch_size^2 * 3 = {p * p * 3}")
    x = vectors.reshape(N, h, w, p, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(N, h * p, w * p, 3)


def kmeans_plus_plus(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding over the distinct rows of ``points``."""
    distinct = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if distinct.shape[0] < K:
        raise DataError(f"need at least K={K} distinct patches, found {distinct.shape[0]}")
    centers = np.empty((K, distinct.shape[1]))
    first = int(rng.integers(distinct.shape[0]))
    centers[0] = distinct[first]
    d2 = ((distinct - centers[0]) ** 2).sum(1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            raise DataError("k-means++ ran out of distinct patches")
        idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        idx = min(idx, distinct.shape[0] - 1)
        while d2[idx] == 0:  # guards the rounding edge of the cumulative sum
            idx -= 1
        centers[k] = distinct[idx]
        d2 = np.minimum(d2, ((distinct - centers[k]) ** 2).sum(1))
    return centers


def lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int = 25) -> np.ndarray:
    """Plain Lloyd iterations from ``centers``; empty clusters keep their old center.

    Stops early once the assignment no longer changes.
    """
    points = np.asarray(points, dtype=np.float64)
    centers = np.array(centers, dtype=np.float64)
    K = centers.shape[0]
    labels = None
    for _ in range(max_iter):
        new = _nearest(points, centers)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, points)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled, None]
    return centers


def _separate_duplicates(centers: np.ndarray) -> np.ndarray:
    """Nudge rows that coincide after the float32 cast so the table stays injective."""
    out = centers.astype(np.float32)
    for attempt in range(1, 100):
        _, first, counts = np.unique(out, axis=0, return_index=True, return_counts=True)
        if counts.max() == 1:
            return out
        seen = set(first.tolist())
        for i in range(out.shape[0]):
            if i not in seen:
                out[i, 0] += np.float32(1e-3 * attempt * (i + 1))
    raise DataError("could not separate duplicate centroids")


def fit_toy_codebook(images, patch_size: int, K: int, seed: int = 0, max_iter: int = 25,
                     max_patches: Optional[int] = None) -> Codebook:
    """Fit a K-entry patch codebook with k-means++ seeding and Lloyd refinement.

    ``max_patches`` subsamples the patch pool (without replacement) before
    fitting, which keeps large datasets tractable. Deterministic for a seed.
    """
    patches = extract_patches(images, patch_size).reshape(-1, patch_size * patch_size * 3)
    rng = np.random.default_rng(seed)
    if max_patches is not None and patches.shape[0] > max_patches:
        patches = patches[np.sort(rng.choice(patches.shape[0], max_patches, replace=False))]
    init = kmeans_plus_plus(patches, K, rng)
    return Codebook(_separate_duplicates(lloyd(patches, init, max_iter)))


def tokenize_images(images, codebook: Codebook, patch_size: int) -> np.ndarray:
    """``(N, H, W, 3)`` images -> ``(N, H/p, W/p)`` int64 token grids."""
    patches = extract_patches(images, patch_size)
    if patches.shape[-1] != codebook.d:
        raise ShapeError(f"patch dimension {patches.shape[-1]} != codebook d={codebook.d}")
    return quantize(patches, codebook)


def tokenize_image(image, codebook: Codebook, patch_size: int) -> np.ndarray:
    """Single ``(H, W, 3)`` image -> ``(H/p, W/p)`` token grid."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected a single (H, W, 3) image, got {image.shape}")
    return tokenize_images(image[None], codebook, patch_size)[0]


def decode_tokens(indices, codebook: Codebook, patch_size: int) -> np.ndarray:
    """Tile the codeword of every token back into pixels, clamped to [0, 255].

    Accepts ``(h, w)`` or ``(N, h, w)`` grids and returns float32 images.
    """
    indices = np.asarray(indices)
    single = indices.ndim == 2
    if single:
        indices = indices[None]
    if codebook.d != patch_size * patch_size * 3:
        raise ShapeError(f"codebook d={codebook.d} incompatible with patch_size={patch_size}")
    images = assemble_patches(lookup(indices, codebook), patch_size)
    images = np.clip(images, 0.0, 255.0)
    return images[0] if single else images


class PatchTokenizer:
    """Default :class:`Tokenizer` backed by a patch k-means codebook."""

    def __init__(self, codebook: Codebook, patch_size: int):
        if codebook.d != patch_size * patch_size * 3:
            raise ShapeError(f"codebook d={codebook.d} incompatible with patch_size={patch_size}")
        self.codebook = codebook
        self.patch_size = patch_size

    @classmethod
    def fit(cls, images, patch_size: int, K: int, seed: int = 0, **kw) -> "PatchTokenizer":
        return cls(fit_toy_codebook(images, patch_size, K, seed, **kw), patch_size)

    def tokenize(self, images) -> np.ndarray:
        return tokenize_images(images, self.codebook, self.patch_size)

    def decode(self, indices) -> np.ndarray:
        return decode_tokens(indices, self.codebook, self.patch_size)
