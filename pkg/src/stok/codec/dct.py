"""JPEG-style 8x8 block DCT input format.

Luma blocks go through an orthonormal 2-D DCT-II and are divided by the
standard JPEG luminance table scaled by the IJG quality rule. No level shift is
applied, so a constant block ``c`` has DC coefficient ``8c``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from ..errors import ShapeError, ConfigError

BLOCK = 8

LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def quant_table(quality: int = 50) -> np.ndarray:
    """IJG scaling of the luminance table, entries clamped to [1, 255]."""
    if not 1 <= quality <= 100:
        raise ConfigError(f"quality must be in [1, 100], got {quality}")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((LUMA_TABLE * scale + 50) / 100), 1, 255)


@dataclass
class DctGrid:
    """Quantized coefficients, shape ``(H/8, W/8, 64)`` in row-major block order."""

    coefficients: np.ndarray
    quality: int = 50

    @property
    def shape(self):
        return self.coefficients.shape


def to_luma(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[-1] == 3:
        return image @ np.array([0.299, 0.587, 0.114])
    raise ShapeError(f"expected (H, W) or (H, W, 3) image, got {image.shape}")


def blockify(plane: np.ndarray) -> np.ndarray:
    H, W = plane.shape
    if H % BLOCK or W % BLOCK:
        raise ShapeError(f"image size {H}x{W} is not divisible by {BLOCK}")
    return plane.reshape(H // BLOCK, BLOCK, W // BLOCK, BLOCK).transpose(0, 2, 1, 3)


def deblockify(blocks: np.ndarray) -> np.ndarray:
    h, w = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(h * BLOCK, w * BLOCK)


def block_dct(plane) -> np.ndarray:
    """Unquantized per-block orthonormal DCT, shape ``(h, w, 8, 8)``."""
    return dctn(blockify(np.asarray(plane, dtype=np.float64)), axes=(2, 3), norm="ortho")


def block_idct(coeffs) -> np.ndarray:
    return deblockify(idctn(np.asarray(coeffs, dtype=np.float64), axes=(2, 3), norm="ortho"))


def quantize_dct(coeffs: np.ndarray, quality: int = 50) -> np.ndarray:
    return np.rint(coeffs / quant_table(quality)).astype(np.int32)


def dequantize_dct(q: np.ndarray, quality: int = 50) -> np.ndarray:
    return q.astype(np.float64) * quant_table(quality)


def dct_tokenize(image, quality: int = 50) -> DctGrid:
    q = quantize_dct(block_dct(to_luma(image)), quality)
    h, w = q.shape[:2]
    return DctGrid(q.reshape(h, w, BLOCK * BLOCK), quality)


def dct_decode(grid: DctGrid) -> np.ndarray:
    """Reconstruct the luma plane, clamped to [0, 255]."""
    h, w, _ = grid.coefficients.shape
    coeffs = dequantize_dct(grid.coefficients.reshape(h, w, BLOCK, BLOCK), grid.quality)
    return np.clip(block_idct(coeffs), 0.0, 255.0)


def dct_embeddings(grid: DctGrid) -> np.ndarray:
    """Float ``(h, w, 64)`` model input: dequantized coefficients scaled to O(1)."""
    h, w, _ = grid.coefficients.shape
    coeffs = dequantize_dct(grid.coefficients.reshape(h, w, BLOCK, BLOCK), grid.quality)
    return (coeffs.reshape(h, w, BLOCK * BLOCK) / 255.0).astype(np.float32)
