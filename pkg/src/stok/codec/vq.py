"""Codebook, token grids and nearest-codeword quantization.

Token grids are plain integer arrays of shape ``(h, w)`` (or ``(N, h, w)`` for
batches); embedding grids are float arrays with a trailing channel axis.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import DataError, ShapeError

# Rows of the distance matrix evaluated per chunk; bounds peak memory.
_CHUNK = 8192


@dataclass(frozen=True, eq=False)
class Codebook:
    """K x d table of codeword vectors stored as float32."""

    entries: np.ndarray
    id: str = field(init=False)

    def __post_init__(self):
        entries = np.ascontiguousarray(self.entries, dtype="<f4")
        if entries.ndim != 2:
            raise ShapeError(f"codebook entries must be 2-D, got shape {entries.shape}")
        K, d = entries.shape
        if K < 2 or d < 1:
            raise DataError(f"codebook needs K >= 2 and d >= 1, got K={K}, d={d}")
        if not np.isfinite(entries).all():
            raise DataError("codebook entries must be finite")
        if np.unique(entries, axis=0).shape[0] != K:
            raise DataError("codebook rows must be pairwise distinct")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        digest = hashlib.sha256()
        digest.update(np.array([K, d], dtype="<u4").tobytes())
        digest.update(entries.tobytes())
        object.__setattr__(self, "id", digest.hexdigest()[:16])

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def d(self) -> int:
        return self.entries.shape[1]

    def standardized(self) -> np.ndarray:
        """Entries shifted and scaled by their global mean and std.

        This is the embedding table the learning modules consume; it keeps
        network inputs O(1) regardless of the tokenizer's pixel units.
        """
        e = self.entries.astype(np.float64)
        std = e.std()
        return ((e - e.mean()) / (std if std > 0 else 1.0)).astype(np.float32)

    def __repr__(self):
        return f"Codebook(K={self.K}, d={self.d}, id={self.id})"


@dataclass
class TokenGrid:
    """One stored image: an ``h x w`` grid of codebook indices and an optional label."""

    indices: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices)
        if self.indices.ndim != 2 or min(self.indices.shape) < 1:
            raise ShapeError(f"token grid must be a non-empty 2-D array, got {self.indices.shape}")
        if not np.issubdtype(self.indices.dtype, np.integer):
            raise DataError("token indices must be integers")
        self.indices = self.indices.astype(np.int64)

    @property
    def shape(self) -> tuple[int, int]:
        return self.indices.shape

    def check(self, K: int) -> None:
        check_indices(self.indices, K)


def check_indices(indices: np.ndarray, K: int) -> None:
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= K):
        bad = int(indices.max()) if indices.max() >= K else int(indices.min())
        raise DataError(f"token index {bad} outside [0, {K})")


def lookup(indices, codebook: Codebook, table: Optional[np.ndarray] = None) -> np.ndarray:
    """Replace every index by its codeword; output shape is ``indices.shape + (d,)``.

    ``table`` substitutes another K x d table (e.g. the standardized one).
    """
    if isinstance(indices, TokenGrid):
        indices = indices.indices
    indices = np.asarray(indices)
    check_indices(indices, codebook.K)
    table = codebook.entries if table is None else table
    return table[indices]


def _nearest(x: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the nearest row of ``entries`` for every row of ``x``.

    Squared L2 with ties going to the lowest index. The fast expanded form
    ``|x|^2 - 2 x.z + |z|^2`` only nominates candidates; any row whose runner-up
    is within rounding distance of the minimum is re-scored with exact
    differences so that ties resolve identically to a brute-force scan.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(entries, dtype=np.float64)
    z_sq = (z * z).sum(1)
    out = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], _CHUNK):
        xc = x[start:start + _CHUNK]
        x_sq = (xc * xc).sum(1)
        dist = x_sq[:, None] - 2.0 * (xc @ z.T) + z_sq[None, :]
        best = dist.argmin(1)
        dmin = dist[np.arange(len(xc)), best]
        tol = 1e-9 * (x_sq + z_sq.max() + 1.0)
        close = dist <= (dmin + tol)[:, None]
        ambiguous = np.nonzero(close.sum(1) > 1)[0]
        for r in ambiguous:
            cand = np.nonzero(close[r])[0]
            exact = ((xc[r][None, :] - z[cand]) ** 2).sum(1)
            best[r] = cand[np.argmin(exact)]
        out[start:start + len(xc)] = best
    return out


def quantize(Z, codebook: Codebook) -> np.ndarray:
    """Map each trailing-axis vector of ``Z`` to the index of its nearest codeword."""
    Z = np.asarray(Z)
    if Z.ndim < 1 or Z.shape[-1] != codebook.d:
        raise ShapeError(f"expected trailing dimension {codebook.d}, got shape {Z.shape}")
    if not np.isfinite(Z).all():
        raise DataError("cannot quantize non-finite embeddings")
    flat = Z.reshape(-1, codebook.d)
    return _nearest(flat, codebook.entries).reshape(Z.shape[:-1])
