"""Augmentations that act on token grids and token-embedding grids.

Embedding grids are channel-last, ``(h, w, d)`` or batched ``(N, h, w, d)``.
Functions accept numpy arrays or torch tensors and return the same kind.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError, ShapeError


def _tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.from_numpy(np.asarray(x)), True


def _back(x: torch.Tensor, to_numpy: bool):
    return x.numpy() if to_numpy else x


def channel_stats(Z, unbiased: bool = False):
    """Per-channel mean and std over the two spatial axes of ``(..., h, w, d)``."""
    Zt, _ = _tensor(Z)
    mu = Zt.mean(dim=(-3, -2), keepdim=True)
    sigma = Zt.var(dim=(-3, -2), keepdim=True, unbiased=unbiased).sqrt()
    return mu, sigma


def color_adapt(Z1, Z2, eps: float = 1e-5):
    """Give ``Z1`` the per-channel spatial mean and std of ``Z2``.

    ``sigma(Z2) * (Z1 - mu(Z1)) / max(sigma(Z1), eps) + mu(Z2)``

    Statistics are population statistics over the two spatial axes. ``eps``
    only matters for (near-)constant channels of ``Z1``; above it the std is
    transferred exactly.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    a, to_np = _tensor(Z1)
    b, _ = _tensor(Z2)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"channel mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    if a.ndim < 3 or b.ndim < 3:
        raise ShapeError("color_adapt expects (..., h, w, d) grids")
    mu1, s1 = channel_stats(a)
    mu2, s2 = channel_stats(b.to(a.dtype))
    return _back(s2 * (a - mu1) / s1.clamp_min(eps) + mu2, to_np)


def emb_noise(Z, std: float, rng: np.random.Generator):
    """Add i.i.d. N(0, std^2) noise."""
    if std < 0:
        raise ConfigError(f"noise std must be non-negative, got {std}")
    Zt, to_np = _tensor(Z)
    if std == 0:
        return _back(Zt.clone(), to_np)
    noise = torch.from_numpy(rng.normal(0.0, std, size=tuple(Zt.shape))).to(Zt.dtype)
    return _back(Zt + noise, to_np)


def sample_crop_box(h: int, w: int, rng: np.random.Generator, scale=(0.35, 1.0),
                    ratio=(3 / 4, 4 / 3)):
    """Integer sub-grid ``(top, left, height, width)`` with area fraction drawn from ``scale``.

    Boxes smaller than one cell are clamped to 1 x 1.
    """
    lo, hi = scale
    if not 0 < lo <= hi <= 1:
        raise ConfigError(f"crop scale range {scale} must lie in (0, 1]")
    area = rng.uniform(lo, hi) * h * w
    r = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
    ch = min(h, max(1, int(round(math.sqrt(area / r)))))
    cw = min(w, max(1, int(round(math.sqrt(area * r)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return top, left, ch, cw


def crop_resize(X, box, mode: str):
    """Crop ``box`` from ``(..., h, w, C)`` and resize back to ``(h, w)``."""
    Xt, to_np = _tensor(X)
    single = Xt.ndim == 3
    if single:
        Xt = Xt[None]
    h, w = Xt.shape[1:3]
    top, left, ch, cw = box
    crop = Xt[:, top:top + ch, left:left + cw].permute(0, 3, 1, 2)
    dtype = crop.dtype
    if mode == "nearest":
        out = F.interpolate(crop.to(torch.float32) if not crop.is_floating_point() else crop,
                            size=(h, w), mode="nearest").to(dtype)
    else:
        out = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)
    out = out.permute(0, 2, 3, 1).contiguous()
    return _back(out[0] if single else out, to_np)


def token_rrc(X, scale_range, rng: np.random.Generator, one_hot: bool = True,
              ratio=(3 / 4, 4 / 3)):
    """Random resized crop of a one-hot (nearest) or embedding (bilinear) grid.

    Batched input gets an independent box per sample.
    """
    Xt, to_np = _tensor(X)
    single = Xt.ndim == 3
    if single:
        Xt = Xt[None]
    h, w = Xt.shape[1:3]
    mode = "nearest" if one_hot else "bilinear"
    out = torch.stack([
        crop_resize(Xt[i], sample_crop_box(h, w, rng, scale_range, ratio), mode)
        for i in range(Xt.shape[0])
    ])
    return _back(out[0] if single else out, to_np)


def sample_cutmix_box(h: int, w: int, rng: np.random.Generator, alpha: float = 1.0):
    """CutMix box from lambda ~ Beta(alpha, alpha): side fractions sqrt(1 - lambda),
    uniform center, clipped to the grid. Returns ``(top, left, bottom, right)``."""
    lam = rng.beta(alpha, alpha) if alpha > 0 else 1.0
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(round(h * cut)), int(round(w * cut))
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    top, bottom = max(cy - ch // 2, 0), min(cy + ch - ch // 2, h)
    left, right = max(cx - cw // 2, 0), min(cx + cw - cw // 2, w)
    return top, left, bottom, right


def token_cutmix(Za, ya, Zb, yb, rng: Optional[np.random.Generator] = None, box=None,
                 alpha: float = 1.0):
    """Paste a rectangle of ``Zb`` into ``Za``.

    Returns ``(mixed grid, mixed label, lam)`` where ``lam`` is the exact
    fraction of cells kept from ``Za``. Labels may be scalars or vectors.
    """
    a, to_np = _tensor(Za)
    b, _ = _tensor(Zb)
    if a.shape != b.shape:
        raise ShapeError(f"cutmix shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    h, w = a.shape[-3], a.shape[-2]
    if box is None:
        box = sample_cutmix_box(h, w, rng, alpha)
    top, left, bottom, right = box
    out = a.clone()
    out[..., top:bottom, left:right, :] = b[..., top:bottom, left:right, :]
    pasted = max(bottom - top, 0) * max(right - left, 0)
    lam = (h * w - pasted) / (h * w)
    mixed = lam * np.asarray(ya, dtype=np.float64) + (1.0 - lam) * np.asarray(yb, dtype=np.float64)
    return _back(out, to_np), mixed, lam


def token_eda_swap(grid, p: float, rng: np.random.Generator):
    """Swap each position, with probability ``p``, with a uniformly chosen 4-neighbour.

    Positions are visited in raster order and swaps are applied in place, so
    the multiset of tokens is preserved. Works on ``(h, w)`` or ``(N, h, w)``.
    """
    if not 0 <= p <= 1:
        raise ConfigError(f"swap probability {p} outside [0, 1]")
    g = np.array(grid, copy=True)
    single = g.ndim == 2
    if single:
        g = g[None]
    N, h, w = g.shape
    rows = np.arange(N)
    for i in range(h):
        for j in range(w):
            nbrs = [(i + di, j + dj) for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1))
                    if 0 <= i + di < h and 0 <= j + dj < w]
            if not nbrs:
                continue
            hit = rng.random(N) < p
            choice = rng.integers(0, len(nbrs), size=N)
            if not hit.any():
                continue
            sel = rows[hit]
            ni = np.array([nbrs[c][0] for c in choice[hit]])
            nj = np.array([nbrs[c][1] for c in choice[hit]])
            here = g[sel, i, j].copy()
            g[sel, i, j] = g[sel, ni, nj]
            g[sel, ni, nj] = here
    return g[0] if single else g
