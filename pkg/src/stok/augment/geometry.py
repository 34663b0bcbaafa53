"""Resolution-independent geometric transforms on ``(N, C, H, W)`` tensors.

Parameters are sampled once in normalized coordinates and can then be applied
to a pixel image and to a coarse feature grid alike, which is how TokenAdapt
pairs the pixel-space augmentation with its S-space counterpart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class GeoParams:
    """One sampled geometric transform.

    ``theta`` maps output to input coordinates in ``affine_grid`` convention
    (``align_corners=False``); it is ``None`` for a pure flip or identity.
    """

    kind: str
    theta: Optional[tuple] = None
    flip: bool = False

    def apply(self, x: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
        if self.flip:
            x = torch.flip(x, dims=[-1])
        if self.theta is None:
            return x
        padding = "reflection" if self.kind == "affine" else "border"
        return warp(x, self.theta, mode=mode, padding_mode=padding)


IDENTITY = GeoParams("identity")


def warp(x: torch.Tensor, theta, mode: str = "bilinear", padding_mode: str = "border"):
    N = x.shape[0]
    mat = torch.as_tensor(theta, dtype=x.dtype).reshape(1, 2, 3).expand(N, 2, 3)
    grid = F.affine_grid(mat, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode=mode, padding_mode=padding_mode, align_corners=False)


def hflip_params() -> GeoParams:
    return GeoParams("hflip", flip=True)


def crop_params(x0: float, y0: float, w: float, h: float) -> GeoParams:
    """Crop the normalized box ``[x0, x0+w] x [y0, y0+h]`` (fractions of the image) and
    stretch it over the full output."""
    theta = ((w, 0.0, 2 * x0 + w - 1), (0.0, h, 2 * y0 + h - 1))
    return GeoParams("rrc", theta=theta)


def sample_rrc(rng: np.random.Generator, scale=(0.35, 1.0), ratio=(3 / 4, 4 / 3)) -> GeoParams:
    """Random resized crop box; area fraction in ``scale``, aspect ratio in ``ratio``."""
    for _ in range(10):
        area = rng.uniform(*scale)
        r = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        w, h = math.sqrt(area * r), math.sqrt(area / r)
        if w <= 1 and h <= 1:
            return crop_params(rng.uniform(0, 1 - w), rng.uniform(0, 1 - h), w, h)
    side = math.sqrt(max(scale))
    return crop_params((1 - side) / 2, (1 - side) / 2, side, side)


def affine_params(degrees: float = 0.0, translate=(0.0, 0.0), shear: float = 0.0,
                  scale: float = 1.0) -> GeoParams:
    """Rotation/translation/shear about the image center.

    ``translate`` is a fraction of image size; angles are in degrees.
    """
    a, s = math.radians(degrees), math.radians(shear)
    # forward map: translate . rotate . shear . scale; theta is its inverse
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    sh = np.array([[1.0, math.tan(s)], [0.0, 1.0]])
    fwd = rot @ sh * scale
    inv = np.linalg.inv(fwd)
    t = np.array([2 * translate[0], 2 * translate[1]])
    offset = -inv @ t
    theta = ((inv[0, 0], inv[0, 1], offset[0]), (inv[1, 0], inv[1, 1], offset[1]))
    return GeoParams("affine", theta=tuple(tuple(float(v) for v in row) for row in theta))


def sample_affine(rng: np.random.Generator, degrees: float = 15.0, translate: float = 0.1,
                  shear: float = 10.0) -> GeoParams:
    return affine_params(rng.uniform(-degrees, degrees),
                         (rng.uniform(-translate, translate), rng.uniform(-translate, translate)),
                         rng.uniform(-shear, shear))


def sample_mixup_lambda(rng: np.random.Generator, alpha: float = 0.8) -> float:
    return float(rng.beta(alpha, alpha)) if alpha > 0 else 1.0


def mixup(x1, x2, lam: float):
    """Convex blend ``lam * x1 + (1 - lam) * x2``."""
    # written as x2 + lam * (x1 - x2) so that identical inputs come back bit-exact
    return x2 + lam * (x1 - x2)
