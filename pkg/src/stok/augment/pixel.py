"""Pixel-space operators on ``(H, W, 3)`` images with values in [0, 255]."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from ..errors import ConfigError
from . import geometry
from .spec import AugSpec

# Five-level corruption ladders for 32 px images, in [0, 1] pixel units for
# noise std and in pixels for the blur sigma.
NOISE_STD = (0.04, 0.06, 0.08, 0.09, 0.10)
BLUR_SIGMA = (0.4, 0.6, 0.7, 0.8, 1.0)
CORRUPTIONS = ("gaussian_noise", "gaussian_blur")


def sample_geometry(spec: AugSpec, rng: np.random.Generator) -> geometry.GeoParams:
    """Draw the geometric parameters for a hflip/rrc/affine spec."""
    q = spec.params
    if spec.op == "hflip":
        return geometry.hflip_params()
    if spec.op == "rrc":
        return geometry.sample_rrc(rng, q["scale"], q["ratio"])
    if spec.op == "affine":
        return geometry.sample_affine(rng, q["degrees"], q["translate"], q["shear"])
    if spec.op == "identity":
        return geometry.IDENTITY
    raise ConfigError(f"{spec.op} is not a geometric op")


def _to_tensor(image) -> torch.Tensor:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ConfigError(f"expected an (H, W, C) image, got shape {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]


def _to_image(x: torch.Tensor) -> np.ndarray:
    return x[0].permute(1, 2, 0).numpy()


def apply_geometry(image, params: geometry.GeoParams) -> np.ndarray:
    return _to_image(params.apply(_to_tensor(image)))


def brightness(image, factor: float) -> np.ndarray:
    """Additive brightness shift by ``factor`` of the full range, clamped."""
    return np.clip(np.asarray(image, dtype=np.float64) + 255.0 * factor, 0.0, 255.0)


def contrast(image, factor: float) -> np.ndarray:
    """Multiplicative contrast, clamped."""
    if factor < 0:
        raise ConfigError("contrast factor must be non-negative")
    return np.clip(np.asarray(image, dtype=np.float64) * factor, 0.0, 255.0)


def pixel_aug(image, spec: AugSpec, rng: np.random.Generator, other=None,
              lam: Optional[float] = None) -> np.ndarray:
    """Apply one pixel-space op (ignoring ``spec.p``); returns float64 pixels.

    ``other`` is the second image for mixup; ``lam`` overrides the sampled
    mixing weight.
    """
    op = spec.op
    if op in ("hflip", "rrc", "affine", "identity"):
        return apply_geometry(image, sample_geometry(spec, rng))
    if op == "mixup":
        if other is None:
            raise ConfigError("mixup needs a second image")
        if lam is None:
            lam = geometry.sample_mixup_lambda(rng, spec.params["alpha"])
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"mixup lambda {lam} outside [0, 1]")
        a = np.asarray(image, dtype=np.float64)
        b = np.asarray(other, dtype=np.float64)
        if a.shape != b.shape:
            raise ConfigError(f"mixup shapes differ: {a.shape} vs {b.shape}")
        return geometry.mixup(a, b, lam)
    if op == "brightness":
        return brightness(image, spec.params["factor"])
    if op == "contrast":
        return contrast(image, spec.params["factor"])
    raise ConfigError(f"{op} is not a pixel-space op")


def corrupt(image, kind: str, severity: int, rng: Optional[np.random.Generator] = None,
            noise_std=NOISE_STD, blur_sigma=BLUR_SIGMA) -> np.ndarray:
    """Gaussian noise or blur at severity 1..5, clamped to [0, 255].

    uint8 input gives rounded uint8 output; anything else gives float64.
    """
    if kind not in CORRUPTIONS:
        raise ConfigError(f"unknown corruption {kind!r}; choose from {CORRUPTIONS}")
    if severity not in (1, 2, 3, 4, 5):
        raise ConfigError(f"severity must be one of 1..5, got {severity!r}")
    x = np.asarray(image)
    is_u8 = x.dtype == np.uint8
    x = x.astype(np.float64)
    if kind == "gaussian_noise":
        rng = np.random.default_rng(0) if rng is None else rng
        x = x + rng.normal(0.0, 255.0 * noise_std[severity - 1], size=x.shape)
    else:
        s = blur_sigma[severity - 1]
        sigma = (s, s, 0) if x.ndim == 3 else (0, s, s, 0)
        x = gaussian_filter(x, sigma=sigma, mode="reflect")
    x = np.clip(x, 0.0, 255.0)
    return np.rint(x).astype(np.uint8) if is_u8 else x
