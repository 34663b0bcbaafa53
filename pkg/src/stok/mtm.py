"""Masked token modeling pre-training.

Masking acts on stem units: with the non-overlapping 2x2 stem each unit is a
2x2 block of token cells, so an ``h x w`` grid has ``n = (h/2)(w/2)``
maskable positions. The encoder sees only visible units (plus the class
token); the decoder pads the sequence back to ``n`` with a shared learned
mask token and predicts all four token indices of every unit. The loss is
cross-entropy over the cells of masked units only.

One masking ratio is drawn per step and shared by the batch, which keeps the
encoder input rectangular.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import truncnorm

from . import checkpoint
from .codec import Codebook, TokenSplit
from .errors import ConfigError, DataError, ShapeError
from .layers import Block, init_weights, sincos_2d
from .model import Backbone, BackboneConfig, unfold_units
from .training import LineLog, TrainRecipe, cosine_lr, make_optimizer, set_lr, steps_per_epoch

MAGIC = b"SMTM"


def sample_mask_ratio(rng: np.random.Generator, mean: float = 0.7, std: float = 0.25,
                      lo: float = 0.4, hi: float = 1.0, size=None):
    """Draw from N(mean, std^2) truncated to [lo, hi] by inverse-CDF sampling."""
    if not (0.0 <= lo < hi <= 1.0):
        raise ConfigError(f"mask ratio bounds must satisfy 0 <= lo < hi <= 1, got [{lo}, {hi}]")
    if std < 0:
        raise ConfigError(f"std must be non-negative, got {std}")
    if std == 0:
        value = min(max(mean, lo), hi)
        return value if size is None else np.full(size, value)
    a, b = (lo - mean) / std, (hi - mean) / std
    out = truncnorm.rvs(a, b, loc=mean, scale=std, size=size, random_state=rng)
    out = np.clip(out, lo, hi)
    return float(out) if size is None else out


@dataclass
class MaskSpec:
    """Per-sample masked/visible unit indices; both sorted, each row of equal length."""

    ratio: float
    masked: np.ndarray
    visible: np.ndarray
    units: tuple

    @property
    def n(self) -> int:
        return self.units[0] * self.units[1]

    def cell_mask(self) -> np.ndarray:
        """Boolean ``(B, h, w)`` grid, True at token cells of masked units."""
        B = len(self.masked)
        uh, uw = self.units
        m = np.zeros((B, self.n), dtype=bool)
        np.put_along_axis(m, self.masked, True, axis=1)
        m = m.reshape(B, uh, 1, uw, 1)
        return np.broadcast_to(m, (B, uh, 2, uw, 2)).reshape(B, 2 * uh, 2 * uw)


def sample_mask(batch: int, units: tuple, ratio: float, rng: np.random.Generator) -> MaskSpec:
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1], got {ratio}")
    n = units[0] * units[1]
    k = int(round(ratio * n))
    order = np.argsort(rng.random((batch, n)), axis=1)
    masked = np.sort(order[:, :k], axis=1)
    visible = np.sort(order[:, k:], axis=1)
    return MaskSpec(ratio, masked, visible, tuple(units))


def apply_mask(Z, ratio: float, rng: np.random.Generator):
    """Split ``(B, h, w, d)`` embeddings into visible units and a MaskSpec.

    Returns ``(visible_units (B, m, 4d), visible_positions (B, m), spec)``.
    """
    Z = torch.as_tensor(Z)
    if Z.ndim != 4 or Z.shape[1] % 2 or Z.shape[2] % 2:
        raise ShapeError(f"expected (B, h, w, d) with even h, w, got {tuple(Z.shape)}")
    spec = sample_mask(Z.shape[0], (Z.shape[1] // 2, Z.shape[2] // 2), ratio, rng)
    units = unfold_units(Z)
    pos = torch.from_numpy(spec.visible)
    visible = torch.gather(units, 1, pos[..., None].expand(-1, -1, units.shape[-1]))
    return visible, pos, spec


@dataclass
class MTMConfig:
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(stem="conv2x2"))
    decoder_depth: int = 2
    decoder_width: int = 128
    decoder_heads: int = 4
    ratio_mean: float = 0.7
    ratio_std: float = 0.25
    ratio_lo: float = 0.4
    ratio_hi: float = 1.0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig.from_dict(self.backbone)
        if self.backbone.stem != "conv2x2":
            raise ConfigError("masked token modeling needs the non-overlapping conv2x2 stem")
        if self.decoder_width % self.decoder_heads:
            raise ConfigError("decoder_width must be divisible by decoder_heads")

    @classmethod
    def from_dict(cls, data: dict) -> "MTMConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown mtm keys {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["backbone"] = self.backbone.to_dict()
        return out


class Decoder(nn.Module):
    def __init__(self, enc_width: int, units: tuple, K: int, depth: int, width: int, heads: int):
        super().__init__()
        self.units = units
        self.K = K
        self.embed = nn.Linear(enc_width, width)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, width))
        self.blocks = nn.ModuleList([Block(width, heads) for _ in range(depth)])
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, 4 * K)
        self.register_buffer("pos", sincos_2d(*units, width)[None], persistent=False)

    def forward(self, latent: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """``latent`` is (B, 1 + m, enc_width) with the class token first."""
        x = self.embed(latent)
        B, n = x.shape[0], self.units[0] * self.units[1]
        full = self.mask_token.to(x.dtype).expand(B, n, -1).clone()
        full = full.scatter(1, positions[..., None].expand(-1, -1, x.shape[-1]), x[:, 1:])
        seq = torch.cat([x[:, :1], full + self.pos.to(x.dtype)], dim=1)
        for block in self.blocks:
            seq = block(seq)
        logits = self.head(self.norm(seq)[:, 1:])
        uh, uw = self.units
        logits = logits.reshape(B, uh, uw, 2, 2, self.K).permute(0, 1, 3, 2, 4, 5)
        return logits.reshape(B, 2 * uh, 2 * uw, self.K)


class MTMModel(nn.Module):
    def __init__(self, config: Optional[MTMConfig] = None):
        super().__init__()
        self.config = config or MTMConfig()
        bc = self.config.backbone
        self.encoder = Backbone(bc)
        self.decoder = Decoder(bc.width, bc.units, bc.K, self.config.decoder_depth,
                               self.config.decoder_width, self.config.decoder_heads)
        init_weights(self)

    def forward(self, visible: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        return mtm_forward(self.encoder, self.decoder, visible, positions)


def mtm_forward(encoder: Backbone, decoder: Decoder, visible, positions) -> torch.Tensor:
    """Encode visible units only, pad with the mask token, decode to ``(B, h, w, K)`` logits."""
    if visible.ndim != 3 or visible.shape[:2] != positions.shape:
        raise ShapeError(f"visible {tuple(visible.shape)} and positions "
                         f"{tuple(positions.shape)} disagree")
    expected = 4 * encoder.config.in_dim
    if visible.shape[-1] != expected:
        raise ShapeError(f"visible units must have {expected} features, got {visible.shape[-1]}")
    return decoder(encoder.forward_visible(visible, positions), positions)


def mtm_loss(logits: torch.Tensor, T, spec: MaskSpec) -> torch.Tensor:
    """Mean cross-entropy over token cells of masked units."""
    mask = torch.from_numpy(np.ascontiguousarray(spec.cell_mask()))
    if not mask.any():
        raise DataError("no masked positions; the reconstruction loss is undefined")
    T = torch.as_tensor(np.asarray(T), dtype=torch.long)
    if logits.shape[:3] != T.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} do not cover tokens {tuple(T.shape)}")
    return F.cross_entropy(logits[mask], T[mask])


def masked_accuracy(logits: torch.Tensor, T, spec: MaskSpec) -> float:
    mask = spec.cell_mask()
    pred = logits.argmax(-1).numpy()
    return float((pred[mask] == np.asarray(T)[mask]).mean())


def _check_codebook(split: TokenSplit, codebook: Codebook) -> None:
    if split.manifest is not None and split.manifest.codebook_id != codebook.id:
        raise DataError(f"token split was built with codebook {split.manifest.codebook_id}, "
                        f"got {codebook.id}")


def pretrain(split: TokenSplit, codebook: Codebook, config: Optional[MTMConfig] = None,
             recipe: Optional[TrainRecipe] = None, log: Optional[LineLog] = None,
             augment=None):
    """Run the masked-token loop; returns ``(model, log)``.

    ``augment`` is an optional callable ``(tokens, rng) -> tokens`` applied to
    each batch, meant for TokenAdapt geometric ops.
    """
    config = config or MTMConfig()
    recipe = recipe or TrainRecipe(epochs=50, lr=1.5e-3, weight_decay=0.05, label_smoothing=0.0)
    _check_codebook(split, codebook)
    tokens = np.asarray(split.tokens)
    bc = config.backbone
    if tokens.shape[1:] != bc.grid or codebook.K != bc.K or codebook.d != bc.in_dim:
        raise ShapeError(f"tokens {tokens.shape[1:]}, K={codebook.K}, d={codebook.d} do not match "
                         f"backbone grid {bc.grid}, K={bc.K}, in_dim={bc.in_dim}")
    torch.manual_seed(recipe.seed)
    model = MTMModel(config)
    table = torch.from_numpy(codebook.standardized())
    log = log or LineLog("epoch,step,loss,ratio_mean")
    rng = np.random.default_rng(recipe.seed)
    N = len(tokens)
    bs = min(recipe.batch_size, N)
    per_epoch = steps_per_epoch(N, bs)
    total = recipe.epochs * per_epoch
    warmup = int(round(recipe.warmup_epochs * per_epoch))
    opt = make_optimizer(model, recipe.lr, recipe.weight_decay)
    model.train()
    step = 0
    for epoch in range(recipe.epochs):
        order = rng.permutation(N)
        for b in range(per_epoch):
            idx = np.sort(order[b * bs:(b + 1) * bs])
            T = tokens[idx]
            if augment is not None:
                T = augment(T, rng)
            ratio = sample_mask_ratio(rng, config.ratio_mean, config.ratio_std,
                                      config.ratio_lo, config.ratio_hi)
            visible, pos, spec = apply_mask(table[torch.from_numpy(T)], ratio, rng)
            set_lr(opt, cosine_lr(step, total, recipe.lr, warmup, recipe.min_lr))
            loss = mtm_loss(model(visible, pos), T, spec)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if recipe.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), recipe.grad_clip)
            opt.step()
            log.add(epoch, step, loss.item(), ratio)
            step += 1
    model.eval()
    return model, log


@torch.no_grad()
def evaluate_masked(model: MTMModel, tokens, codebook: Codebook, ratio: float = 0.7,
                    seed: int = 0, batch_size: int = 256) -> float:
    """Top-1 accuracy of masked-cell predictions at a fixed ratio."""
    model.eval()
    rng = np.random.default_rng(seed)
    table = torch.from_numpy(codebook.standardized())
    hits = total = 0
    tokens = np.asarray(tokens)
    for start in range(0, len(tokens), batch_size):
        T = tokens[start:start + batch_size]
        visible, pos, spec = apply_mask(table[torch.from_numpy(T)], ratio, rng)
        mask = spec.cell_mask()
        pred = model(visible, pos).argmax(-1).numpy()
        hits += int((pred[mask] == T[mask]).sum())
        total += int(mask.sum())
    return hits / max(total, 1)


def save(path, model: MTMModel, codebook_id: str, meta: Optional[dict] = None):
    ckpt = checkpoint.Checkpoint(MAGIC, model.config.to_dict(), model.state_dict(),
                                 codebook_id, meta or {})
    return checkpoint.save(path, ckpt)


def load(path, codebook: Optional[Codebook] = None) -> MTMModel:
    ckpt = checkpoint.load(path, MAGIC)
    if codebook is not None and ckpt.codebook_id != codebook.id:
        raise DataError(f"checkpoint is bound to codebook {ckpt.codebook_id}, got {codebook.id}")
    model = MTMModel(MTMConfig.from_dict(ckpt.config))
    model.load_state_dict(ckpt.state)
    model.eval()
    return model
