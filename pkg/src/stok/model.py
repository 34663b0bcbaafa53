"""Tiny ViT backbone over token-embedding grids, plus classification head.

Input is a batch of embedding grids ``(B, h, w, d)``. A stem adapter maps the
grid to ``(h/2) x (w/2)`` units of width ``D``:

* ``conv2x2`` - non-overlapping 2x2 patches (a linear map on each unfolded
  patch), so units can be embedded independently, as masked modeling needs;
* ``conv4x4_overlap`` - 4x4 kernel, stride 2, padding 1.

A learned class token is prepended and fixed 2-D sine-cosine positions are
added to the units.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .augment.pipeline import Pipeline
from .augment.pixel import corrupt
from .codec import Codebook, TokenSplit
from .errors import ConfigError, DataError, ShapeError
from .layers import Block, init_weights, sincos_2d
from .training import LineLog, TrainRecipe, cosine_lr, make_optimizer, set_lr, steps_per_epoch

MAGIC = b"SMOD"

STEMS = ("conv2x2", "conv4x4_overlap")


@dataclass
class BackboneConfig:
    grid: tuple = (8, 8)
    in_dim: int = 48
    depth: int = 6
    width: int = 192
    heads: int = 3
    mlp_ratio: float = 4.0
    stem: str = "conv4x4_overlap"
    K: int = 512
    num_classes: int = 10

    def __post_init__(self):
        self.grid = tuple(self.grid)
        if self.stem not in STEMS:
            raise ConfigError(f"stem must be one of {STEMS}, got {self.stem!r}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.grid[0] % 2 or self.grid[1] % 2:
            raise ConfigError(f"grid {self.grid} must have even sides")
        if min(self.depth, self.width, self.in_dim) < 1:
            raise ConfigError("depth, width and in_dim must be positive")

    @property
    def units(self) -> tuple[int, int]:
        return self.grid[0] // 2, self.grid[1] // 2

    @classmethod
    def from_dict(cls, data: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown backbone keys {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = list(self.grid)
        return out


def unfold_units(Z: torch.Tensor) -> torch.Tensor:
    """``(B, h, w, d)`` -> ``(B, h/2 * w/2, 4d)``; each unit is its 2x2 cells, row-major."""
    B, h, w, d = Z.shape
    x = Z.reshape(B, h // 2, 2, w // 2, 2, d).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (h // 2) * (w // 2), 4 * d)


class Stem(nn.Module):
    def __init__(self, kind: str, in_dim: int, width: int):
        super().__init__()
        self.kind = kind
        if kind == "conv2x2":
            self.proj = nn.Linear(4 * in_dim, width)
        else:
            self.proj = nn.Conv2d(in_dim, width, kernel_size=4, stride=2, padding=1)

    def forward(self, Z: torch.Tensor) -> torch.Tensor:
        if self.kind == "conv2x2":
            return self.proj(unfold_units(Z))
        x = self.proj(Z.permute(0, 3, 1, 2))
        return x.flatten(2).transpose(1, 2)

    def embed_units(self, units: torch.Tensor) -> torch.Tensor:
        """Embed already-unfolded 2x2 units (conv2x2 only)."""
        if self.kind != "conv2x2":
            raise ConfigError("only the non-overlapping conv2x2 stem embeds units independently")
        return self.proj(units)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c = config
        self.stem = Stem(c.stem, c.in_dim, c.width)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c.width))
        self.blocks = nn.ModuleList([Block(c.width, c.heads, c.mlp_ratio) for _ in range(c.depth)])
        self.norm = nn.LayerNorm(c.width)
        self.register_buffer("pos", sincos_2d(*c.units, c.width)[None], persistent=False)

    def _check(self, Z: torch.Tensor) -> None:
        c = self.config
        if Z.ndim != 4 or tuple(Z.shape[1:3]) != c.grid or Z.shape[3] != c.in_dim:
            raise ShapeError(f"expected (B, {c.grid[0]}, {c.grid[1]}, {c.in_dim}) input, "
                             f"got {tuple(Z.shape)}")

    def _encode(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1).to(x.dtype), x], dim=1)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def forward(self, Z: torch.Tensor) -> torch.Tensor:
        """Full grid -> ``(B, 1 + units, width)``; index 0 is the class token."""
        self._check(Z)
        return self._encode(self.stem(Z) + self.pos.to(Z.dtype))

    def forward_visible(self, units: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Encode only the given unfolded units at unit indices ``positions`` (B, m)."""
        x = self.stem.embed_units(units)
        pos = self.pos[0].to(x.dtype)[positions]
        return self._encode(x + pos)


class Classifier(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)
        self.head = nn.Linear(config.width, config.num_classes)
        init_weights(self)

    def features(self, Z: torch.Tensor) -> torch.Tensor:
        return self.backbone(Z)[:, 0]

    def forward(self, Z: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(Z))


def forward_backbone(Z, model: Classifier) -> torch.Tensor:
    """Class-token features for a batch of embedding grids."""
    return model.features(torch.as_tensor(Z))


def _check_split(split: TokenSplit, codebook: Codebook, config: BackboneConfig) -> None:
    tokens = np.asarray(split.tokens)
    if split.labels is None or len(split.labels) != len(tokens):
        n = None if split.labels is None else len(split.labels)
        raise DataError(f"label file has {n} entries for {len(tokens)} token grids")
    if len(tokens) and (np.min(split.labels) < 0 or np.max(split.labels) >= config.num_classes):
        raise DataError(f"labels must lie in [0, {config.num_classes})")
    if split.manifest is not None and split.manifest.codebook_id != codebook.id:
        raise DataError(f"token split was built with codebook {split.manifest.codebook_id}, "
                        f"got {codebook.id}")
    if tokens.shape[1:] != config.grid or codebook.d != config.in_dim:
        raise ShapeError(f"tokens {tokens.shape[1:]} with d={codebook.d} do not match "
                         f"grid {config.grid}, in_dim={config.in_dim}")


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, smoothing: float = 0.0):
    C = logits.shape[-1]
    targets = targets * (1.0 - smoothing) + smoothing / C
    return -(targets * F.log_softmax(logits, dim=-1)).sum(-1).mean()


@torch.no_grad()
def predict(model: Classifier, tokens, table: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    model.eval()
    tokens = np.asarray(tokens)
    out = [model(table[torch.from_numpy(tokens[i:i + batch_size])]).argmax(-1).numpy()
           for i in range(0, len(tokens), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Classifier, tokens, labels, table: torch.Tensor) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float((predict(model, tokens, table) == labels).mean())


def train_supervised(split: TokenSplit, codebook: Codebook, config: BackboneConfig,
                     recipe: Optional[TrainRecipe] = None, augment: Sequence = (),
                     token_adapt=None, val: Optional[TokenSplit] = None,
                     log: Optional[LineLog] = None, model: Optional[Classifier] = None):
    """Train a classifier on token grids; returns ``(model, log)``.

    ``augment`` is a list of AugSpec fed through a :class:`Pipeline`. With
    ``model`` given, training continues from it instead of a fresh init.
    """
    recipe = recipe or TrainRecipe()
    _check_split(split, codebook, config)
    if val is not None:
        _check_split(val, codebook, config)
    table = torch.from_numpy(codebook.standardized())
    if model is None:
        torch.manual_seed(recipe.seed)
        model = Classifier(config)
    pipeline = Pipeline(list(augment), table, config.num_classes, token_adapt)
    log = log or LineLog("epoch,split,metric,value")
    rng = np.random.default_rng(recipe.seed)
    tokens, labels = np.asarray(split.tokens), np.asarray(split.labels)
    N = len(tokens)
    bs = min(recipe.batch_size, N)
    per_epoch = steps_per_epoch(N, bs)
    total = recipe.epochs * per_epoch
    warmup = int(round(recipe.warmup_epochs * per_epoch))
    opt = make_optimizer(model, recipe.lr, recipe.weight_decay)
    step = 0
    for epoch in range(recipe.epochs):
        model.train()
        order = rng.permutation(N)
        losses = []
        for b in range(per_epoch):
            idx = np.sort(order[b * bs:(b + 1) * bs])
            Z, targets = pipeline(tokens[idx], labels[idx], rng)
            set_lr(opt, cosine_lr(step, total, recipe.lr, warmup, recipe.min_lr))
            loss = soft_cross_entropy(model(Z), targets, recipe.label_smoothing)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if recipe.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), recipe.grad_clip)
            opt.step()
            losses.append(loss.item())
            step += 1
        log.add(epoch, "train", "loss", float(np.mean(losses)))
        if val is not None:
            log.add(epoch, "val", "top1", accuracy(model, val.tokens, val.labels, table))
    model.eval()
    return model, log


def transfer_encoder(model: Classifier, encoder_state: dict, log: Optional[LineLog] = None):
    """Copy ``encoder.*`` weights into ``model.backbone``.

    A stem whose shapes differ is left at its fresh init and reported; any
    other missing or mis-shaped parameter raises a DataError listing all of them.
    """
    target = model.backbone.state_dict()
    source = {k[len("encoder."):]: v for k, v in encoder_state.items() if k.startswith("encoder.")}
    stem_keys = [k for k in target if k.startswith("stem.")]
    stem_ok = all(k in source and source[k].shape == target[k].shape for k in stem_keys)
    problems = []
    for k, v in target.items():
        if k.startswith("stem.") and not stem_ok:
            continue
        if k not in source:
            problems.append(f"missing {k}")
        elif source[k].shape != v.shape:
            problems.append(f"{k}: checkpoint {tuple(source[k].shape)} vs model {tuple(v.shape)}")
    extra = sorted(k for k in source if k not in target)
    problems += [f"unexpected {k}" for k in extra]
    if problems:
        raise DataError("incompatible encoder checkpoint: " + "; ".join(problems))
    loaded = {k: source[k] for k in target if stem_ok or not k.startswith("stem.")}
    model.backbone.load_state_dict(loaded, strict=False)
    if not stem_ok and log is not None:
        log.add(-1, "init", "stem_reinitialized", 1)
    return stem_ok


def finetune(pretrained, split: TokenSplit, codebook: Codebook, config: BackboneConfig,
             recipe: Optional[TrainRecipe] = None, augment: Sequence = (), token_adapt=None,
             val: Optional[TokenSplit] = None, log: Optional[LineLog] = None):
    """Fine-tune from a masked-modeling checkpoint (path or Checkpoint)."""
    ckpt = pretrained if isinstance(pretrained, checkpoint.Checkpoint) \
        else checkpoint.load(pretrained, b"SMTM")
    if ckpt.codebook_id and ckpt.codebook_id != codebook.id:
        raise DataError(f"pretrained encoder is bound to codebook {ckpt.codebook_id}, "
                        f"got {codebook.id}")
    recipe = recipe or TrainRecipe()
    log = log or LineLog("epoch,split,metric,value")
    torch.manual_seed(recipe.seed)
    model = Classifier(config)
    transfer_encoder(model, ckpt.state, log)
    return train_supervised(split, codebook, config, recipe, augment, token_adapt, val, log,
                            model=model)


def evaluate(model: Classifier, split: TokenSplit, codebook: Codebook, images=None,
             tokenizer=None, corruptions: Sequence = (), seed: int = 0) -> list[dict]:
    """Clean top-1, plus one row per ``(kind, severity)`` corruption.

    Corrupted rows re-tokenize ``images`` (pixels matching ``split``) with ``tokenizer``.
    """
    table = torch.from_numpy(codebook.standardized())
    rows = [{"corruption": "clean", "severity": 0,
             "top1": accuracy(model, split.tokens, split.labels, table)}]
    if corruptions and (images is None or tokenizer is None):
        raise ConfigError("corruption evaluation needs the source images and a tokenizer")
    for kind, severity in corruptions:
        rng = np.random.default_rng(seed)
        bad = np.stack([corrupt(im, kind, int(severity), rng) for im in np.asarray(images)])
        rows.append({"corruption": kind, "severity": int(severity),
                     "top1": accuracy(model, tokenizer.tokenize(bad), split.labels, table)})
    return rows


def save(path, model: Classifier, codebook_id: str, meta: Optional[dict] = None):
    ckpt = checkpoint.Checkpoint(MAGIC, model.config.to_dict(), model.state_dict(),
                                 codebook_id, meta or {})
    return checkpoint.save(path, ckpt)


def load(path, codebook: Optional[Codebook] = None) -> Classifier:
    ckpt = checkpoint.load(path, MAGIC)
    if codebook is not None and ckpt.codebook_id != codebook.id:
        raise DataError(f"checkpoint is bound to codebook {ckpt.codebook_id}, got {codebook.id}")
    model = Classifier(BackboneConfig.from_dict(ckpt.config))
    model.load_state_dict(ckpt.state)
    model.eval()
    return model
