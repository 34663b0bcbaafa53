"""Optimizer, schedule and logging helpers shared by the training loops."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError


@dataclass
class TrainRecipe:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1.5e-3
    min_lr: float = 1e-5
    warmup_epochs: float = 2.0
    weight_decay: float = 0.1
    label_smoothing: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ConfigError("lr, weight_decay and warmup_epochs must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainRecipe":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown recipe keys {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def make_optimizer(model: nn.Module, lr: float, weight_decay: float) -> torch.optim.AdamW:
    """AdamW without decay on biases, norms, and 1-D/learned-token parameters."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if p.ndim < 2 or name.endswith("_token") else decay).append(p)
    groups = [{"params": decay, "weight_decay": weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=lr, betas=(0.9, 0.95))


def cosine_lr(step: int, total: int, base: float, warmup: int, floor: float = 0.0) -> float:
    """Linear warmup then half-cosine decay to ``floor``."""
    if base == 0:
        return 0.0
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if total <= warmup:
        return base
    t = (step - warmup) / max(1, total - warmup)
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * min(t, 1.0)))


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def batches(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True,
            drop_last: bool = True):
    order = rng.permutation(n) if shuffle else np.arange(n)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    for start in range(0, stop, batch_size):
        yield order[start:start + batch_size]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, n // batch_size) if n >= batch_size else 1


class LineLog:
    """Append-only CSV-ish log kept in memory and optionally mirrored to disk."""

    def __init__(self, header: str, path: Optional[Path] = None):
        self.header = header
        self.lines: list[str] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(header + "\n", encoding="utf-8")

    def add(self, *values) -> None:
        line = ",".join(_fmt(v) for v in values)
        self.lines.append(line)
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def text(self) -> str:
        return "\n".join([self.header, *self.lines]) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)
