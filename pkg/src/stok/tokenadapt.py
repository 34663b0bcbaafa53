"""TokenAdapt: learned conversion into an augmentation-compatible space and back.

``convert`` (f) and ``reverse`` (g) are one transformer block each. The
positional encoding is added on entry to each block and subtracted on exit,
so S stays spatially aligned with the token grid and pixel-style operators
can act on it directly. ``g`` ends in a K-way map whose initial weights
score codewords by (negative) squared distance, so an untrained module
already round-trips ``q(g(f(Z))) ~ T``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .augment import geometry
from .augment.pixel import apply_geometry, sample_geometry
from .augment.spec import AugSpec
from .codec import Codebook, lookup, quantize
from .errors import ConfigError, DataError, ShapeError
from .layers import Block, init_weights, sincos_2d
from .training import LineLog, cosine_lr, make_optimizer, set_lr

MAGIC = b"STAM"
SUPPORTED = ("identity", "hflip", "rrc", "affine", "mixup")


@dataclass
class TokenAdaptConfig:
    dim: int
    K: int
    heads: int = 4
    mlp_ratio: float = 4.0
    seed: int = 0
    logit_scale: float = 15.0


def median_nn_sqdist(table: torch.Tensor) -> float:
    t = table.to(torch.float64)
    d2 = torch.cdist(t, t).pow(2)
    d2.fill_diagonal_(float("inf"))
    return float(d2.min(1).values.median().clamp_min(1e-12))


class TokenAdaptModule(nn.Module):
    def __init__(self, table, codebook_id: str, config: Optional[TokenAdaptConfig] = None):
        super().__init__()
        table = torch.as_tensor(np.asarray(table), dtype=torch.float32)
        K, d = table.shape
        self.config = config or TokenAdaptConfig(dim=d, K=K)
        if (self.config.dim, self.config.K) != (d, K):
            raise ShapeError(f"config expects {self.config.K}x{self.config.dim} table, got {K}x{d}")
        self.codebook_id = codebook_id
        torch.manual_seed(self.config.seed)
        self.f_block = Block(d, self.config.heads, self.config.mlp_ratio)
        self.g_block = Block(d, self.config.heads, self.config.mlp_ratio)
        self.g_head = nn.Linear(d, K)
        init_weights(self)
        with torch.no_grad():
            # logit_scale is in units of the median nearest-codeword squared distance
            beta = self.config.logit_scale / median_nn_sqdist(table)
            self.g_head.weight.copy_(2.0 * beta * table)
            self.g_head.bias.copy_(-beta * (table * table).sum(1))
        self.register_buffer("table", table, persistent=False)
        self._pos = {}

    def _pos_enc(self, h: int, w: int, dtype) -> torch.Tensor:
        key = (h, w)
        if key not in self._pos:
            self._pos[key] = sincos_2d(h, w, self.config.dim).reshape(h, w, -1)
        return self._pos[key].to(dtype)

    def _check(self, x: torch.Tensor) -> tuple[torch.Tensor, bool]:
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[-1] != self.config.dim:
            raise ShapeError(f"expected (N, h, w, {self.config.dim}) grid, got {tuple(x.shape)}")
        return x, single

    def _block(self, block: Block, x: torch.Tensor) -> torch.Tensor:
        B, h, w, d = x.shape
        pos = self._pos_enc(h, w, x.dtype)
        y = block((x + pos).reshape(B, h * w, d)).reshape(B, h, w, d)
        return y - pos

    def convert(self, Z) -> torch.Tensor:
        """f: token embeddings -> augmentation-compatible features, same shape."""
        Z, single = self._check(torch.as_tensor(Z))
        S = self._block(self.f_block, Z)
        return S[0] if single else S

    def reverse(self, S) -> torch.Tensor:
        """g: features -> per-position logits over the K codewords."""
        S, single = self._check(torch.as_tensor(S))
        logits = self.g_head(self._block(self.g_block, S))
        return logits[0] if single else logits

    def to_checkpoint(self) -> checkpoint.Checkpoint:
        return checkpoint.Checkpoint(MAGIC, asdict(self.config), self.state_dict(), self.codebook_id)

    def save(self, path):
        return checkpoint.save(path, self.to_checkpoint())

    @classmethod
    def load(cls, path, codebook: Codebook) -> "TokenAdaptModule":
        return cls.from_checkpoint(checkpoint.load(path, MAGIC), codebook)

    @classmethod
    def from_checkpoint(cls, ckpt: checkpoint.Checkpoint, codebook: Codebook):
        if ckpt.codebook_id != codebook.id:
            raise DataError(f"TokenAdapt module is bound to codebook {ckpt.codebook_id}, "
                            f"active codebook is {codebook.id}")
        module = cls(codebook.standardized(), codebook.id, TokenAdaptConfig(**ckpt.config))
        module.load_state_dict(ckpt.state)
        return module


def _apply_in_space(S: torch.Tensor, params, partner=None, lam=None) -> torch.Tensor:
    """Apply one sampled op to a single ``(h, w, d)`` feature grid."""
    if params == "mixup":
        return geometry.mixup(S, partner, lam)
    return params.apply(S.permute(2, 0, 1)[None])[0].permute(1, 2, 0)


def augment_features(S: torch.Tensor, ops: Sequence) -> torch.Tensor:
    """Apply per-sample ops to a batch of S grids.

    ``ops[n]`` is a GeoParams or ``("mixup", partner_index, lam)``.
    """
    out = []
    for n, op in enumerate(ops):
        if isinstance(op, tuple) and op[0] == "mixup":
            out.append(_apply_in_space(S[n], "mixup", S[op[1]], op[2]))
        else:
            out.append(_apply_in_space(S[n], op))
    return torch.stack(out)


def apply_token_adapt(T, A: AugSpec, module: TokenAdaptModule, codebook: Codebook,
                      rng: np.random.Generator, partner=None, lam: Optional[float] = None):
    """Augment token grid(s): ``q(g(A(f(Z_T))))``.

    ``T`` is ``(h, w)`` or ``(N, h, w)``; mixup needs ``partner`` grids of the
    same shape. Returns int64 grids of the input shape.
    """
    if A.op not in SUPPORTED:
        raise ConfigError(f"TokenAdapt does not support {A.op!r}; supported: {SUPPORTED}")
    if module.codebook_id != codebook.id:
        raise DataError("TokenAdapt module is bound to a different codebook")
    T = np.asarray(T)
    single = T.ndim == 2
    if single:
        T = T[None]
        partner = None if partner is None else np.asarray(partner)[None]
    table = torch.from_numpy(codebook.standardized())
    with torch.no_grad():
        S = module.convert(table[torch.from_numpy(T)])
        if A.op == "mixup":
            if partner is None:
                raise ConfigError("mixup needs partner token grids")
            S2 = module.convert(table[torch.from_numpy(np.asarray(partner))])
            lams = [lam if lam is not None else geometry.sample_mixup_lambda(rng, A.params["alpha"])
                    for _ in range(len(T))]
            S_aug = torch.stack([geometry.mixup(S[n], S2[n], lams[n]) for n in range(len(T))])
        else:
            S_aug = augment_features(S, [sample_geometry(A, rng) for _ in range(len(T))])
        idx = module.reverse(S_aug).argmax(-1).numpy()
    # predicted embeddings are codewords, so quantizing them returns their indices
    out = quantize(lookup(idx, codebook), codebook)
    return out[0] if single else out


@dataclass
class TokenAdaptHyper:
    epochs: float = 1.0
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_steps: int = 5
    seed: int = 0
    heads: int = 4
    logit_scale: float = 15.0


@dataclass
class TokenPairs:
    """A batch of ``(T_x, T_A(x))`` pairs plus the op descriptors that made them."""

    source: np.ndarray
    target: np.ndarray
    ops: list


def make_pairs(images, tokenizer, specs: Sequence[AugSpec], rng: np.random.Generator,
               source_tokens: Optional[np.ndarray] = None) -> TokenPairs:
    """Tokenize each image and an augmented copy; the op is drawn uniformly from ``specs``."""
    images = np.asarray(images)
    N = len(images)
    if source_tokens is None:
        source_tokens = tokenizer.tokenize(images)
    augmented, ops = [], []
    partners = rng.permutation(N)
    for n in range(N):
        spec = specs[int(rng.integers(len(specs)))]
        if spec.op == "mixup":
            lam = geometry.sample_mixup_lambda(rng, spec.params["alpha"])
            j = int(partners[n])
            augmented.append(geometry.mixup(images[n].astype(np.float64),
                                            images[j].astype(np.float64), lam))
            ops.append(("mixup", j, lam))
        else:
            params = sample_geometry(spec, rng)
            augmented.append(apply_geometry(images[n], params))
            ops.append(params)
    target = tokenizer.tokenize(np.stack(augmented))
    return TokenPairs(np.asarray(source_tokens), target, ops)


def token_adapt_loss(module: TokenAdaptModule, table: torch.Tensor, pairs: TokenPairs):
    """Cross-entropy between g's logits after the S-space op and the target tokens, all positions."""
    S = module.convert(table[torch.from_numpy(pairs.source)])
    logits = module.reverse(augment_features(S, pairs.ops))
    K = logits.shape[-1]
    return F.cross_entropy(logits.reshape(-1, K), torch.from_numpy(pairs.target).reshape(-1))


def train_token_adapt(images, tokenizer, specs: Sequence[AugSpec], hyper: TokenAdaptHyper = None,
                      log: Optional[LineLog] = None):
    """Fit f and g on pairs generated on the fly from ``images``.

    Returns ``(module, log)``; the log has one ``epoch,step,loss`` line per step.
    """
    hyper = hyper or TokenAdaptHyper()
    images = np.asarray(images)
    if len(images) == 0:
        raise DataError("TokenAdapt needs a non-empty image source")
    for s in specs:
        if s.op not in SUPPORTED:
            raise ConfigError(f"TokenAdapt cannot learn {s.op!r}")
    codebook = tokenizer.codebook
    table = torch.from_numpy(codebook.standardized())
    module = TokenAdaptModule(table, codebook.id,
                              TokenAdaptConfig(codebook.d, codebook.K, hyper.heads, seed=hyper.seed,
                                               logit_scale=hyper.logit_scale))
    log = log or LineLog("epoch,step,loss")
    source_tokens = tokenizer.tokenize(images)
    rng = np.random.default_rng(hyper.seed)
    bs = min(hyper.batch_size, len(images))
    per_epoch = max(1, len(images) // bs)
    total = max(1, int(round(hyper.epochs * per_epoch)))
    opt = make_optimizer(module, hyper.lr, hyper.weight_decay)
    module.train()
    step = 0
    while step < total:
        order = rng.permutation(len(images))
        for start in range(0, per_epoch * bs, bs):
            if step >= total:
                break
            idx = np.sort(order[start:start + bs])
            pairs = make_pairs(images[idx], tokenizer, specs, rng, source_tokens[idx])
            set_lr(opt, cosine_lr(step, total, hyper.lr, min(hyper.warmup_steps, total // 4)))
            loss = token_adapt_loss(module, table, pairs)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            log.add(step // per_epoch, step, loss.item())
            step += 1
    module.eval()
    return module, log


def token_agreement(a, b) -> float:
    return float((np.asarray(a) == np.asarray(b)).mean())
