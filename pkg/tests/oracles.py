"""Independent reference implementations used by several test modules."""

import numpy as np
import torch


def numeric_grad_check(loss_fn, params, eps=1e-6, max_entries=40, seed=0):
    """Relative error between autograd and central differences on sampled entries.

    ``loss_fn()`` must return a float64 scalar built from ``params``.
    """
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    analytic, numeric = [], []
    entries = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    pick = rng.choice(len(entries), size=min(max_entries, len(entries)), replace=False)
    with torch.no_grad():
        for k in pick:
            i, j = entries[k]
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            up = loss_fn().item()
            flat[j] = orig - eps
            down = loss_fn().item()
            flat[j] = orig
            numeric.append((up - down) / (2 * eps))
            analytic.append(grads[i].reshape(-1)[j].item())
    analytic, numeric = np.array(analytic), np.array(numeric)
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)


def rejection_truncnorm(rng, n, mean, std, lo, hi):
    """Truncated normal by plain rejection from N(mean, std^2)."""
    out = np.empty(0)
    while len(out) < n:
        draw = rng.normal(mean, std, size=2 * n)
        out = np.concatenate([out, draw[(draw >= lo) & (draw <= hi)]])
    return out[:n]
