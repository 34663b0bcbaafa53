"""Augmentation descriptors as they appear in run configs.

A pipeline entry looks like ``{"op": "rrc", "p": 0.5, "via": "tokenadapt",
"scale": [0.35, 1.0]}``. Keys other than ``op`` and ``p`` are op parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import ConfigError

OPS = ("hflip", "rrc", "affine", "mixup", "cutmix", "color_adapt", "emb_noise", "token_eda",
       "identity", "brightness", "contrast")

# op -> {param: default}
DEFAULTS = {
    "identity": {},
    "hflip": {"via": "tokenadapt"},
    "rrc": {"via": "tokenadapt", "scale": (0.35, 1.0), "ratio": (3 / 4, 4 / 3)},
    "affine": {"via": "tokenadapt", "degrees": 15.0, "translate": 0.1, "shear": 10.0},
    "mixup": {"via": "tokenadapt", "alpha": 0.8},
    "cutmix": {"alpha": 1.0},
    "color_adapt": {"eps": 1e-5},
    "emb_noise": {"std": 0.1},
    "token_eda": {"swap_p": 0.1},
    "brightness": {"factor": 0.2},
    "contrast": {"factor": 1.2},
}

# where geometric ops may act
VIA = {
    "hflip": ("tokenadapt", "embedding", "pixel"),
    "rrc": ("tokenadapt", "embedding", "onehot", "pixel"),
    "affine": ("tokenadapt", "embedding", "pixel"),
    "mixup": ("tokenadapt", "embedding", "pixel"),
}


@dataclass(frozen=True)
class AugSpec:
    op: str
    p: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.op not in OPS:
            raise ConfigError(f"unknown augmentation op {self.op!r}; choose from {OPS}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"{self.op}: probability {self.p} outside [0, 1]")
        unknown = set(self.params) - set(DEFAULTS[self.op])
        if unknown:
            raise ConfigError(f"{self.op}: unknown parameters {sorted(unknown)}")
        merged = {**DEFAULTS[self.op], **self.params}
        object.__setattr__(self, "params", merged)
        self._validate(merged)

    def _validate(self, q):
        op = self.op
        if "via" in q and q["via"] not in VIA[op]:
            raise ConfigError(f"{op}: via={q['via']!r} not in {VIA[op]}")
        if "scale" in q:
            lo, hi = q["scale"]
            if not 0 < lo <= hi <= 1:
                raise ConfigError(f"{op}: crop scale range {q['scale']} must lie in (0, 1]")
        if "ratio" in q:
            lo, hi = q["ratio"]
            if not 0 < lo <= hi:
                raise ConfigError(f"{op}: invalid aspect ratio range {q['ratio']}")
        for key in ("alpha", "std", "degrees", "translate", "shear"):
            if key in q and q[key] < 0:
                raise ConfigError(f"{op}: {key} must be non-negative")
        if "eps" in q and q["eps"] <= 0:
            raise ConfigError(f"{op}: eps must be positive")
        if "swap_p" in q and not 0 <= q["swap_p"] <= 1:
            raise ConfigError(f"{op}: swap_p must be in [0, 1]")

    @property
    def via(self):
        return self.params.get("via")

    @classmethod
    def from_dict(cls, entry: dict) -> "AugSpec":
        entry = dict(entry)
        if "op" not in entry:
            raise ConfigError(f"augmentation entry {entry} lacks 'op'")
        op = entry.pop("op")
        p = float(entry.pop("p", 1.0))
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in entry.items()}
        return cls(op, p, params)

    def to_dict(self) -> dict:
        out = {"op": self.op, "p": self.p}
        out.update({k: list(v) if isinstance(v, tuple) else v for k, v in self.params.items()})
        return out
