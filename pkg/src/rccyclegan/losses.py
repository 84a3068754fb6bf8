"""Loss terms of the conditional cycle model.

Every term reduces patch maps and images with element-wise means, so values
do not depend on resolution. A *PatchMapSet* is the list of three per-scale
maps returned by a discriminator; maps may carry a leading batch dimension.
Functions taking generator/RMI callables have a tensor-level core
(``*_from``) that the trainer uses to avoid repeated forwards.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import torch

from .config import IDENT_F_MODES, LossWeights
from .errors import ConfigError, NumericError

TERMS = ("dis", "gen", "cycle", "ident_m", "ident_f")
_WEIGHT_OF = {
    "dis": "lambda_d",
    "gen": "lambda_g",
    "cycle": "lambda_cycle",
    "ident_m": "lambda_im",
    "ident_f": "lambda_if",
}


@dataclass
class LossBreakdown:
    dis: float
    gen: float
    cycle: float
    ident_m: float
    ident_f: float
    total: float

    @classmethod
    def from_terms(cls, terms: Mapping[str, float], w: LossWeights) -> "LossBreakdown":
        vals = {k: float(terms[k]) for k in TERMS}
        return cls(**vals, total=float(total_loss(vals, w)))

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _scales(patches) -> list[torch.Tensor]:
    """Normalize a PatchMapSet or a list of PatchMapSets to 3 batched maps."""
    if len(patches) == 0:
        raise ValueError("empty batch of patch maps")
    if isinstance(patches[0], (list, tuple)):
        sets = list(patches)
        if any(len(s) != 3 for s in sets):
            raise ValueError("every PatchMapSet must hold exactly 3 maps")
        return [
            torch.cat([s[i] if s[i].dim() == 4 else s[i].unsqueeze(0) for s in sets]) for i in range(3)
        ]
    if len(patches) != 3:
        raise ValueError(f"a PatchMapSet holds exactly 3 maps, got {len(patches)}")
    return [m if m.dim() == 4 else m.unsqueeze(0) for m in patches]


def _per_item_sq(m: torch.Tensor, target: float) -> torch.Tensor:
    return ((m - target) ** 2).flatten(1).mean(dim=1)


def generator_adv_loss(fake_patches) -> torch.Tensor:
    """Least-squares generator loss: push every fake patch towards 1."""
    maps = _scales(fake_patches)
    if maps[0].shape[0] == 0:
        raise ValueError("empty batch of patch maps")
    per_scale = [_per_item_sq(m, 1.0).mean() for m in maps]
    return sum(per_scale) / 3


def discriminator_adv_loss(real_patches, fake_patches) -> torch.Tensor:
    real, fake = _scales(real_patches), _scales(fake_patches)
    if real[0].shape[0] != fake[0].shape[0]:
        raise ValueError(f"batch size mismatch: {real[0].shape[0]} real vs {fake[0].shape[0]} fake")
    if real[0].shape[0] == 0:
        raise ValueError("empty batch of patch maps")
    per_scale = [
        (_per_item_sq(r, 1.0) + _per_item_sq(f, 0.0)).mean() for r, f in zip(real, fake)
    ]
    return sum(per_scale) / 3


def _per_item_mean(t: torch.Tensor) -> torch.Tensor:
    return t.flatten(1).mean(dim=1)


def _require_batch(*ts: torch.Tensor) -> None:
    for t in ts:
        if t.dim() != 4 or t.shape[0] == 0:
            raise ValueError(f"expected a non-empty (N,C,H,W) batch, got {tuple(t.shape)}")


def cycle_loss_from(r_real, r_rec, n_real, n_rec) -> torch.Tensor:
    _require_batch(r_real, n_real)
    return (
        _per_item_mean((r_real - r_rec).abs()) + _per_item_mean((n_real - n_rec).abs())
    ).mean()


def cycle_loss(
    r_real: torch.Tensor,
    n_real: torch.Tensor,
    g_n: Callable[[torch.Tensor], torch.Tensor],
    g_r: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """Mean absolute round-trip error, rain->sunny->rain plus sunny->rain->sunny."""
    _require_batch(r_real, n_real)
    return cycle_loss_from(r_real, g_r(g_n(r_real)), n_real, g_n(g_r(n_real)))


def feature_identity_loss_from(r_real, mask, derained, feat=None, mode: str = "pixel") -> torch.Tensor:
    """Residual of the decomposition rain = mask + derained.

    ``pixel`` compares in image space; ``feature`` compares after the frozen
    feature network. The 1-channel mask broadcasts over RGB.
    """
    if mode not in IDENT_F_MODES:
        raise ConfigError(f"unknown identity mode {mode!r}; expected one of {IDENT_F_MODES}")
    _require_batch(r_real)
    recomposed = mask + derained
    if mode == "feature":
        if feat is None:
            raise ConfigError("feature mode needs a feature network")
        recomposed, r_real = feat(recomposed), feat(r_real)
    return _per_item_mean((recomposed - r_real) ** 2).mean()


def feature_identity_loss(
    r_real: torch.Tensor,
    rmi: Callable[[torch.Tensor], torch.Tensor],
    g_n: Callable[[torch.Tensor], torch.Tensor],
    feat=None,
    mode: str = "pixel",
) -> torch.Tensor:
    if mode not in IDENT_F_MODES:
        raise ConfigError(f"unknown identity mode {mode!r}; expected one of {IDENT_F_MODES}")
    _require_batch(r_real)
    return feature_identity_loss_from(r_real, rmi(r_real), g_n(r_real), feat, mode)


def mask_identity_loss_from(n_real, mask_sunny, fake_rain, mask_fake_rain) -> torch.Tensor:
    """Sunny masks should vanish; the mask found on a simulated rain image
    should equal the rain the generator added."""
    _require_batch(n_real)
    sunny_term = _per_item_mean(mask_sunny**2).mean()
    added = fake_rain - n_real
    rain_term = _per_item_mean((mask_fake_rain - added) ** 2).mean()
    return sunny_term + rain_term


def mask_identity_loss(
    n_real: torch.Tensor,
    rmi: Callable[[torch.Tensor], torch.Tensor],
    g_r: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    _require_batch(n_real)
    fake_rain = g_r(n_real)
    return mask_identity_loss_from(n_real, rmi(n_real), fake_rain, rmi(fake_rain))


def total_loss(terms: Mapping[str, float | torch.Tensor] | LossBreakdown, w: LossWeights):
    """Weighted sum of the five terms; raises NumericError on a non-finite term."""
    if isinstance(terms, LossBreakdown):
        terms = terms.as_dict()
    total = 0.0
    for name in TERMS:
        value = terms[name]
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericError(name, v)
        total = total + getattr(w, _WEIGHT_OF[name]) * value
    return total


def generator_side_objective(terms: Mapping[str, torch.Tensor], w: LossWeights) -> torch.Tensor:
    """The part of the total that the generators and RMI network minimize."""
    return (
        w.lambda_g * terms["gen"]
        + w.lambda_cycle * terms["cycle"]
        + w.lambda_im * terms["ident_m"]
        + w.lambda_if * terms["ident_f"]
    )


def check_finite(terms: Mapping[str, float | torch.Tensor]) -> None:
    for name, value in terms.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericError(name, v)


__all__ = [
    "LossBreakdown",
    "TERMS",
    "check_finite",
    "cycle_loss",
    "cycle_loss_from",
    "discriminator_adv_loss",
    "feature_identity_loss",
    "feature_identity_loss_from",
    "generator_adv_loss",
    "generator_side_objective",
    "mask_identity_loss",
    "mask_identity_loss_from",
    "total_loss",
]
