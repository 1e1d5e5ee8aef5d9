"""Reconstruction, divergence and adversarial losses, and the random-selection operator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError
from .model import LatentDistribution

POOL_WINDOW = 31
EDGE_WEIGHT = 5.0


@dataclass
class LossBreakdown:
    """Scalar loss terms of one update.

    ``total`` is the documented combination of the present terms, computed in
    float64 from the stored components; ``objective`` is the matching tensor
    used for back-propagation.
    """

    total: float
    rec: float
    kl: float | None = None
    adv: float | None = None
    mj: float | None = None
    dis: float | None = None
    selected_index: int | None = None
    objective: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def components(self) -> dict:
        return {k: getattr(self, k) for k in ("rec", "kl", "adv", "mj", "dis") if getattr(self, k) is not None}

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in [self.total, *self.components().values()])


def _item(t) -> float:
    return float(t.detach()) if torch.is_tensor(t) else float(t)


def random_select(pool_size: int, rng: np.random.Generator) -> int:
    """Uniform index in ``range(pool_size)``; consumes one draw from ``rng``."""
    if pool_size < 1:
        raise InvalidInputError("cannot select from an empty pool")
    return int(rng.integers(pool_size))


def structure_weights(target: torch.Tensor) -> torch.Tensor:
    """1 + 5 * |local mean(target) - target| with a 31x31 window and replicate padding."""
    pad = POOL_WINDOW // 2
    padded = F.pad(target, (pad, pad, pad, pad), mode="replicate")
    local = F.avg_pool2d(padded, POOL_WINDOW, stride=1)
    return 1.0 + EDGE_WEIGHT * torch.abs(local - target)


def _check_target(logits, target):
    if target.ndim == 3:
        target = target[:, None]
    target = target.to(logits.dtype)
    if target.shape != logits.shape:
        raise InvalidInputError(f"target shape {tuple(target.shape)} != logits shape {tuple(logits.shape)}")
    if not ((target == 0) | (target == 1)).all():
        raise InvalidInputError("structure-aware loss needs a binary target")
    return target


def weighted_bce(logits, target, weight):
    bce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    return (weight * bce).sum(dim=(2, 3)) / weight.sum(dim=(2, 3))


def soft_iou_term(logits, target, weight):
    pred = torch.sigmoid(logits)
    inter = (pred * target * weight).sum(dim=(2, 3))
    union = ((pred + target) * weight).sum(dim=(2, 3))
    return 1.0 - (inter + 1.0) / (union - inter + 1.0)


def structure_aware_loss(logits: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Edge-weighted BCE plus edge-weighted soft IoU on (B, 1, H, W) logits."""
    target = _check_target(logits, target)
    w = structure_weights(target)
    per_sample = (weighted_bce(logits, target, w) + soft_iou_term(logits, target, w)).flatten()
    return per_sample.mean() if reduction == "mean" else per_sample


def kl_diag_gaussian(q: LatentDistribution, p: LatentDistribution, reduction: str = "mean") -> torch.Tensor:
    """KL(q || p) summed over latent dimensions, averaged over the batch."""
    if q.mu.shape != p.mu.shape or q.logvar.shape != p.logvar.shape:
        raise InvalidInputError(f"latent dimension mismatch: {tuple(q.mu.shape)} vs {tuple(p.mu.shape)}")
    kl = 0.5 * (p.logvar - q.logvar + (torch.exp(q.logvar) + (q.mu - p.mu) ** 2) / torch.exp(p.logvar) - 1.0)
    kl = kl.sum(dim=-1)
    return kl.mean() if reduction == "mean" else kl


def cvae_loss(logits, y_m, q: LatentDistribution, p: LatentDistribution) -> LossBreakdown:
    rec = structure_aware_loss(logits, y_m)
    kl = kl_diag_gaussian(q, p)
    return LossBreakdown(total=_item(rec) + _item(kl), rec=_item(rec), kl=_item(kl), objective=rec + kl)


def bce_logits(scores, label: float):
    return F.binary_cross_entropy_with_logits(scores, torch.full_like(scores, label))


def gan_generator_loss(logits, y_m, realism_fake, lam: float = 0.1) -> LossBreakdown:
    """Reconstruction against y^m plus ``lam`` times the non-saturating adversarial term."""
    rec = structure_aware_loss(logits, y_m)
    adv = bce_logits(realism_fake, 1.0)
    return LossBreakdown(
        total=_item(rec) + lam * _item(adv), rec=_item(rec), adv=_item(adv), objective=rec + lam * adv
    )


def gan_discriminator_loss(realism_fake, realism_real) -> torch.Tensor:
    return bce_logits(realism_fake, 0.0) + bce_logits(realism_real, 1.0)


def ensemble_loss(per_decoder_losses: Sequence, rng: np.random.Generator):
    """Pick one decoder branch uniformly; return its loss and index."""
    if len(per_decoder_losses) == 0:
        raise InvalidInputError("ensemble loss needs at least one branch")
    j = random_select(len(per_decoder_losses), rng)
    return per_decoder_losses[j], j
