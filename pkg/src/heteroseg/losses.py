"""Loss functions for landmark and pixel training under partial labels.

All functions are pure and differentiable torch expressions. Structures
excluded by the availability argument contribute exactly zero loss and zero
gradient: they are removed by indexing before any reduction, never by
multiplying with zeros.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch

from .anatomy import LabelAvailability, Structure

DICE_SMOOTH = 1.0
BCE_CLAMP = 1e-7


@dataclass
class LossValue:
    """Total loss plus its named components (total = weighted sum of components)."""

    total: torch.Tensor
    components: dict

    def item(self) -> float:
        return float(self.total.detach())

    def component_items(self) -> dict:
        return {name: float(value.detach()) for name, value in self.components.items()}


def _as_float_tensor(value, like: torch.Tensor | None = None) -> torch.Tensor:
    tensor = torch.as_tensor(value)
    if not tensor.dtype.is_floating_point:
        dtype = like.dtype if like is not None else torch.float64
        tensor = tensor.to(dtype)
    return tensor


def masked_landmark_mse(pred, target, mask) -> LossValue:
    """Mean squared coordinate error over the masked-in node rows.

    The mean runs over the 2·|mask| included scalar entries, so the magnitude
    stays comparable when batches carry different availabilities. Excluded
    rows are sliced away before the reduction: their gradient is exactly zero.
    """
    pred = _as_float_tensor(pred)
    target = _as_float_tensor(target, like=pred)
    mask = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pred.shape[-1] != 2 or mask.shape != pred.shape[-2:-1]:
        raise ValueError(f"mask length {tuple(mask.shape)} does not match node count")
    if not bool(mask.any()):
        raise ValueError("mask excludes every node")
    diff = pred[..., mask, :] - target[..., mask, :]
    mse = (diff * diff).mean()
    return LossValue(total=mse, components={"mse": mse})


def soft_dice_binary(prob, target) -> torch.Tensor:
    """Soft Dice loss 1 − (2Σpg + s)/(Σp + Σg + s) with smoothing s = 1.

    The smoothing term in both numerator and denominator keeps empty targets
    informative: with no positive target pixels the term is ~0 when the
    predicted mass vanishes and climbs toward 1 when mass is predicted
    anyway, with a usable gradient pushing that mass down. An unsmoothed
    numerator would pin the empty-target case at 1 with zero gradient.
    """
    prob = _as_float_tensor(prob)
    target = _as_float_tensor(target, like=prob)
    if prob.shape != target.shape:
        raise ValueError(f"prob shape {tuple(prob.shape)} != target shape {tuple(target.shape)}")
    with torch.no_grad():
        if float(prob.min()) < 0.0 or float(prob.max()) > 1.0:
            raise ValueError("prob values must lie in [0, 1]")
    num = 2.0 * (prob * target).sum() + DICE_SMOOTH
    den = prob.sum() + target.sum() + DICE_SMOOTH
    return 1.0 - num / den


def binary_cross_entropy(prob, target) -> torch.Tensor:
    """Mean BCE with probabilities clamped to [1e-7, 1−1e-7]."""
    prob = _as_float_tensor(prob)
    target = _as_float_tensor(target, like=prob)
    if prob.shape != target.shape:
        raise ValueError(f"prob shape {tuple(prob.shape)} != target shape {tuple(target.shape)}")
    p = prob.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def het_pixel_loss(
    probs: Mapping,
    targets: Mapping,
    avail: LabelAvailability,
) -> LossValue:
    """Per-structure BCE + soft Dice, summed over the available structures only.

    ``probs`` and ``targets`` map Structure → map(s) of matching shape.
    Structures outside ``avail`` are never touched, so their gradients are
    exactly zero regardless of what their maps contain.
    """
    if not avail:
        raise ValueError("availability is empty")
    ordered = [s for s in Structure if s in avail]
    for structure in ordered:
        if structure not in probs:
            raise ValueError(f"missing probability map for available structure {structure.name}")
        if structure not in targets:
            raise ValueError(f"missing target map for available structure {structure.name}")
    bce_total = None
    dice_total = None
    for structure in ordered:
        bce = binary_cross_entropy(probs[structure], targets[structure])
        dice = soft_dice_binary(probs[structure], targets[structure])
        bce_total = bce if bce_total is None else bce_total + bce
        dice_total = dice if dice_total is None else dice_total + dice
    total = bce_total + dice_total
    return LossValue(total=total, components={"bce": bce_total, "dice": dice_total})


def multiclass_loss(logits, target) -> LossValue:
    """Compound cross entropy + mean foreground soft Dice for K-class maps.

    ``logits`` has shape (..., K, H, W) with class 0 = background; ``target``
    is an integer label map. The Dice terms use the same smoothing as
    soft_dice_binary, so a class with no target pixels still pressures any
    softmax mass predicted for it toward zero; each foreground class weighs
    the same in the Dice mean regardless of its pixel count.
    """
    logits = _as_float_tensor(logits)
    target = torch.as_tensor(np.asarray(target))
    if target.dtype.is_floating_point:
        target = target.long()
    k = logits.shape[-3]
    if logits.shape[:-3] + logits.shape[-2:] != target.shape:
        raise ValueError(f"logits shape {tuple(logits.shape)} incompatible with target {tuple(target.shape)}")
    if int(target.min()) < 0 or int(target.max()) >= k:
        raise ValueError(f"target labels must lie in [0, {k})")
    logp = torch.log_softmax(logits, dim=-3)
    ce = -logp.gather(-3, target.unsqueeze(-3)).mean()
    probs = logp.exp()
    dice_terms = []
    for cls in range(1, k):
        prob = probs.select(-3, cls)
        mask = (target == cls).to(prob.dtype)
        num = 2.0 * (prob * mask).sum() + DICE_SMOOTH
        den = prob.sum() + mask.sum() + DICE_SMOOTH
        dice_terms.append(1.0 - num / den)
    dice = torch.stack(dice_terms).mean() if dice_terms else torch.zeros((), dtype=logits.dtype)
    total = ce + dice
    return LossValue(total=total, components={"ce": ce, "dice": dice})


def kl_latent(mu, logvar) -> torch.Tensor:
    """KL divergence of N(mu, exp(logvar)) from the standard normal, summed over dims."""
    mu = _as_float_tensor(mu)
    logvar = _as_float_tensor(logvar, like=mu)
    if mu.shape != logvar.shape:
        raise ValueError(f"mu shape {tuple(mu.shape)} != logvar shape {tuple(logvar.shape)}")
    if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
        raise ValueError("mu and logvar must be finite")
    per_dim = -0.5 * (1.0 + logvar - mu * mu - logvar.exp())
    return per_dim.sum(dim=-1).mean() if per_dim.dim() > 1 else per_dim.sum()
