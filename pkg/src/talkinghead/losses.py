"""Training objectives.

AU tensors have the AU axis last, (..., n_au); image losses take (B, 3, H, W)
or any matching shapes.  Every loss is averaged over leading batch dims.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

BCE_EPS = 1e-7
DICE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    rec: float = 1.5
    id: float = 1.5
    per: float = 0.07
    au: float = 0.02

    def __post_init__(self):
        for name in ("rec", "id", "per", "au"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def au_weights(rates) -> np.ndarray:
    """Inverse-frequency weights normalised so they sum to the number of AUs."""
    rates = np.asarray(rates, dtype=np.float64)
    if np.any(rates <= 0):
        raise ValueError(f"AU occurrence rates must be positive, got {rates}")
    inv = 1.0 / rates
    return inv * len(rates) / inv.sum()


def _w(w, like):
    return torch.as_tensor(w, dtype=like.dtype, device=like.device)


def bce_loss(y, p, w, eps: float = BCE_EPS):
    p = p.clamp(eps, 1.0 - eps)
    y = y.to(p.dtype)
    per_au = y * torch.log(p) + (1 - y) * torch.log(1 - p)
    return -(_w(w, p) * per_au).mean(-1).mean()


def dice_loss(y, p, w, eps: float = DICE_EPS):
    if eps <= 0:
        raise ValueError("dice smoothing term must be positive")
    y = y.to(p.dtype)
    ratio = (2 * y * p + eps) / (y * y + p * p + eps)
    return (_w(w, p) * (1 - ratio)).mean(-1).mean()


def au_loss(y, p, w, eps: float = DICE_EPS):
    return bce_loss(y, p, w) + dice_loss(y, p, w, eps)


def reconstruction_loss(gen, gt):
    return (gen - gt).abs().mean()


def identity_loss(gen, id_img):
    """Mean absolute difference over the upper half rows; (.., 3, H, W) layout."""
    h = gen.shape[-2] // 2
    return (gen[..., :h, :] - id_img[..., :h, :]).abs().mean()


def perceptual_loss(gen, gt, extractor):
    feats_gen = extractor(gen)
    feats_gt = extractor(gt)
    terms = [(a - b).abs().mean() for a, b in zip(feats_gt, feats_gen)]
    return sum(terms) / len(terms)


def total_loss(components: dict, weights: LossWeights):
    """Weighted sum over ``rec``, ``id``, ``per`` and ``au``; missing components count as 0."""
    total = 0.0
    for name in ("rec", "id", "per", "au"):
        lam = getattr(weights, name)
        if lam and name in components:
            total = total + lam * components[name]
    return total
