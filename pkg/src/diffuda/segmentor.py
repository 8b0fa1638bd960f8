"""Segmentation decoder over diffusion features, its training loss, and the
Dice metric.

Disc and cup are predicted as two independent sigmoid channels; the nested
anatomy is restored at evaluation time by taking the union for the disc.
Dropout is applied functionally with an explicit generator so stochastic
forward passes are reproducible.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ChannelMismatchError, ShapeMismatchError
from .masks import LabelMask

PROB_EPS = 1e-7
DICE_SMOOTH = 1e-6


def _seeded_dropout(x, rate, active, gen):
    if not active or rate <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=gen, device=x.device) >= rate).to(x.dtype)
    return x * keep / (1.0 - rate)


class Segmentor(nn.Module):
    """Three conv blocks with dropout after each, then a 1x1 head.

    The input feature map of the final convolution ("last features") is
    returned alongside the probabilities; class prototypes are centroids of
    that map.
    """

    def __init__(self, in_channels: int, widths=(32, 16, 16), dropout_rate: float = 0.5):
        super().__init__()
        self.in_channels = in_channels
        self.dropout_rate = float(dropout_rate)
        w1, w2, w3 = widths

        def groups(c):
            return next(g for g in (4, 2, 1) if c % g == 0)

        self.conv1 = nn.Conv2d(in_channels, w1, 1)
        self.norm1 = nn.GroupNorm(groups(w1), w1)
        self.conv2 = nn.Conv2d(w1, w2, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups(w2), w2)
        self.conv3 = nn.Conv2d(w2, w3, 3, padding=1)
        self.norm3 = nn.GroupNorm(groups(w3), w3)
        self.head = nn.Conv2d(w3, 2, 1)
        self.feature_channels = w3

    def forward(self, features, dropout_active: bool = False,
                rng: torch.Generator | None = None):
        """Returns (probabilities [.., 2, H, W], last features [.., C', H, W])."""
        single = features.ndim == 3
        x = features.unsqueeze(0) if single else features
        if x.shape[1] != self.in_channels:
            raise ChannelMismatchError(
                f"feature channels {x.shape[1]} != expected {self.in_channels}"
            )
        if dropout_active and self.dropout_rate > 0.0 and rng is None:
            raise ValueError("dropout_active requires an rng")
        h = _seeded_dropout(F.silu(self.norm1(self.conv1(x))), self.dropout_rate, dropout_active, rng)
        h = _seeded_dropout(F.silu(self.norm2(self.conv2(h))), self.dropout_rate, dropout_active, rng)
        f = _seeded_dropout(F.silu(self.norm3(self.conv3(h))), self.dropout_rate, dropout_active, rng)
        probs = torch.sigmoid(self.head(f))
        if single:
            return probs[0], f[0]
        return probs, f


def segment(features, segmentor: Segmentor, dropout_active: bool = False,
            rng: torch.Generator | None = None):
    """Functional wrapper over Segmentor.forward."""
    return segmentor(features, dropout_active=dropout_active, rng=rng)


def _label_tensor(label: LabelMask, like: torch.Tensor) -> torch.Tensor:
    stacked = np.stack([label.disc, label.cup]).astype(np.float64)
    return torch.as_tensor(stacked, dtype=like.dtype, device=like.device)


def seg_loss(probs: torch.Tensor, label: LabelMask) -> torch.Tensor:
    """Binary cross entropy plus soft Dice, summed over the two classes."""
    target = _label_tensor(label, probs)
    if probs.shape != target.shape:
        raise ShapeMismatchError(f"probs {tuple(probs.shape)} vs label {tuple(target.shape)}")
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    total = 0.0
    for c in range(2):
        pc, tc = p[c], target[c]
        bce = -(tc * torch.log(pc) + (1.0 - tc) * torch.log(1.0 - pc)).mean()
        inter = (pc * tc).sum()
        dice_term = 1.0 - (2.0 * inter + DICE_SMOOTH) / (pc.sum() + tc.sum() + DICE_SMOOTH)
        total = total + bce + dice_term
    return total


def dice(pred, gt) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks count as a perfect match."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def binarize_channels(probs, threshold: float = 0.5):
    """Raw thresholded (disc, cup) boolean channels, nesting not imposed."""
    p = probs.detach().cpu().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
    return p[0] >= threshold, p[1] >= threshold


def binarize_prediction(probs, threshold: float = 0.5) -> LabelMask:
    """Thresholded prediction with nesting restored, for mask-file dumps."""
    disc, cup = binarize_channels(probs, threshold)
    return LabelMask.nested(disc, cup)


def nested_dice(pred_disc, pred_cup, gt: LabelMask):
    """(disc, cup) Dice from raw predicted channels.

    The disc score uses the disc∪cup union on both sides, so predictions
    that violate the nesting cannot score above 1."""
    disc_d = dice(np.asarray(pred_disc) | np.asarray(pred_cup), gt.disc | gt.cup)
    cup_d = dice(pred_cup, gt.cup)
    return disc_d, cup_d
