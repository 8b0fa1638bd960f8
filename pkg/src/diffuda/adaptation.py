"""Target-domain self-training machinery: thresholded pseudo-labels,
Monte-Carlo-dropout uncertainty, uncertainty-refined masks, class
prototypes, and the prototype consistency objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import EmptyMaskError, ShapeMismatchError
from .masks import LabelMask
from .segmentor import Segmentor


@dataclass(frozen=True)
class PCLConfig:
    """Thresholds and weights of the consistency stage."""

    gamma: float = 0.75        # pseudo-label probability threshold
    eta: float = 0.05          # uncertainty threshold on the prob std
    K: int = 8                 # stochastic forward passes
    dropout_rate: float = 0.5
    lambda_pcl: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.eta <= 0.0:
            raise ValueError("eta must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.lambda_pcl < 0.0:
            raise ValueError("lambda_pcl must be >= 0")


@dataclass
class UncertaintyMap:
    """Per-class, per-pixel standard deviation across stochastic passes."""

    m: np.ndarray  # [2, H, W], >= 0

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        if self.m.ndim != 3 or self.m.shape[0] != 2:
            raise ValueError(f"uncertainty map must be [2, H, W], got {self.m.shape}")
        if np.any(self.m < 0):
            raise ValueError("uncertainty must be non-negative")


@dataclass
class Prototype:
    """Centroid of last-layer features over a class's pixels."""

    vector: torch.Tensor
    pixel_count: int


def _probs_array(probs) -> np.ndarray:
    p = probs.detach().cpu().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
    if p.ndim != 3 or p.shape[0] != 2:
        raise ValueError(f"probs must be [2, H, W], got {p.shape}")
    return p


def make_pseudo_label(probs, gamma: float) -> LabelMask:
    """Threshold at gamma per class (>= keeps the pixel), then re-nest."""
    p = _probs_array(probs)
    return LabelMask.nested(p[0] >= gamma, p[1] >= gamma)


def mc_uncertainty(segmentor: Segmentor, features: torch.Tensor, K: int,
                   rng: torch.Generator):
    """K dropout-active passes; per-pixel mean probability and population std.

    Returns (mean_probs [2, H, W] tensor, UncertaintyMap). Detached: the
    pseudo-label path carries no gradient.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    with torch.no_grad():
        stack = []
        for _ in range(K):
            probs, _ = segmentor(features, dropout_active=True, rng=rng)
            stack.append(probs)
        stacked = torch.stack(stack)  # [K, 2, H, W]
        mean = stacked.mean(dim=0)
        std = stacked.std(dim=0, unbiased=False) if K > 1 else torch.zeros_like(mean)
    return mean, UncertaintyMap(m=std.cpu().numpy())


def mc_uncertainty_batched(segmentor: Segmentor, features: torch.Tensor, K: int,
                           rng: torch.Generator):
    """Batched variant for the training loop: features [N, C, H, W] ->
    (mean_probs [N, 2, H, W], list of UncertaintyMap). The K passes run
    batched, so per-pass dropout masks differ from per-sample calls."""
    if K < 1:
        raise ValueError("K must be >= 1")
    with torch.no_grad():
        stack = []
        for _ in range(K):
            probs, _ = segmentor(features, dropout_active=True, rng=rng)
            stack.append(probs)
        stacked = torch.stack(stack)  # [K, N, 2, H, W]
        mean = stacked.mean(dim=0)
        std = stacked.std(dim=0, unbiased=False) if K > 1 else torch.zeros_like(mean)
    maps = [UncertaintyMap(m=std[i].cpu().numpy()) for i in range(std.shape[0])]
    return mean, maps


def refine_pseudo_label(pseudo: LabelMask, m: UncertaintyMap, eta: float) -> LabelMask:
    """Keep a pseudo-label pixel only where the uncertainty is below eta."""
    if m.m.shape[1:] != pseudo.shape:
        raise ShapeMismatchError(f"uncertainty {m.m.shape[1:]} vs pseudo {pseudo.shape}")
    disc = pseudo.disc & (m.m[0] < eta)
    cup = pseudo.cup & (m.m[1] < eta)
    return LabelMask.nested(disc, cup)


def _mask_tensor(mask, like: torch.Tensor) -> torch.Tensor:
    if isinstance(mask, torch.Tensor):
        return mask.to(device=like.device, dtype=torch.bool)
    return torch.as_tensor(np.asarray(mask, dtype=bool), device=like.device)


def compute_prototype(f: torch.Tensor, mask) -> Prototype:
    """Mean feature vector over masked pixels.

    ``f`` is [C', H, W] or [N, C', H, W] with a matching [H, W] / [N, H, W]
    mask; gradients flow through the mean.
    """
    m = _mask_tensor(mask, f)
    if f.ndim == 3:
        f = f.unsqueeze(0)
        m = m.unsqueeze(0)
    if f.shape[0] != m.shape[0] or f.shape[2:] != m.shape[1:]:
        raise ShapeMismatchError(f"features {tuple(f.shape)} vs mask {tuple(m.shape)}")
    count = int(m.sum())
    if count == 0:
        raise EmptyMaskError("prototype undefined for an empty mask")
    flat_f = f.permute(1, 0, 2, 3).reshape(f.shape[1], -1)  # [C', N*H*W]
    flat_m = m.reshape(-1).to(f.dtype)
    vector = (flat_f * flat_m).sum(dim=1) / count
    return Prototype(vector=vector, pixel_count=count)


def pcl_loss(z_source: Prototype, z_target_refined: Prototype) -> torch.Tensor:
    """Euclidean distance between the two prototype vectors."""
    vs, vt = z_source.vector, z_target_refined.vector
    if vs.shape != vt.shape:
        raise ShapeMismatchError(f"prototype lengths differ: {vs.shape} vs {vt.shape}")
    return torch.linalg.vector_norm(vs - vt)


def stage2_loss(l_seg, l_pcl, lambda_pcl: float):
    """Supervised loss plus weighted prototype consistency."""
    if lambda_pcl < 0:
        raise ValueError("lambda_pcl must be >= 0")
    return l_seg + lambda_pcl * l_pcl
