"""Pixel-wise domain discriminator with a gradient reversal layer.

The discriminator is trained to tell source features (label 1) from target
features (label 0); the reversal layer flips the gradient flowing back into
the feature producer so one backward pass trains both sides of the
adversarial game.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

PROB_EPS = 1e-7


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coefficient):
        ctx.coefficient = coefficient
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.coefficient, None


def grl_apply(x: torch.Tensor, coefficient: float) -> torch.Tensor:
    """Identity forward; backward multiplies the gradient by -coefficient."""
    return _GradReverse.apply(x, float(coefficient))


class GradientReversal(nn.Module):
    def __init__(self, coefficient: float = 1.0):
        super().__init__()
        self.coefficient = float(coefficient)

    def forward(self, x):
        return grl_apply(x, self.coefficient)


class DomainDiscriminator(nn.Module):
    """Small conv classifier mapping a feature map to per-pixel source
    probabilities; output spatial size equals input spatial size."""

    def __init__(self, in_channels: int, width: int = 16):
        super().__init__()
        self.in_channels = in_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 1, 1),
        )

    def forward(self, x):
        single = x.ndim == 3
        if single:
            x = x.unsqueeze(0)
        p = torch.sigmoid(self.net(x))
        return p[0] if single else p


def _as_batched(p) -> torch.Tensor:
    p = torch.as_tensor(p)
    if p.ndim == 2:
        return p.reshape(1, -1)
    return p.reshape(p.shape[0], -1)


def discriminator_loss(d_source, d_target) -> torch.Tensor:
    """Per-pixel binary cross entropy of the domain game.

    Sums -[log d_source + log(1 - d_target)] over pixels and averages over
    batch elements. Probabilities are clamped away from {0, 1}.
    """
    ds = _as_batched(d_source).clamp(PROB_EPS, 1.0 - PROB_EPS)
    dt = _as_batched(d_target).clamp(PROB_EPS, 1.0 - PROB_EPS)
    loss_s = -torch.log(ds).sum(dim=1).mean()
    loss_t = -torch.log(1.0 - dt).sum(dim=1).mean()
    return loss_s + loss_t


def stage1_loss(noise_loss_value, disc_loss_value, adv_weight: float):
    """Combined diffusion + adversarial objective: noise + w * disc."""
    if adv_weight < 0:
        raise ValueError("adv_weight must be >= 0")
    return noise_loss_value + adv_weight * disc_loss_value


def grl_ramp(iteration: int, total_iterations: int, ramp_fraction: float = 0.1,
             coefficient: float = 1.0) -> float:
    """Linear ramp of the reversal strength over the first part of training."""
    if ramp_fraction <= 0:
        return coefficient
    ramp_iters = max(1, int(total_iterations * ramp_fraction))
    return coefficient * min(1.0, iteration / ramp_iters)
