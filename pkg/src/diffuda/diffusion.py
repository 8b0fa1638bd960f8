"""Core DDPM mechanics: noise schedule, closed-form forward noising,
ancestral reverse step, and the noise-estimation training loss.

The schedule tables are kept in float64 so that closed-form coefficients
stay exact enough for the numerical checks; they are cast to the input
tensor's dtype at use. Timesteps are 1-based: t runs over [1, T] and
``alpha_bars[t-1]`` holds the cumulative product up to step t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .exceptions import ShapeMismatchError, TimestepRangeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep variance tables of the forward process.

    betas[t-1] is the variance added at step t, alphas = 1 - betas, and
    alpha_bars is the running product of alphas.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.T,):
            raise ShapeMismatchError(f"betas must have shape ({self.T},), got {betas.shape}")
        if not (np.all(betas > 0.0) and np.all(betas < 1.0)):
            raise ValueError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(self.alphas))

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise TimestepRangeError(f"t={t} outside [1, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._check_t(t) - 1])

    def sigma(self, t: int) -> float:
        """Fixed reverse-step noise scale sqrt(beta_t)."""
        return float(np.sqrt(self.betas[self._check_t(t) - 1]))


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly spaced beta schedule from beta_start to beta_end inclusive."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(T=int(T), betas=betas)


def _per_sample_coef(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather per-sample float64 coefficients and shape them for broadcasting."""
    idx = t.long().cpu().numpy() - 1
    coef = torch.as_tensor(values[idx], dtype=like.dtype, device=like.device)
    return coef.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Closed-form forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` may be a scalar (applied to everything) or a 1-D tensor with one
    timestep per leading-dim sample.
    """
    x0 = torch.as_tensor(x0)
    eps = torch.as_tensor(eps, dtype=x0.dtype)
    if eps.shape != x0.shape:
        raise ShapeMismatchError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        if x0.ndim < 1 or x0.shape[0] != t.shape[0]:
            raise ShapeMismatchError("per-sample t needs matching leading batch dim")
        if not bool(((t >= 1) & (t <= schedule.T)).all()):
            raise TimestepRangeError(f"t entries outside [1, {schedule.T}]")
        scale = _per_sample_coef(np.sqrt(schedule.alpha_bars), t, x0)
        noise_scale = _per_sample_coef(np.sqrt(1.0 - schedule.alpha_bars), t, x0)
        return scale * x0 + noise_scale * eps
    ab = schedule.alpha_bar(int(t))
    return float(np.sqrt(ab)) * x0 + float(np.sqrt(1.0 - ab)) * eps


def p_sample_step(x_t, t: int, schedule: NoiseSchedule, denoiser, z):
    """One ancestral reverse step.

    x_{t-1} = (x_t - (1-alpha_t)/sqrt(1-abar_t) * eps_theta(x_t, t)) / sqrt(alpha_t)
              + sigma_t * z

    with sigma_t = sqrt(beta_t). The caller passes z (zeros at t=1 by
    convention) so the step stays a pure function.
    """
    x_t = torch.as_tensor(x_t)
    z = torch.as_tensor(z, dtype=x_t.dtype)
    if z.shape != x_t.shape:
        raise ShapeMismatchError(f"z shape {tuple(z.shape)} != x_t shape {tuple(x_t.shape)}")
    t = int(t)
    alpha = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    batched = x_t.ndim == 4
    x_in = x_t if batched else x_t.reshape(1, *x_t.shape) if x_t.ndim == 3 else None
    if x_in is not None:
        t_in = torch.full((x_in.shape[0],), t, dtype=torch.long, device=x_t.device)
        eps = denoiser(x_in, t_in)
        eps = eps if batched else eps[0]
    else:
        # scalar / low-rank tensors: stub denoisers used in tests take (x, t)
        eps = denoiser(x_t, t)
    eps = torch.as_tensor(eps, dtype=x_t.dtype)
    if eps.shape != x_t.shape:
        raise ShapeMismatchError("denoiser output shape differs from x_t")
    mean = (x_t - ((1.0 - alpha) / float(np.sqrt(1.0 - ab))) * eps) / float(np.sqrt(alpha))
    return mean + schedule.sigma(t) * z


@dataclass
class DiffusionBatch:
    """A batch of clean images in [-1, 1] with their domain tags."""

    x0: torch.Tensor
    domain_tags: list[str]

    def __post_init__(self):
        if self.x0.ndim != 4 or self.x0.shape[0] < 1:
            raise ValueError("x0 must be [N, C, H, W] with N >= 1")
        if len(self.domain_tags) != self.x0.shape[0]:
            raise ShapeMismatchError("one domain tag per sample required")
        if float(self.x0.abs().max()) > 1.0 + 1e-6:
            raise ValueError("x0 must be normalized to [-1, 1]")


def noise_loss(denoiser, batch: DiffusionBatch, schedule: NoiseSchedule,
               rng: torch.Generator) -> torch.Tensor:
    """Mean squared error between drawn noise and the denoiser's estimate.

    t is drawn uniformly from [1, T] per sample and eps from N(0, I), both
    from ``rng`` so the loss is a deterministic function of (params, rng).
    """
    x0 = batch.x0
    t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=rng, device=x0.device)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype, device=x0.device)
    x_t = q_sample(x0, t, eps, schedule)
    pred = denoiser(x_t, t)
    return torch.mean((eps - pred) ** 2)
