"""Encoder-decoder noise estimation network with addressable decoder blocks.

The decoder is a flat sequence of conv blocks numbered 1..(levels *
blocks_per_level), coarsest resolution first, so "middle" block indices
select mid-resolution activations. Activations are captured with forward
hooks, which keeps the capture path identical for inference and for
gradient-carrying passes.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import UnknownBlockError


def _groups_for(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape [N, dim]."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=torch.float32, device=t.device)
        * (-torch.log(torch.tensor(10000.0)) / half)
    )
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ConvBlock(nn.Module):
    """conv3x3 -> GroupNorm -> +time projection -> SiLU."""

    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.GroupNorm(_groups_for(c_out), c_out)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.out_channels = c_out

    def forward(self, x, temb):
        h = self.norm(self.conv(x))
        h = h + self.time_proj(temb)[:, :, None, None]
        return F.silu(h)


class DenoiserUNet(nn.Module):
    """Predicts the noise component of a noisy image.

    Args:
        in_channels: image channels (3 for RGB).
        base_width: channel width at full resolution; deeper levels double it.
        levels: number of resolution levels (full res counts as one).
        blocks_per_level: decoder conv blocks per level; the decoder exposes
            levels * blocks_per_level blocks addressable as 1..N.
        time_dim: sinusoidal embedding width.
    """

    def __init__(self, in_channels: int = 3, base_width: int = 4, levels: int = 3,
                 blocks_per_level: int = 4, time_dim: int = 32):
        super().__init__()
        if levels < 2:
            raise ValueError("need at least 2 resolution levels")
        self.in_channels = in_channels
        self.base_width = base_width
        self.levels = levels
        self.blocks_per_level = blocks_per_level
        self.time_dim = time_dim

        widths = [base_width * (2 ** i) for i in range(levels)]  # fine -> coarse
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        self.downs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
            for i in range(levels - 1)
        )
        self.middle = ConvBlock(widths[-1], widths[-1], time_dim)

        # Decoder blocks, coarse level first. The first block of each level
        # consumes the upsampled carry concatenated with the encoder skip.
        blocks = []
        carry = widths[-1]
        for level in range(levels - 1, -1, -1):
            w = widths[level]
            blocks.append(ConvBlock(carry + w, w, time_dim))
            for _ in range(blocks_per_level - 1):
                blocks.append(ConvBlock(w, w, time_dim))
            carry = w
        self.decoder_blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(widths[0], in_channels, 3, padding=1)

    @property
    def num_decoder_blocks(self) -> int:
        return len(self.decoder_blocks)

    def decoder_block(self, index: int) -> ConvBlock:
        """Decoder block by 1-based index."""
        if not 1 <= index <= self.num_decoder_blocks:
            raise UnknownBlockError(
                f"block {index} not in [1, {self.num_decoder_blocks}]"
            )
        return self.decoder_blocks[index - 1]

    def block_width(self, index: int) -> int:
        return self.decoder_block(index).out_channels

    def forward(self, x, t):
        temb = timestep_embedding(t, self.time_dim)
        skips = [self.stem(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        h = self.middle(skips[-1], temb)
        i = 0
        for level in range(self.levels):
            if level > 0:
                h = F.interpolate(h, scale_factor=2.0, mode="nearest")
            h = self.decoder_blocks[i](torch.cat([h, skips[-1 - level]], dim=1), temb)
            i += 1
            for _ in range(self.blocks_per_level - 1):
                h = self.decoder_blocks[i](h, temb)
                i += 1
        return self.head(h)


def capture_activations(denoiser: DenoiserUNet, x_t: torch.Tensor, t,
                        blocks: list[int]) -> list[torch.Tensor]:
    """Run one forward pass and return the activations of the requested
    decoder blocks, in the order requested. The predicted noise is discarded.
    """
    for b in blocks:
        denoiser.decoder_block(b)  # raises UnknownBlockError early
    x_in = x_t if x_t.ndim == 4 else x_t.unsqueeze(0)
    if isinstance(t, torch.Tensor):
        t_in = t if t.ndim == 1 else t.reshape(1)
    else:
        t_in = torch.full((x_in.shape[0],), int(t), dtype=torch.long, device=x_in.device)

    captured: dict[int, torch.Tensor] = {}
    handles = []
    try:
        for b in set(blocks):
            def hook(_module, _inputs, output, _b=b):
                captured[_b] = output
            handles.append(denoiser.decoder_block(b).register_forward_hook(hook))
        denoiser(x_in, t_in)
    finally:
        for h in handles:
            h.remove()
    out = [captured[b] for b in blocks]
    if x_t.ndim != 4:
        out = [a[0] for a in out]
    return out
