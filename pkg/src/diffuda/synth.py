"""Synthetic fundus-like benchmark: textured circular background, a bright
elliptical disc, a nested brighter cup, and a configurable photometric
domain shift applied after the masks are rendered so the masks stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .exceptions import ConfigError
from .masks import LabelMask


@dataclass(frozen=True)
class DomainShift:
    """Photometric transform distinguishing one domain's look."""

    brightness_delta: float = 0.0
    contrast_gain: float = 1.0
    blur_sigma: float = 0.0
    noise_std: float = 0.0
    hue_shift: float = 0.0  # radians of rotation about the gray axis

    @classmethod
    def identity(cls) -> "DomainShift":
        return cls()


@dataclass(frozen=True)
class SynthConfig:
    count: int = 20
    resolution: tuple = (64, 64)
    disc_radius_range: tuple = (0.18, 0.28)  # fraction of min(H, W)
    cup_ratio_range: tuple = (0.45, 0.70)
    shift: DomainShift = field(default_factory=DomainShift)
    domain: str = "source"
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.cup_ratio_range
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigError("cup_ratio_range must lie strictly inside (0, 1)")
        lo, hi = self.disc_radius_range
        if not (0.0 < lo <= hi < 0.5):
            raise ConfigError("disc_radius_range must lie inside (0, 0.5)")
        if self.count < 0:
            raise ConfigError("count must be >= 0")
        if self.domain not in ("source", "target"):
            raise ConfigError(f"unknown domain {self.domain!r}")


@dataclass
class SegSample:
    """One image with optional nested label masks and a domain tag."""

    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    label: LabelMask | None
    domain: str
    id: str


def _ellipse_field(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _hue_rotation_matrix(theta: float) -> np.ndarray:
    """Rotation of RGB space about the (1,1,1) axis."""
    c, s = np.cos(theta), np.sin(theta)
    one_third = 1.0 / 3.0
    root = np.sqrt(1.0 / 3.0)
    m = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            m[i, j] = one_third * (1.0 - c) + (c if i == j else 0.0)
            m[i, j] += -root * s if (i - j) % 3 == 1 else (root * s if i != j else 0.0)
    return m


def apply_shift(image: np.ndarray, shift: DomainShift, rng: np.random.Generator) -> np.ndarray:
    """Photometric domain shift; label masks are never touched."""
    img = image.astype(np.float64)
    if shift.hue_shift != 0.0:
        m = _hue_rotation_matrix(shift.hue_shift)
        img = np.einsum("ij,jhw->ihw", m, img)
    if shift.contrast_gain != 1.0:
        img = (img - 0.5) * shift.contrast_gain + 0.5
    if shift.brightness_delta != 0.0:
        img = img + shift.brightness_delta
    if shift.blur_sigma > 0.0:
        img = np.stack([ndimage.gaussian_filter(c, shift.blur_sigma) for c in img])
    if shift.noise_std > 0.0:
        img = img + rng.normal(0.0, shift.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_sample(h, w, rng: np.random.Generator):
    min_side = min(h, w)
    cy = h * rng.uniform(0.40, 0.60)
    cx = w * rng.uniform(0.40, 0.60)
    return cy, cx, min_side


def generate_synthetic(config: SynthConfig) -> list[SegSample]:
    """Deterministic dataset; sample i is a pure function of (seed, i)."""
    h, w = config.resolution
    samples = []
    for i in range(config.count):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, i]))
        cy, cx, min_side = _render_sample(h, w, rng)
        disc_ry = min_side * rng.uniform(*config.disc_radius_range)
        disc_rx = disc_ry * rng.uniform(0.85, 1.15)
        ratio = rng.uniform(*config.cup_ratio_range)
        cup_ry, cup_rx = disc_ry * ratio, disc_rx * ratio
        # keep the cup strictly inside the disc despite a small center offset
        max_off = 0.5 * (1.0 - ratio) * min(disc_ry, disc_rx)
        cup_cy = cy + rng.uniform(-max_off, max_off)
        cup_cx = cx + rng.uniform(-max_off, max_off)

        disc_field = _ellipse_field(h, w, cy, cx, disc_ry, disc_rx)
        cup_field = _ellipse_field(h, w, cup_cy, cup_cx, cup_ry, cup_rx)
        disc_mask = disc_field <= 1.0
        cup_mask = (cup_field <= 1.0) & disc_mask
        label = LabelMask(disc=disc_mask, cup=cup_mask)

        # fundus-ish background: warm base, radial vignette, smooth texture
        base = np.array([0.62, 0.33, 0.18]) * rng.uniform(0.85, 1.15)
        vignette = 1.0 - 0.45 * _smoothstep(
            _ellipse_field(h, w, h / 2, w / 2, 0.75 * h, 0.75 * w)
        )
        texture = ndimage.zoom(rng.normal(0.0, 1.0, (6, 6)), (h / 6, w / 6), order=3)
        img = base[:, None, None] * vignette[None] + 0.035 * texture[None]

        # disc and cup rendered with soft edges; masks stay the exact fields
        disc_soft = _smoothstep((1.0 - disc_field) / 0.15)
        cup_soft = _smoothstep((1.0 - cup_field) / 0.20)
        disc_color = np.array([0.30, 0.22, 0.10]) * rng.uniform(0.9, 1.1)
        cup_color = np.array([0.16, 0.16, 0.06]) * rng.uniform(0.9, 1.1)
        img = img + disc_color[:, None, None] * disc_soft[None]
        img = img + cup_color[:, None, None] * cup_soft[None]
        img = np.clip(img, 0.0, 1.0).astype(np.float32)

        img = apply_shift(img, config.shift, rng)
        samples.append(SegSample(
            image=img, label=label, domain=config.domain,
            id=f"{config.domain}_{i:04d}",
        ))
    return samples
