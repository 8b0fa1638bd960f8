"""Source-domain augmentation: joint geometric warps of image and masks,
photometric jitter of the image alone. Target-domain samples are never
augmented (the adaptation protocol forbids it).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .masks import LabelMask
from .synth import SegSample


@dataclass(frozen=True)
class AugmentConfig:
    rotation_degrees: float = 15.0
    flip_prob: float = 0.5
    elastic_grid: int = 4
    elastic_max_frac: float = 0.05   # displacement cap as a fraction of width
    contrast_range: tuple = (0.8, 1.2)
    noise_std: float = 0.02
    erase_area_range: tuple = (0.02, 0.10)
    op_prob: float = 0.5             # chance each optional op fires


def flip_horizontal(sample: SegSample) -> SegSample:
    image = np.ascontiguousarray(sample.image[:, :, ::-1])
    label = sample.label
    if label is not None:
        label = LabelMask(disc=np.ascontiguousarray(label.disc[:, ::-1]),
                          cup=np.ascontiguousarray(label.cup[:, ::-1]))
    return replace(sample, image=image, label=label)


def rotate(sample: SegSample, degrees: float) -> SegSample:
    if degrees == 0.0:
        return sample
    image = np.stack([
        ndimage.rotate(c, degrees, reshape=False, order=1, mode="nearest")
        for c in sample.image
    ]).astype(np.float32)
    label = sample.label
    if label is not None:
        disc = ndimage.rotate(label.disc.astype(np.uint8), degrees, reshape=False,
                              order=0, mode="constant") > 0
        cup = ndimage.rotate(label.cup.astype(np.uint8), degrees, reshape=False,
                             order=0, mode="constant") > 0
        label = LabelMask.nested(disc, cup)
    return replace(sample, image=image, label=label)


def elastic_warp(sample: SegSample, rng: np.random.Generator,
                 grid: int = 4, max_frac: float = 0.05) -> SegSample:
    """Smooth random displacement field: coarse grid, bicubic upsample."""
    _, h, w = sample.image.shape
    cap = max_frac * w
    coarse = rng.uniform(-cap, cap, size=(2, grid, grid))
    dy = ndimage.zoom(coarse[0], (h / grid, w / grid), order=3)
    dx = ndimage.zoom(coarse[1], (h / grid, w / grid), order=3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([yy + dy, xx + dx])
    image = np.stack([
        ndimage.map_coordinates(c, coords, order=1, mode="nearest")
        for c in sample.image
    ]).astype(np.float32)
    label = sample.label
    if label is not None:
        disc = ndimage.map_coordinates(label.disc.astype(np.uint8), coords,
                                       order=0, mode="constant") > 0
        cup = ndimage.map_coordinates(label.cup.astype(np.uint8), coords,
                                      order=0, mode="constant") > 0
        label = LabelMask.nested(disc, cup)
    return replace(sample, image=image, label=label)


def adjust_contrast(sample: SegSample, gain: float) -> SegSample:
    image = np.clip((sample.image - 0.5) * gain + 0.5, 0.0, 1.0).astype(np.float32)
    return replace(sample, image=image)


def add_noise(sample: SegSample, rng: np.random.Generator, std: float) -> SegSample:
    image = np.clip(sample.image + rng.normal(0.0, std, sample.image.shape), 0.0, 1.0)
    return replace(sample, image=image.astype(np.float32))


def random_erase(sample: SegSample, rng: np.random.Generator,
                 area_range=(0.02, 0.10)) -> SegSample:
    """Blank one rectangle with the image mean; masks untouched."""
    _, h, w = sample.image.shape
    area = rng.uniform(*area_range) * h * w
    aspect = rng.uniform(0.5, 2.0)
    eh = max(1, min(h, int(round(np.sqrt(area * aspect)))))
    ew = max(1, min(w, int(round(np.sqrt(area / aspect)))))
    y0 = int(rng.integers(0, h - eh + 1))
    x0 = int(rng.integers(0, w - ew + 1))
    image = sample.image.copy()
    image[:, y0:y0 + eh, x0:x0 + ew] = sample.image.mean()
    return replace(sample, image=image)


def augment(sample: SegSample, rng: np.random.Generator,
            config: AugmentConfig = AugmentConfig()) -> SegSample:
    """Random augmentation pipeline for labeled source samples."""
    if sample.label is None:
        raise ValueError("augment expects a labeled (source) sample")
    out = sample
    if rng.uniform() < config.flip_prob:
        out = flip_horizontal(out)
    if rng.uniform() < config.op_prob:
        out = rotate(out, float(rng.uniform(-config.rotation_degrees, config.rotation_degrees)))
    if rng.uniform() < config.op_prob:
        out = elastic_warp(out, rng, grid=config.elastic_grid, max_frac=config.elastic_max_frac)
    if rng.uniform() < config.op_prob:
        out = adjust_contrast(out, float(rng.uniform(*config.contrast_range)))
    if rng.uniform() < config.op_prob:
        out = add_noise(out, rng, config.noise_std)
    if rng.uniform() < config.op_prob:
        out = random_erase(out, rng, config.erase_area_range)
    return out
