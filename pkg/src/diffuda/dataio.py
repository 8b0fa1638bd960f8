"""Dataset directory layout, PNG encoding/decoding, RoI cropping and split
manifests.

Layout: ``root/{source|target}/{images,masks}/NAME.png`` with optional
per-domain ``crops.txt`` (lines ``id cx cy size``) and shared split
manifests ``root/splits/{train,test}.txt`` (one id per line).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DataError
from .masks import LabelMask
from .synth import SegSample


def save_image(path, image: np.ndarray):
    """[3, H, W] float in [0, 1] -> 8-bit RGB PNG."""
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def save_mask(path, label: LabelMask):
    Image.fromarray(label.to_codes(), mode="L").save(path)


def load_mask(path) -> LabelMask:
    with Image.open(path) as im:
        codes = np.asarray(im.convert("L"))
    return LabelMask.from_codes(codes)


def crop_roi(image: np.ndarray, center, size: int) -> np.ndarray:
    """Square window of ``size`` centered as close to ``center`` as edge
    padding allows; the window is clamped inside the padded image."""
    if size <= 0:
        raise ValueError("crop size must be positive")
    chans, h, w = image.shape
    cy, cx = int(round(center[0])), int(round(center[1]))
    pad = size  # generous, guarantees any clamped window fits
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    y0 = np.clip(cy - size // 2 + pad, 0, h + 2 * pad - size)
    x0 = np.clip(cx - size // 2 + pad, 0, w + 2 * pad - size)
    return padded[:, y0:y0 + size, x0:x0 + size].copy()


def _read_crop_manifest(path: Path) -> dict:
    crops = {}
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise DataError(f"bad crop manifest line: {line!r}")
        crops[parts[0]] = (float(parts[1]), float(parts[2]), int(parts[3]))
    return crops


def load_dataset(root, domain: str) -> list[SegSample]:
    """Load one domain directory; masks are optional per image."""
    root = Path(root)
    images_dir = root / "images"
    masks_dir = root / "masks"
    if not images_dir.is_dir():
        raise DataError(f"missing images directory {images_dir}")
    crop_path = root / "crops.txt"
    crops = _read_crop_manifest(crop_path) if crop_path.exists() else {}

    image_files = sorted(images_dir.glob("*.png"))
    known = {p.stem for p in image_files}
    if masks_dir.is_dir():
        for m in masks_dir.glob("*.png"):
            if m.stem not in known:
                raise DataError(f"mask without image: {m}")

    samples = []
    for img_path in image_files:
        try:
            image = load_image(img_path)
        except OSError as exc:
            raise DataError(f"unreadable image {img_path}: {exc}") from exc
        label = None
        mask_path = masks_dir / img_path.name
        if mask_path.exists():
            label = load_mask(mask_path)
        if img_path.stem in crops:
            cx, cy, size = crops[img_path.stem]
            image = crop_roi(image, (cy, cx), size)
            if label is not None:
                disc = crop_roi(label.disc[None].astype(np.float32), (cy, cx), size)[0] > 0.5
                cup = crop_roi(label.cup[None].astype(np.float32), (cy, cx), size)[0] > 0.5
                label = LabelMask.nested(disc, cup)
        samples.append(SegSample(image=image, label=label, domain=domain, id=img_path.stem))
    return samples


def write_dataset(root, samples: list[SegSample]):
    """Write samples into the per-domain layout under ``root``."""
    root = Path(root)
    by_domain = {}
    for s in samples:
        by_domain.setdefault(s.domain, []).append(s)
    for domain, items in by_domain.items():
        images_dir = root / domain / "images"
        masks_dir = root / domain / "masks"
        images_dir.mkdir(parents=True, exist_ok=True)
        masks_dir.mkdir(parents=True, exist_ok=True)
        for s in items:
            save_image(images_dir / f"{s.id}.png", s.image)
            if s.label is not None:
                save_mask(masks_dir / f"{s.id}.png", s.label)


def write_splits(root, train_ids, test_ids):
    splits = Path(root) / "splits"
    splits.mkdir(parents=True, exist_ok=True)
    (splits / "train.txt").write_text("".join(f"{i}\n" for i in train_ids))
    (splits / "test.txt").write_text("".join(f"{i}\n" for i in test_ids))


def read_split(root, name: str) -> list[str]:
    path = Path(root) / "splits" / f"{name}.txt"
    if not path.exists():
        raise DataError(f"missing split manifest {path}")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def filter_split(samples: list[SegSample], ids) -> list[SegSample]:
    wanted = set(ids)
    return [s for s in samples if s.id in wanted]
