"""Dataset-level Dice evaluation and the fixed-width report table."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataio import save_mask
from .exceptions import DataError
from .features import FeatureSpec, extract_features
from .masks import LabelMask
from .segmentor import (Segmentor, binarize_channels, binarize_prediction,
                        nested_dice)


@dataclass
class EvalReport:
    dice_disc: float
    dice_cup: float
    per_sample: list = field(default_factory=list)  # (id, dice_disc, dice_cup)
    n: int = 0
    config_hash: str = ""


def evaluate(segmentor: Segmentor, denoiser, schedule, spec: FeatureSpec,
             dataset, config_hash: str = "", predictions_dir=None) -> EvalReport:
    """Per-image deterministic Dice, averaged over images.

    Disc Dice uses the disc∪cup union on both sides; predictions binarize
    at 0.5. Samples are processed in sorted-id order for reproducibility.
    """
    if any(s.label is None for s in dataset):
        raise DataError("evaluation dataset contains unlabeled samples")
    if predictions_dir is not None:
        Path(predictions_dir).mkdir(parents=True, exist_ok=True)

    per_sample = []
    with torch.no_grad():
        for sample in sorted(dataset, key=lambda s: s.id):
            image = torch.from_numpy(sample.image).float() * 2.0 - 1.0
            feats = extract_features(image, denoiser, schedule, spec)
            probs, _ = segmentor(feats.values, dropout_active=False)
            disc_raw, cup_raw = binarize_channels(probs)
            disc_d, cup_d = nested_dice(disc_raw, cup_raw, sample.label)
            per_sample.append((sample.id, disc_d, cup_d))
            if predictions_dir is not None:
                save_mask(Path(predictions_dir) / f"{sample.id}.png",
                          binarize_prediction(probs))

    n = len(per_sample)
    mean_disc = float(np.mean([d for _, d, _ in per_sample])) if n else 0.0
    mean_cup = float(np.mean([c for _, _, c in per_sample])) if n else 0.0
    return EvalReport(dice_disc=mean_disc, dice_cup=mean_cup,
                      per_sample=per_sample, n=n, config_hash=config_hash)


def render_table(reports: list) -> str:
    """Fixed-width text table over (name, EvalReport) pairs, 3 decimals."""
    if not reports:
        raise ValueError("render_table needs at least one report")
    name_w = max(len("model"), max(len(name) for name, _ in reports))
    header = f"{'model':<{name_w}}  {'dice_disc':>9}  {'dice_cup':>8}  {'n':>4}"
    rows = [header, "-" * len(header)]
    for name, rep in reports:
        rows.append(
            f"{name:<{name_w}}  {rep.dice_disc:>9.3f}  {rep.dice_cup:>8.3f}  {rep.n:>4d}"
        )
    return "\n".join(rows) + "\n"


def write_report_sidecar(path, reports: list):
    """Machine-readable flat key = value sidecar for a rendered table."""
    lines = []
    for name, rep in reports:
        lines.append(f"report.{name}.dice_disc = {rep.dice_disc:.3f}")
        lines.append(f"report.{name}.dice_cup = {rep.dice_cup:.3f}")
        lines.append(f"report.{name}.n = {rep.n}")
        for sid, dd, dc in rep.per_sample:
            lines.append(f"report.{name}.sample.{sid}.dice_disc = {dd:.3f}")
            lines.append(f"report.{name}.sample.{sid}.dice_cup = {dc:.3f}")
    Path(path).write_text("".join(f"{ln}\n" for ln in lines))


def read_report_sidecar(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        out[key.strip()] = value.strip()
    return out
