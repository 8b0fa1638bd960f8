"""Per-pixel descriptor maps assembled from denoiser decoder activations.

An image is noised to each configured timestep, run through the denoiser
once, and the requested decoder block activations are bilinearly upsampled
to a common resolution and concatenated (timestep-major, block-minor,
both ascending).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffusion import NoiseSchedule, q_sample
from .exceptions import DataError
from .unet import DenoiserUNet, capture_activations

DEFAULT_BLOCKS = (5, 6, 7, 8, 12)
DEFAULT_TIMESTEPS = (50, 150, 250)


@dataclass(frozen=True)
class FeatureSpec:
    """What to capture and how to assemble it.

    noise_seed_policy "fixed-per-image" derives the forward-noise seed from
    the image content and ``noise_seed``, so repeated extraction of the same
    image is bitwise identical. "fresh" draws from the caller's rng.
    """

    blocks: tuple = DEFAULT_BLOCKS
    timesteps: tuple = DEFAULT_TIMESTEPS
    target_resolution: tuple = (64, 64)
    noise_seed_policy: str = "fixed-per-image"
    noise_seed: int = 0

    def __post_init__(self):
        if len(self.blocks) == 0:
            raise ValueError("blocks must be non-empty")
        if self.noise_seed_policy not in ("fixed-per-image", "fresh"):
            raise ValueError(f"unknown noise_seed_policy {self.noise_seed_policy!r}")
        object.__setattr__(self, "blocks", tuple(sorted(int(b) for b in self.blocks)))
        object.__setattr__(self, "timesteps", tuple(sorted(int(t) for t in self.timesteps)))

    def validate_against(self, schedule: NoiseSchedule, denoiser: DenoiserUNet):
        for t in self.timesteps:
            if not 1 <= t <= schedule.T:
                raise ValueError(f"feature timestep {t} outside [1, {schedule.T}]")
        for b in self.blocks:
            denoiser.decoder_block(b)


@dataclass
class DiffusionFeature:
    """Concatenated activation map plus the layout used to build it."""

    values: torch.Tensor  # [C_total, H, W]
    channel_layout: list = field(default_factory=list)  # (timestep, block, channels)

    @property
    def channels(self) -> int:
        return int(self.values.shape[0])

    def slice(self, timestep: int, block: int) -> torch.Tensor:
        """View of the channels contributed by one (timestep, block) pair."""
        offset = 0
        for t, b, c in self.channel_layout:
            if t == timestep and b == block:
                return self.values[offset:offset + c]
            offset += c
        raise KeyError(f"(t={timestep}, block={block}) not in layout")


def _image_noise_seed(image: torch.Tensor, base_seed: int) -> int:
    payload = image.detach().cpu().to(torch.float32).numpy().tobytes()
    digest = hashlib.sha256(payload + int(base_seed).to_bytes(8, "little", signed=True))
    return int.from_bytes(digest.digest()[:8], "little")


def extract_features(image: torch.Tensor, denoiser: DenoiserUNet,
                     schedule: NoiseSchedule, spec: FeatureSpec,
                     rng: torch.Generator | None = None) -> DiffusionFeature:
    """Build the diffusion feature map of a single [C, H, W] image."""
    spec.validate_against(schedule, denoiser)
    if spec.noise_seed_policy == "fixed-per-image":
        gen = torch.Generator(device="cpu")
        gen.manual_seed(_image_noise_seed(image, spec.noise_seed))
    else:
        if rng is None:
            raise ValueError("fresh noise policy requires an rng")
        gen = rng

    maps = []
    layout = []
    for t in spec.timesteps:
        eps = torch.randn(image.shape, generator=gen, dtype=image.dtype)
        x_t = q_sample(image, t, eps, schedule)
        acts = capture_activations(denoiser, x_t, t, list(spec.blocks))
        for b, act in zip(spec.blocks, acts):
            up = torch.nn.functional.interpolate(
                act.unsqueeze(0), size=spec.target_resolution,
                mode="bilinear", align_corners=False,
            )[0]
            maps.append(up)
            layout.append((t, b, int(act.shape[0])))
    return DiffusionFeature(values=torch.cat(maps, dim=0), channel_layout=layout)


def extract_batch(images, denoiser: DenoiserUNet, schedule: NoiseSchedule,
                  spec: FeatureSpec, rng: torch.Generator | None = None):
    """extract_features over a list, order preserved."""
    return [extract_features(img, denoiser, schedule, spec, rng) for img in images]


def extract_features_batched(images: torch.Tensor, denoiser: DenoiserUNet,
                             schedule: NoiseSchedule, spec: FeatureSpec,
                             rng: torch.Generator | None = None) -> torch.Tensor:
    """Batched extraction used by the training loops.

    Stacks all (image, timestep) pairs into one denoiser pass and returns
    the [N, C_total, H, W] feature tensor. Without ``rng`` the forward noise
    is fixed per image (matching ``extract_features``); with ``rng`` fresh
    noise is drawn per call, which the adversarial stage uses so the
    discriminator never sees a frozen noise realization. Gradients flow into
    the denoiser when enabled.
    """
    spec.validate_against(schedule, denoiser)
    n = images.shape[0]
    ts = list(spec.timesteps)
    noised = []
    for img in images:
        if rng is None:
            gen = torch.Generator(device="cpu")
            gen.manual_seed(_image_noise_seed(img, spec.noise_seed))
        else:
            gen = rng
        for t in ts:
            eps = torch.randn(img.shape, generator=gen, dtype=img.dtype)
            noised.append(q_sample(img, t, eps, schedule))
    x_t = torch.stack(noised)  # [N * len(ts), C, H, W]
    t_in = torch.tensor(ts, dtype=torch.long).repeat(n)
    acts = capture_activations(denoiser, x_t, t_in, list(spec.blocks))
    per_image = []
    for i in range(n):
        maps = []
        for k in range(len(ts)):
            row = i * len(ts) + k
            for act in acts:
                maps.append(torch.nn.functional.interpolate(
                    act[row:row + 1], size=spec.target_resolution,
                    mode="bilinear", align_corners=False,
                )[0])
        per_image.append(torch.cat(maps, dim=0))
    return torch.stack(per_image)


def feature_layout(denoiser: DenoiserUNet, spec: FeatureSpec):
    """Channel layout (timestep, block, channels) without running a pass."""
    return [(t, b, denoiser.block_width(b)) for t in spec.timesteps for b in spec.blocks]


def feature_channels(denoiser: DenoiserUNet, spec: FeatureSpec) -> int:
    return sum(c for _, _, c in feature_layout(denoiser, spec))


class FeatureCache:
    """Disk cache of extracted features, one binary file per image id.

    A plain-text index maps image id -> (file, channel layout, config hash).
    The cache clears itself when opened with a different config hash.
    """

    def __init__(self, root, config_hash: str):
        self.root = Path(root)
        self.config_hash = config_hash
        self.index_path = self.root / "index.txt"
        self.root.mkdir(parents=True, exist_ok=True)
        self._index = {}
        self._load_index()

    def _load_index(self):
        if not self.index_path.exists():
            return
        stale = False
        for line in self.index_path.read_text().splitlines():
            if not line.strip():
                continue
            image_id, fname, layout_s, chash = line.split("\t")
            if chash != self.config_hash:
                stale = True
                break
            self._index[image_id] = (fname, layout_s)
        if stale:
            for f in self.root.glob("*.npy"):
                f.unlink()
            self.index_path.unlink()
            self._index = {}

    @staticmethod
    def _layout_str(layout) -> str:
        return ",".join(f"{t}:{b}:{c}" for t, b, c in layout)

    @staticmethod
    def _parse_layout(s: str):
        return [tuple(int(v) for v in item.split(":")) for item in s.split(",")]

    def put(self, image_id: str, feature: DiffusionFeature):
        fname = f"{image_id}.npy"
        np.save(self.root / fname, feature.values.detach().cpu().numpy())
        self._index[image_id] = (fname, self._layout_str(feature.channel_layout))
        with open(self.index_path, "w") as fh:
            for iid, (fn, ls) in sorted(self._index.items()):
                fh.write(f"{iid}\t{fn}\t{ls}\t{self.config_hash}\n")

    def get(self, image_id: str) -> DiffusionFeature | None:
        entry = self._index.get(image_id)
        if entry is None:
            return None
        fname, layout_s = entry
        path = self.root / fname
        if not path.exists():
            raise DataError(f"cache index references missing file {path}")
        values = torch.from_numpy(np.load(path))
        return DiffusionFeature(values=values, channel_layout=self._parse_layout(layout_s))
