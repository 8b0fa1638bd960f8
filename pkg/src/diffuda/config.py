"""Experiment configuration: dataclass defaults, the flat
``section.key = value`` text format, and the config hash carried by
checkpoints and caches.

Field defaults follow the published training protocol (full scale); the
desk profile overrides the scale-dependent knobs so the whole pipeline
runs in minutes on a small machine.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace

from .exceptions import ConfigError


@dataclass
class DataConfig:
    root: str = "data/synth"
    resolution: int = 512
    source_train: int = 20
    source_test: int = 8
    target_train: int = 20
    target_test: int = 24
    synth_seed: int = 7
    # photometric shift of the synthetic target domain
    target_brightness: float = -0.14
    target_contrast: float = 0.72
    target_blur: float = 0.7
    target_noise: float = 0.04
    target_hue: float = 0.5


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class ArchConfig:
    kind: str = "toy"            # toy | full
    unet_base_width: int = 4
    unet_levels: int = 3
    unet_blocks_per_level: int = 4
    time_dim: int = 32
    disc_width: int = 16
    seg_widths: tuple = (32, 16, 16)


@dataclass
class FeatureConfig:
    blocks: tuple = (5, 6, 7, 8, 12)
    timesteps: tuple = (50, 150, 250)
    noise_seed: int = 0


@dataclass
class TrainConfig:
    stage1_iters: int = 40000
    stage2_iters: int = 10000
    lr: float = 1e-3
    batch_size: int = 8
    source_per_batch: int = 4
    adv_weight: float = 1.0
    grl_coefficient: float = 1.0
    grl_ramp_frac: float = 0.1
    augment_stage1: bool = True
    augment_stage2: bool = False
    log_every: int = 25
    checkpoint_every: int = 1000
    torch_threads: int = 1


@dataclass
class AdaptConfig:
    gamma: float = 0.75
    eta: float = 0.05
    K: int = 8
    dropout_rate: float = 0.5
    lambda_pcl: float = 0.5
    pseudo_weight: float = 1.0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        if self.train.source_per_batch >= self.train.batch_size:
            raise ConfigError("batch must contain at least one target sample")

    @property
    def target_per_batch(self) -> int:
        return self.train.batch_size - self.train.source_per_batch


_SECTIONS = ("data", "diffusion", "arch", "features", "train", "adapt")
_TUPLE_FIELDS = {"blocks", "timesteps", "seg_widths"}


def desk_config(**overrides) -> RunConfig:
    """Desk-scale profile: 64x64 images, short schedules, small batch."""
    cfg = RunConfig()
    cfg.data.resolution = 64
    cfg.train.stage1_iters = 2000
    cfg.train.stage2_iters = 1000
    cfg.train.batch_size = 4
    cfg.train.source_per_batch = 2
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def apply_paper_scale(cfg: RunConfig) -> RunConfig:
    """Restore the published full-scale protocol on top of a config."""
    cfg.data.resolution = 512
    cfg.arch.kind = "full"
    cfg.arch.unet_base_width = 32
    cfg.train.stage1_iters = 40000
    cfg.train.stage2_iters = 10000
    cfg.train.batch_size = 8
    cfg.train.source_per_batch = 4
    return cfg


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse_value(raw: str, kind, name: str):
    raw = raw.strip()
    try:
        if name in _TUPLE_FIELDS:
            return tuple(int(v) if v.strip().isdigit() else float(v) for v in raw.split(","))
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {name} from {raw!r}") from exc


def dump_config(cfg: RunConfig) -> str:
    """Canonical flat text form, stable for hashing and diffing."""
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    lines.append(f"run.seed = {cfg.seed}")
    lines.append(f"run.out_dir = {cfg.out_dir}")
    return "".join(f"{ln}\n" for ln in sorted(lines))


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    section_fields = {
        section: {f.name: f.type for f in fields(getattr(cfg, section))}
        for section in _SECTIONS
    }
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key == "run.seed":
            cfg.seed = _parse_value(raw, int, "seed")
            continue
        if key == "run.out_dir":
            cfg.out_dir = raw.strip()
            continue
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} lacks a section")
        section, _, name = key.partition(".")
        if section not in section_fields or name not in section_fields[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        obj = getattr(cfg, section)
        current = getattr(obj, name)
        kind = type(current)
        setattr(obj, name, _parse_value(raw, kind, name))
    if cfg.train.source_per_batch >= cfg.train.batch_size:
        raise ConfigError("batch must contain at least one target sample")
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = open(path).read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base=base)


# keys that do not change what the weights mean: seeds, paths, budgets and
# operational cadence are free to differ between a checkpoint and its reader
_HASH_EXEMPT = (
    "run.", "data.root", "train.stage1_iters", "train.stage2_iters",
    "train.log_every", "train.checkpoint_every", "train.torch_threads",
)


def config_hash(cfg: RunConfig) -> str:
    """Hash of everything that affects trained weights and features."""
    lines = [ln for ln in dump_config(cfg).splitlines()
             if not ln.startswith(_HASH_EXEMPT)]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]
