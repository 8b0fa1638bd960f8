"""Stage-1 (diffusion + alignment) and Stage-2 (segmentor + consistency)
training loops.

Every random draw comes from generators derived from (run seed, purpose
tag), so a run is an exact function of its config and seed. Stage 2 never
updates the denoiser; both trainers hash the weights they must not touch.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adaptation import (PCLConfig, compute_prototype, make_pseudo_label,
                         mc_uncertainty_batched, pcl_loss, refine_pseudo_label,
                         stage2_loss)
from .alignment import (DomainDiscriminator, discriminator_loss, grl_apply,
                        grl_ramp, stage1_loss)
from .augment import AugmentConfig, augment
from .checkpoint import load_checkpoint, save_checkpoint, state_dict_sha
from .config import RunConfig, config_hash
from .diffusion import DiffusionBatch, build_schedule, noise_loss
from .exceptions import CheckpointError, DataError
from .features import (FeatureSpec, extract_features, extract_features_batched,
                       feature_channels)
from .segmentor import Segmentor, seg_loss
from .unet import DenoiserUNet


def derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2 ** 63)


def torch_rng(seed: int, tag: str) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(derive_seed(seed, tag))
    return gen


def build_denoiser(cfg: RunConfig, seed: int) -> DenoiserUNet:
    torch.manual_seed(derive_seed(seed, "denoiser_init"))
    return DenoiserUNet(
        in_channels=3,
        base_width=cfg.arch.unet_base_width,
        levels=cfg.arch.unet_levels,
        blocks_per_level=cfg.arch.unet_blocks_per_level,
        time_dim=cfg.arch.time_dim,
    )


def build_discriminator(cfg: RunConfig, seed: int, in_channels: int) -> DomainDiscriminator:
    torch.manual_seed(derive_seed(seed, "discriminator_init"))
    return DomainDiscriminator(in_channels, width=cfg.arch.disc_width)


def build_segmentor(cfg: RunConfig, seed: int, in_channels: int) -> Segmentor:
    torch.manual_seed(derive_seed(seed, "segmentor_init"))
    return Segmentor(in_channels, widths=tuple(cfg.arch.seg_widths),
                     dropout_rate=cfg.adapt.dropout_rate)


def feature_spec_from(cfg: RunConfig) -> FeatureSpec:
    res = (cfg.data.resolution, cfg.data.resolution)
    return FeatureSpec(blocks=tuple(cfg.features.blocks),
                       timesteps=tuple(cfg.features.timesteps),
                       target_resolution=res,
                       noise_seed=cfg.features.noise_seed)


class RunLog:
    """Append-only structured-text training log."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._start = time.monotonic()
        self._fh = open(self.path, "a")

    def write(self, iteration: int, **components):
        parts = [f"iteration={iteration}"]
        parts += [f"{k}={float(v):.6f}" for k, v in components.items()]
        parts.append(f"wall={time.monotonic() - self._start:.3f}")
        self._fh.write(" ".join(parts) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def _to_batch_tensor(samples) -> torch.Tensor:
    """[0,1] float images -> stacked [-1,1] tensor."""
    arr = np.stack([s.image for s in samples]).astype(np.float32)
    return torch.from_numpy(arr) * 2.0 - 1.0


@dataclass
class Stage1Result:
    checkpoint_path: Path
    config_hash: str
    probe_losses: list = field(default_factory=list)  # (iteration, value)
    disc_init_sha: str = ""
    disc_final_sha: str = ""
    adversarial: bool = True


def train_stage1(cfg: RunConfig, source_train, target_train, *,
                 adversarial: bool, out_dir, run_name: str = "stage1",
                 resume_from=None) -> Stage1Result:
    """Alternating source/target diffusion training, optionally with the
    adversarial feature alignment term.

    ``resume_from`` restores weights, optimizer state and the iteration
    counter from an earlier checkpoint of the same config."""
    if not source_train or not target_train:
        raise DataError("stage 1 needs non-empty source and target training sets")
    torch.set_num_threads(cfg.train.torch_threads)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    seed = cfg.seed

    schedule = build_schedule(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    spec = feature_spec_from(cfg)
    denoiser = build_denoiser(cfg, seed)
    disc = build_discriminator(cfg, seed, feature_channels(denoiser, spec))
    disc_init_sha = state_dict_sha(disc.state_dict())

    params = list(denoiser.parameters())
    if adversarial:
        params += list(disc.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.train.lr)

    start_it = 0
    if resume_from is not None:
        states, manifest = load_checkpoint(resume_from, expected_config_hash=chash)
        denoiser.load_state_dict(states["denoiser"])
        disc.load_state_dict(states["discriminator"])
        if "optimizer" in states:
            optimizer.load_state_dict(states["optimizer"])
        start_it = int(manifest.get("iteration", 0))
        disc_init_sha = manifest.get("disc_init_sha", disc_init_sha)

    sampler = np.random.default_rng(derive_seed(seed, "stage1_sampler"))
    aug_rng = np.random.default_rng(derive_seed(seed, "stage1_augment"))
    g_noise = torch_rng(seed, "stage1_noise")
    g_feat = torch_rng(seed, "stage1_features")
    n_src, n_tgt = cfg.train.source_per_batch, cfg.target_per_batch
    aug_cfg = AugmentConfig()

    # fixed probe batch for the loss-decrease diagnostic
    probe_src = source_train[:min(n_src, len(source_train))]
    probe_tgt = target_train[:min(n_tgt, len(target_train))]
    probe_x0 = _to_batch_tensor(probe_src + probe_tgt)
    probe_tags = ["source"] * len(probe_src) + ["target"] * len(probe_tgt)

    def probe_loss() -> float:
        gen = torch_rng(seed, "stage1_probe")
        with torch.no_grad():
            value = noise_loss(denoiser, DiffusionBatch(probe_x0, probe_tags),
                               schedule, gen)
        return float(value)

    log = RunLog(out_dir / f"{run_name}.log")
    probes = [(start_it, probe_loss())]
    total = cfg.train.stage1_iters
    ckpt_path = out_dir / f"{run_name}.pt"

    def write_ckpt(iteration):
        save_checkpoint(
            ckpt_path,
            {"denoiser": denoiser.state_dict(), "discriminator": disc.state_dict(),
             "optimizer": optimizer.state_dict()},
            iteration=iteration, T=schedule.T,
            beta_start=cfg.diffusion.beta_start, beta_end=cfg.diffusion.beta_end,
            block_widths=[denoiser.block_width(i + 1)
                          for i in range(denoiser.num_decoder_blocks)],
            config_hash=chash,
            extra={"adversarial": adversarial, "disc_init_sha": disc_init_sha,
                   "seed": seed},
        )

    for it in range(start_it + 1, total + 1):
        src_idx = sampler.integers(0, len(source_train), size=n_src)
        tgt_idx = sampler.integers(0, len(target_train), size=n_tgt)
        src_clean = [source_train[i] for i in src_idx]
        src = src_clean
        if cfg.train.augment_stage1:
            src = [augment(s, aug_rng, aug_cfg) for s in src_clean]
        tgt = [target_train[i] for i in tgt_idx]
        x0 = _to_batch_tensor(src + tgt)
        batch = DiffusionBatch(x0, ["source"] * n_src + ["target"] * n_tgt)

        loss_noise = noise_loss(denoiser, batch, schedule, g_noise)
        if adversarial:
            # align features of the un-augmented images with fresh noise:
            # the downstream segmentor consumes clean-image features, and a
            # frozen noise draw would let D key on per-image noise patterns
            x_align = _to_batch_tensor(src_clean + tgt)
            feats = extract_features_batched(x_align, denoiser, schedule, spec,
                                             rng=g_feat)
            coef = grl_ramp(it, total, cfg.train.grl_ramp_frac, cfg.train.grl_coefficient)
            reversed_feats = grl_apply(feats, coef)
            d_src = disc(reversed_feats[:n_src])
            d_tgt = disc(reversed_feats[n_src:])
            loss_disc = discriminator_loss(d_src, d_tgt)
            loss = stage1_loss(loss_noise, loss_disc, cfg.train.adv_weight)
        else:
            loss_disc = torch.zeros(())
            loss = stage1_loss(loss_noise, loss_disc, 0.0)

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if it % cfg.train.log_every == 0 or it == total:
            log.write(it, noise=float(loss_noise.detach()),
                      adv=float(loss_disc.detach()))
        if it % cfg.train.checkpoint_every == 0 or it == total:
            probes.append((it, probe_loss()))
            write_ckpt(it)

    log.close()
    return Stage1Result(
        checkpoint_path=ckpt_path, config_hash=chash, probe_losses=probes,
        disc_init_sha=disc_init_sha, disc_final_sha=state_dict_sha(disc.state_dict()),
        adversarial=adversarial,
    )


@dataclass
class Stage2Result:
    checkpoint_path: Path
    config_hash: str
    denoiser_sha_before: str = ""
    denoiser_sha_after: str = ""
    loss_history: list = field(default_factory=list)  # (iteration, seg, pcl, pseudo)


def load_stage1_models(cfg: RunConfig, stage1_ckpt, *, allow_hash_mismatch=False):
    """Rebuild denoiser (+ discriminator) from a stage-1 checkpoint."""
    chash = config_hash(cfg)
    states, manifest = load_checkpoint(stage1_ckpt, expected_config_hash=chash,
                                       allow_hash_mismatch=allow_hash_mismatch)
    denoiser = build_denoiser(cfg, cfg.seed)
    try:
        denoiser.load_state_dict(states["denoiser"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"incompatible stage-1 checkpoint: {exc}") from exc
    spec = feature_spec_from(cfg)
    disc = build_discriminator(cfg, cfg.seed, feature_channels(denoiser, spec))
    if "discriminator" in states:
        disc.load_state_dict(states["discriminator"])
    return denoiser, disc, manifest


def _masked_bce(probs: torch.Tensor, target: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    """Mean BCE over kept pixels; zero when nothing is kept."""
    kept = keep.sum()
    if float(kept) == 0.0:
        return torch.zeros(())
    p = probs.clamp(1e-7, 1 - 1e-7)
    bce = -(target * torch.log(p) + (1 - target) * torch.log(1 - p))
    return (bce * keep).sum() / kept


def train_stage2(cfg: RunConfig, stage1_ckpt, source_train, target_train, *,
                 use_pcl: bool, use_pseudo: bool = False, out_dir,
                 run_name: str = "stage2",
                 allow_hash_mismatch: bool = False) -> Stage2Result:
    """Train the segmentor on frozen diffusion features.

    Source images contribute the supervised loss; target images contribute
    the prototype consistency term (use_pcl) or uncertainty-filtered
    pseudo-label supervision (use_pseudo)."""
    if any(s.label is None for s in source_train):
        raise DataError("stage 2 source training samples must be labeled")
    torch.set_num_threads(cfg.train.torch_threads)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    seed = cfg.seed

    schedule = build_schedule(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    spec = feature_spec_from(cfg)
    denoiser, _, _ = load_stage1_models(cfg, stage1_ckpt,
                                        allow_hash_mismatch=allow_hash_mismatch)
    denoiser.requires_grad_(False)
    sha_before = state_dict_sha(denoiser.state_dict())

    segmentor = build_segmentor(cfg, seed, feature_channels(denoiser, spec))
    optimizer = torch.optim.Adam(segmentor.parameters(), lr=cfg.train.lr)
    pcl_cfg = PCLConfig(gamma=cfg.adapt.gamma, eta=cfg.adapt.eta, K=cfg.adapt.K,
                        dropout_rate=cfg.adapt.dropout_rate,
                        lambda_pcl=cfg.adapt.lambda_pcl)

    # features are deterministic per image, so cache them unless stage-2
    # augmentation forces re-extraction of fresh crops
    cache: dict[str, torch.Tensor] = {}

    def features_of(samples) -> torch.Tensor:
        missing = [s for s in samples if s.id not in cache]
        with torch.no_grad():
            for s in missing:
                image = torch.from_numpy(s.image).float() * 2.0 - 1.0
                cache[s.id] = extract_features(image, denoiser, schedule, spec).values
        return torch.stack([cache[s.id] for s in samples])

    def features_fresh(samples) -> torch.Tensor:
        with torch.no_grad():
            return extract_features_batched(_to_batch_tensor(samples), denoiser,
                                            schedule, spec)

    sampler = np.random.default_rng(derive_seed(seed, "stage2_sampler"))
    aug_rng = np.random.default_rng(derive_seed(seed, "stage2_augment"))
    g_drop = torch_rng(seed, "stage2_dropout")
    g_mc = torch_rng(seed, "stage2_mc")
    aug_cfg = AugmentConfig()
    n_src, n_tgt = cfg.train.source_per_batch, cfg.target_per_batch

    log = RunLog(out_dir / f"{run_name}.log")
    history = []
    total = cfg.train.stage2_iters
    ckpt_path = out_dir / f"{run_name}.pt"

    for it in range(1, total + 1):
        src_idx = sampler.integers(0, len(source_train), size=n_src)
        tgt_idx = sampler.integers(0, len(target_train), size=n_tgt)
        src = [source_train[i] for i in src_idx]
        tgt = [target_train[i] for i in tgt_idx]
        if cfg.train.augment_stage2:
            src = [augment(s, aug_rng, aug_cfg) for s in src]
            f_src = features_fresh(src)
        else:
            f_src = features_of(src)
        f_tgt = features_of(tgt)

        probs_s, feat_s = segmentor(f_src, dropout_active=True, rng=g_drop)
        l_seg = sum(seg_loss(probs_s[i], src[i].label) for i in range(n_src)) / n_src

        l_pcl = torch.zeros(())
        l_pseudo = torch.zeros(())
        if use_pcl or use_pseudo:
            mean_probs, maps = mc_uncertainty_batched(segmentor, f_tgt, pcl_cfg.K, g_mc)
            refined = []
            for i in range(n_tgt):
                pseudo = make_pseudo_label(mean_probs[i], pcl_cfg.gamma)
                refined.append(refine_pseudo_label(pseudo, maps[i], pcl_cfg.eta))
            probs_t, feat_t = segmentor(f_tgt, dropout_active=True, rng=g_drop)
            if use_pcl:
                terms = []
                for cls, attr in enumerate(("disc", "cup")):
                    src_mask = np.stack([getattr(s.label, attr) for s in src])
                    tgt_mask = np.stack([getattr(r, attr) for r in refined])
                    if src_mask.sum() == 0 or tgt_mask.sum() == 0:
                        continue  # prototype undefined; class skipped this batch
                    z_s = compute_prototype(feat_s, src_mask)
                    z_t = compute_prototype(feat_t, tgt_mask)
                    terms.append(pcl_loss(z_s, z_t))
                if terms:
                    l_pcl = sum(terms)
            if use_pseudo:
                target_stack = torch.stack([
                    torch.as_tensor(np.stack([r.disc, r.cup]).astype(np.float32))
                    for r in refined
                ])
                keep = torch.stack([
                    torch.as_tensor((m.m < pcl_cfg.eta).astype(np.float32))
                    for m in maps
                ])
                l_pseudo = _masked_bce(probs_t, target_stack, keep)

        loss = stage2_loss(l_seg, l_pcl, pcl_cfg.lambda_pcl if use_pcl else 0.0)
        loss = loss + (cfg.adapt.pseudo_weight * l_pseudo if use_pseudo else 0.0)

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if it % cfg.train.log_every == 0 or it == total:
            vals = (float(l_seg.detach()), float(l_pcl.detach()),
                    float(l_pseudo.detach()))
            log.write(it, seg=vals[0], pcl=vals[1], pseudo=vals[2])
            history.append((it, *vals))

    sha_after = state_dict_sha(denoiser.state_dict())
    save_checkpoint(
        ckpt_path,
        {"segmentor": segmentor.state_dict()},
        iteration=total, T=schedule.T,
        beta_start=cfg.diffusion.beta_start, beta_end=cfg.diffusion.beta_end,
        block_widths=[denoiser.block_width(i + 1)
                      for i in range(denoiser.num_decoder_blocks)],
        config_hash=chash,
        extra={"stage1_checkpoint": str(stage1_ckpt),
               "denoiser_sha": sha_after, "seed": seed,
               "use_pcl": use_pcl, "use_pseudo": use_pseudo},
    )
    log.close()
    return Stage2Result(
        checkpoint_path=ckpt_path, config_hash=chash,
        denoiser_sha_before=sha_before, denoiser_sha_after=sha_after,
        loss_history=history,
    )


def load_segmentor(cfg: RunConfig, stage2_ckpt, denoiser,
                   allow_hash_mismatch: bool = False) -> Segmentor:
    chash = config_hash(cfg)
    states, _ = load_checkpoint(stage2_ckpt, expected_config_hash=chash,
                                allow_hash_mismatch=allow_hash_mismatch)
    spec = feature_spec_from(cfg)
    segmentor = build_segmentor(cfg, cfg.seed, feature_channels(denoiser, spec))
    try:
        segmentor.load_state_dict(states["segmentor"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"incompatible stage-2 checkpoint: {exc}") from exc
    return segmentor
