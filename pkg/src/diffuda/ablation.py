"""Ablation grid over the pipeline's components and the synthetic benchmark
driver.

Variants: M1 trains the diffusion stage without alignment and the segmentor
without any target-side term; M2 adds adversarial alignment; M3 adds
uncertainty-filtered pseudo-label supervision on top of M2; M4 adds the
prototype consistency loss instead. Per seed, M2-M4 share one aligned
stage-1 checkpoint so stage-2 differences are isolated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, config_hash
from .dataio import filter_split, load_dataset, read_split, write_dataset, write_splits
from .evaluation import EvalReport, evaluate, render_table, write_report_sidecar
from .exceptions import ConfigError, DataError
from .features import FeatureSpec
from .synth import DomainShift, SynthConfig, generate_synthetic
from .training import (Stage1Result, Stage2Result, build_denoiser,
                       feature_spec_from, load_segmentor, train_stage1,
                       train_stage2)
from .diffusion import build_schedule


@dataclass(frozen=True)
class AblationVariant:
    name: str
    adversarial_alignment: bool
    pseudo_label_supervision: bool
    pcl: bool


VARIANTS = {
    "M1": AblationVariant("M1", False, False, False),
    "M2": AblationVariant("M2", True, False, False),
    "M3": AblationVariant("M3", True, True, False),
    "M4": AblationVariant("M4", True, False, True),
}


def variant(name: str) -> AblationVariant:
    if name not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {name!r} (use M1..M4)")
    return VARIANTS[name]


def synthesize_benchmark(cfg: RunConfig, root=None) -> Path:
    """Generate and write the two-domain synthetic dataset and its splits."""
    root = Path(root if root is not None else cfg.data.root)
    d = cfg.data
    res = (d.resolution, d.resolution)
    source_cfg = SynthConfig(count=d.source_train + d.source_test, resolution=res,
                             shift=DomainShift.identity(), domain="source",
                             seed=d.synth_seed)
    target_shift = DomainShift(
        brightness_delta=d.target_brightness, contrast_gain=d.target_contrast,
        blur_sigma=d.target_blur, noise_std=d.target_noise, hue_shift=d.target_hue,
    )
    target_cfg = SynthConfig(count=d.target_train + d.target_test, resolution=res,
                             shift=target_shift, domain="target",
                             seed=d.synth_seed + 1)
    source = generate_synthetic(source_cfg)
    target = generate_synthetic(target_cfg)
    for domain in ("source", "target"):
        (root / domain / "images").mkdir(parents=True, exist_ok=True)
        (root / domain / "masks").mkdir(parents=True, exist_ok=True)
    write_dataset(root, source + target)
    train_ids = [s.id for s in source[:d.source_train]] + \
                [s.id for s in target[:d.target_train]]
    test_ids = [s.id for s in source[d.source_train:]] + \
               [s.id for s in target[d.target_train:]]
    write_splits(root, train_ids, test_ids)
    return root


@dataclass
class DomainSplits:
    source_train: list
    source_test: list
    target_train: list
    target_test: list


def load_benchmark(root) -> DomainSplits:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    train_ids = read_split(root, "train")
    test_ids = read_split(root, "test")
    source = load_dataset(root / "source", "source")
    target = load_dataset(root / "target", "target")
    return DomainSplits(
        source_train=filter_split(source, train_ids),
        source_test=filter_split(source, test_ids),
        target_train=filter_split(target, train_ids),
        target_test=filter_split(target, test_ids),
    )


@dataclass
class VariantRun:
    variant: AblationVariant
    seed: int
    stage1: Stage1Result
    stage2: Stage2Result
    target_report: EvalReport
    source_train_report: EvalReport


@dataclass
class AblationResult:
    runs: list = field(default_factory=list)  # VariantRun
    out_dir: Path = Path(".")

    def mean_dice(self, name: str):
        discs = [r.target_report.dice_disc for r in self.runs if r.variant.name == name]
        cups = [r.target_report.dice_cup for r in self.runs if r.variant.name == name]
        if not discs:
            raise KeyError(f"no runs for variant {name}")
        return float(np.mean(discs)), float(np.mean(cups))

    def per_seed_dice(self, name: str):
        return [(r.seed, r.target_report.dice_disc, r.target_report.dice_cup)
                for r in self.runs if r.variant.name == name]


def run_ablation(cfg: RunConfig, seeds, variant_names=("M1", "M2", "M3", "M4"),
                 out_dir=None, datasets: DomainSplits | None = None) -> AblationResult:
    """Train and evaluate the requested variants for each seed.

    Stage-1 checkpoints are shared within a seed: one unaligned run feeds
    M1, one aligned run feeds every other variant."""
    variants = [variant(n) for n in variant_names]
    out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if datasets is None:
        datasets = load_benchmark(cfg.data.root)
    if not datasets.target_test:
        raise DataError("empty target test split")

    result = AblationResult(out_dir=out_dir)
    for seed in seeds:
        run_cfg = replace(cfg)  # shallow copy is fine; sections are reassigned below
        run_cfg.seed = int(seed)
        seed_dir = out_dir / f"seed{seed}"
        stage1_runs = {}
        need_flags = {v.adversarial_alignment for v in variants}
        for adversarial in sorted(need_flags):
            tag = "aligned" if adversarial else "unaligned"
            stage1_runs[adversarial] = train_stage1(
                run_cfg, datasets.source_train, datasets.target_train,
                adversarial=adversarial, out_dir=seed_dir,
                run_name=f"stage1_{tag}",
            )
        for v in variants:
            s1 = stage1_runs[v.adversarial_alignment]
            s2 = train_stage2(
                run_cfg, s1.checkpoint_path, datasets.source_train,
                datasets.target_train, use_pcl=v.pcl,
                use_pseudo=v.pseudo_label_supervision,
                out_dir=seed_dir, run_name=f"stage2_{v.name}",
            )
            denoiser = build_denoiser(run_cfg, run_cfg.seed)
            states, _ = load_checkpoint(s1.checkpoint_path,
                                        expected_config_hash=config_hash(run_cfg))
            denoiser.load_state_dict(states["denoiser"])
            segmentor = load_segmentor(run_cfg, s2.checkpoint_path, denoiser)
            schedule = build_schedule(run_cfg.diffusion.T, run_cfg.diffusion.beta_start,
                                      run_cfg.diffusion.beta_end)
            spec = feature_spec_from(run_cfg)
            target_report = evaluate(segmentor, denoiser, schedule, spec,
                                     datasets.target_test,
                                     config_hash=config_hash(run_cfg))
            source_report = evaluate(segmentor, denoiser, schedule, spec,
                                     datasets.source_train[:20],
                                     config_hash=config_hash(run_cfg))
            result.runs.append(VariantRun(
                variant=v, seed=int(seed), stage1=s1, stage2=s2,
                target_report=target_report, source_train_report=source_report,
            ))

    reports = [(name, _mean_report(result, name)) for name in variant_names]
    table = render_table(reports)
    (out_dir / "ablation_table.txt").write_text(table)
    write_report_sidecar(out_dir / "ablation_table.values", reports)
    return result


def _mean_report(result: AblationResult, name: str) -> EvalReport:
    runs = [r for r in result.runs if r.variant.name == name]
    disc, cup = result.mean_dice(name)
    per_sample = [(f"seed{r.seed}", r.target_report.dice_disc, r.target_report.dice_cup)
                  for r in runs]
    return EvalReport(dice_disc=disc, dice_cup=cup, per_sample=per_sample,
                      n=sum(r.target_report.n for r in runs),
                      config_hash=runs[0].target_report.config_hash if runs else "")
