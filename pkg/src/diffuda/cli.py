"""Command line entry points.

Verbs: synth, train-stage1, train-stage2, evaluate, ablate. Exit codes:
0 success, 2 config error, 3 data error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .ablation import (load_benchmark, run_ablation, synthesize_benchmark,
                       variant)
from .config import (RunConfig, apply_paper_scale, config_hash, desk_config,
                     dump_config, load_config)
from .evaluation import evaluate, render_table, write_report_sidecar
from .exceptions import CheckpointError, ConfigError, DataError
from .features import feature_channels
from .diffusion import build_schedule
from .training import (build_denoiser, feature_spec_from, load_segmentor,
                       load_stage1_models, train_stage1, train_stage2)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4


def _build_config(args) -> RunConfig:
    cfg = desk_config()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if getattr(args, "paper_scale", False):
        cfg = apply_paper_scale(cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = str(args.out)
    if getattr(args, "dump_effective_config", False):
        print(dump_config(cfg), end="")
    return cfg


def _add_common(p, out_default="runs"):
    p.add_argument("--config", type=str, default=None, help="flat text config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None, help=f"output dir (default {out_default})")
    p.add_argument("--paper-scale", action="store_true",
                   help="restore the full-scale published protocol")
    p.add_argument("--dump-effective-config", action="store_true")


def cmd_synth(args) -> int:
    cfg = _build_config(args)
    root = synthesize_benchmark(cfg, root=args.out or cfg.data.root)
    splits = load_benchmark(root)
    counts = {
        "source train": len(splits.source_train),
        "source test": len(splits.source_test),
        "target train": len(splits.target_train),
        "target test": len(splits.target_test),
    }
    for name, n in counts.items():
        print(f"{name}: {n} images")
    if sum(counts.values()) == 0:
        print("warning: generated an empty dataset")
    print(f"dataset written to {root}")
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    cfg = _build_config(args)
    datasets = load_benchmark(cfg.data.root)
    result = train_stage1(cfg, datasets.source_train, datasets.target_train,
                          adversarial=not args.no_adversarial,
                          out_dir=cfg.out_dir, resume_from=args.resume)
    print(f"stage-1 checkpoint: {result.checkpoint_path}")
    print(f"probe noise loss: start {result.probe_losses[0][1]:.4f} "
          f"end {result.probe_losses[-1][1]:.4f}")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    cfg = _build_config(args)
    datasets = load_benchmark(cfg.data.root)
    v = variant(args.variant)
    result = train_stage2(cfg, args.stage1_checkpoint,
                          datasets.source_train, datasets.target_train,
                          use_pcl=v.pcl, use_pseudo=v.pseudo_label_supervision,
                          out_dir=cfg.out_dir, run_name=f"stage2_{v.name}",
                          allow_hash_mismatch=args.allow_hash_mismatch)
    print(f"stage-2 checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _build_config(args)
    datasets = load_benchmark(cfg.data.root)
    split = {"target-test": datasets.target_test,
             "source-test": datasets.source_test}[args.split]
    denoiser, _, _ = load_stage1_models(cfg, args.stage1_checkpoint,
                                        allow_hash_mismatch=args.allow_hash_mismatch)
    segmentor = load_segmentor(cfg, args.stage2_checkpoint, denoiser,
                               allow_hash_mismatch=args.allow_hash_mismatch)
    schedule = build_schedule(cfg.diffusion.T, cfg.diffusion.beta_start,
                              cfg.diffusion.beta_end)
    spec = feature_spec_from(cfg)
    report = evaluate(segmentor, denoiser, schedule, spec, split,
                      config_hash=config_hash(cfg),
                      predictions_dir=args.dump_predictions)
    table = render_table([(args.split, report)])
    print(table, end="")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(table)
    write_report_sidecar(out / "report.values", [(args.split, report)])
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    names = tuple(args.variants.split(",")) if args.variants else ("M1", "M2", "M3", "M4")
    result = run_ablation(cfg, seeds, variant_names=names, out_dir=cfg.out_dir)
    print((result.out_dir / "ablation_table.txt").read_text(), end="")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffuda",
        description="Two-stage domain adaptive segmentation on diffusion features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic two-domain benchmark")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-stage1", help="train diffusion (+ alignment)")
    _add_common(p)
    p.add_argument("--no-adversarial", action="store_true")
    p.add_argument("--resume", type=str, default=None,
                   help="stage-1 checkpoint to continue from")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the segmentor on frozen features")
    _add_common(p)
    p.add_argument("--stage1-checkpoint", required=True)
    p.add_argument("--variant", default="M4", help="M1|M2|M3|M4")
    p.add_argument("--allow-hash-mismatch", action="store_true")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("evaluate", help="evaluate checkpoints on a split")
    _add_common(p)
    p.add_argument("--stage1-checkpoint", required=True)
    p.add_argument("--stage2-checkpoint", required=True)
    p.add_argument("--split", default="target-test",
                   choices=["target-test", "source-test"])
    p.add_argument("--dump-predictions", type=str, default=None)
    p.add_argument("--allow-hash-mismatch", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the M1..M4 ablation grid")
    _add_common(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", default=None, help="comma list, default all")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
