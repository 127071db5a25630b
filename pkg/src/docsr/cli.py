"""Command-line pipeline driver.

Subcommands cover the full experimental loop on one config file:
``gen-data`` renders a synthetic corpus, ``train`` runs the parallel phase,
``finetune`` runs the penetrating fine-tuning phase, ``sr`` magnifies single
images, ``eval`` produces metric reports, and ``bench`` measures inference
throughput (report-only).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import torch

from .cascade import (assemble_cascade, load_checkpoint, save_checkpoint,
                      super_resolve)
from .config import RunConfig
from .data import (DatasetManifest, bicubic_upsample, generate_synthetic_corpus,
                   load_image, load_patch_pairs, save_image, upsample_by)
from .losses import make_edge_network, make_feature_extractor
from .metrics import (EvalItem, MetricReport, TesseractOcr, evaluate_method,
                      evaluate_sr, summary_table)
from .training import TrainingLog, finetune_cascade, train_parallel

DEVICE_ENV = "DOCSR_DEVICE"


def _apply_runtime(cfg: RunConfig) -> str:
    torch.set_num_threads(cfg.threads)
    return os.environ.get(DEVICE_ENV, cfg.device)


def _resolve_manifest_path(cfg: RunConfig) -> Path:
    if cfg.data.manifest:
        return Path(cfg.data.manifest)
    return Path(cfg.output_dir) / "data" / "manifest.jsonl"


def _loss_networks(cfg: RunConfig):
    fx = en = None
    if cfg.loss.lambda_perceptual > 0:
        fx = make_feature_extractor(
            cfg.loss.feature_extractor, cfg.model.image_channels, cfg.loss.vgg19_weights
        )
    if cfg.loss.lambda_edge > 0:
        en = make_edge_network(cfg.loss.edge_network, cfg.loss.hed_weights)
    return fx, en


def cmd_gen_data(args) -> int:
    cfg = RunConfig.from_file(args.config)
    _apply_runtime(cfg)
    out = Path(cfg.output_dir)
    data_dir = out / "data"
    manifest = generate_synthetic_corpus(
        data_dir,
        count=cfg.data.synthetic.count,
        canvas=cfg.data.synthetic.canvas,
        seed=cfg.data.synthetic.seed,
        fractions=cfg.data.fractions(),
        pyramid_depth=cfg.model.stages,
    )
    cfg.save(out / "config.resolved.json")
    counts = {role: len(manifest.role_entries(role)) for role in ("train", "val", "test")}
    print(f"generated {len(manifest.entries)} patches in {data_dir} (splits: {counts})")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    device = _apply_runtime(cfg)
    manifest = DatasetManifest.load(_resolve_manifest_path(cfg))
    train_pairs = load_patch_pairs(manifest, "train", levels=cfg.model.stages)
    val_pairs = load_patch_pairs(manifest, "val", levels=cfg.model.stages)
    fx, en = _loss_networks(cfg)
    out = Path(cfg.output_dir)
    train_dir = out / "train"
    train_dir.mkdir(parents=True, exist_ok=True)
    log = TrainingLog()
    nets = train_parallel(
        train_pairs,
        [cfg.model.dpnet_config()] * cfg.model.stages,
        cfg.training,
        cfg.loss.loss_weights(),
        feature_extractor=fx,
        edge_network=en,
        edge_threshold=cfg.loss.edge_threshold,
        val_dataset=val_pairs or None,
        log=log,
        checkpoint_dir=train_dir,
        device=device,
    )
    cascade = assemble_cascade(
        nets, metadata={"phases": ["parallel"], "seed": cfg.training.seed}
    )
    ckpt = train_dir / "cascade_parallel.ckpt"
    save_checkpoint(cascade, ckpt)
    log.save(train_dir / "training_log.jsonl")
    cfg.save(out / "config.resolved.json")
    print(f"trained {len(nets)} stage(s); checkpoint: {ckpt}")
    return 0


def cmd_finetune(args) -> int:
    cfg = RunConfig.from_file(args.config)
    device = _apply_runtime(cfg)
    out = Path(cfg.output_dir)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "train" / "cascade_parallel.ckpt"
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path} (run `docsr train` first)")
    cascade = load_checkpoint(ckpt_path)
    manifest = DatasetManifest.load(_resolve_manifest_path(cfg))
    train_pairs = load_patch_pairs(manifest, "train", levels=len(cascade.stages))
    val_pairs = load_patch_pairs(manifest, "val", levels=len(cascade.stages))
    fx, en = _loss_networks(cfg)
    ft_dir = out / "finetune"
    ft_dir.mkdir(parents=True, exist_ok=True)
    log = TrainingLog()
    finetune_cascade(
        cascade,
        train_pairs,
        cfg.training,
        cfg.loss.loss_weights(),
        feature_extractor=fx,
        edge_network=en,
        edge_threshold=cfg.loss.edge_threshold,
        val_dataset=val_pairs or None,
        log=log,
        device=device,
    )
    ckpt = ft_dir / "cascade_finetuned.ckpt"
    save_checkpoint(cascade, ckpt)
    log.save(ft_dir / "training_log.jsonl")
    cfg.save(out / "config.resolved.json")
    print(f"fine-tuned cascade; checkpoint: {ckpt}")
    return 0


def cmd_sr(args) -> int:
    torch.set_num_threads(args.threads)
    cascade = load_checkpoint(args.checkpoint)
    img = load_image(args.input)
    sr = super_resolve(cascade, img, args.stages)
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(sr, out_path)
    stages = len(cascade.stages) if args.stages is None else args.stages
    meta = {
        "input": str(args.input),
        "checkpoint": str(args.checkpoint),
        "stages": stages,
        "magnification": 2**stages,
        "input_shape": list(img.shape),
        "output_shape": list(sr.shape),
    }
    with open(str(out_path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    print(f"wrote {out_path} ({img.shape[-1]}x{img.shape[-2]} -> {sr.shape[-1]}x{sr.shape[-2]})")
    return 0


def _method_slug(label: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in label.lower()).strip("_")


def build_baseline_reports(cascade, items, dataset_id: str, ocr=None) -> List[MetricReport]:
    """Bicubic baseline plus, for 2-stage cascades, the hybrid ablation rows."""
    mag = cascade.magnification
    reports = [
        evaluate_method(
            lambda lr: upsample_by(lr, mag), mag, items,
            method_label=f"Bicubic ({mag}x)", dataset_id=dataset_id, ocr=ocr,
        )
    ]
    if len(cascade.stages) == 2:
        first = assemble_cascade([cascade.stages[0]])
        second = assemble_cascade([cascade.stages[1]])
        reports.append(
            evaluate_method(
                lambda lr: super_resolve(second, bicubic_upsample(lr)),
                mag, items,
                method_label="Bicubic (2x) + DPNet (2x)", dataset_id=dataset_id, ocr=ocr,
            )
        )
        reports.append(
            evaluate_method(
                lambda lr: bicubic_upsample(super_resolve(first, lr)),
                mag, items,
                method_label="DPNet (2x) + Bicubic (2x)", dataset_id=dataset_id, ocr=ocr,
            )
        )
    return reports


def cmd_eval(args) -> int:
    cfg = RunConfig.from_file(args.config)
    _apply_runtime(cfg)
    out = Path(cfg.output_dir)
    if args.checkpoint:
        ckpt_path = Path(args.checkpoint)
    else:
        ckpt_path = out / "finetune" / "cascade_finetuned.ckpt"
        if not ckpt_path.exists():
            ckpt_path = out / "train" / "cascade_parallel.ckpt"
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    cascade = load_checkpoint(ckpt_path)
    for net in cascade.stages:
        net.eval()
    manifest = DatasetManifest.load(_resolve_manifest_path(cfg))
    dataset_id = manifest.dataset_id()
    items = [
        EvalItem(item_id=e.path, hr=load_image(manifest.resolve(e)), label=e.label)
        for e in manifest.role_entries("test")
    ]
    ocr = TesseractOcr() if args.ocr else None
    reports: List[MetricReport] = []
    if args.baselines:
        reports.extend(build_baseline_reports(cascade, items, dataset_id, ocr))
    reports.append(evaluate_sr(cascade, items, ocr=ocr, dataset_id=dataset_id))
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        rep.save_items(eval_dir / f"report_{_method_slug(rep.method)}.jsonl")
    table = summary_table(reports)
    (eval_dir / "summary.txt").write_text(table + "\n", encoding="utf-8")
    with open(eval_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2)
    cfg.save(out / "config.resolved.json")
    print(table)
    return 0


def cmd_bench(args) -> int:
    torch.set_num_threads(args.threads)
    cascade = load_checkpoint(args.checkpoint)
    gen = torch.Generator().manual_seed(0)
    img = torch.rand((cascade.image_channels, args.size, args.size), generator=gen)
    for _ in range(2):
        super_resolve(cascade, img)
    t0 = time.perf_counter()
    for _ in range(args.repeats):
        super_resolve(cascade, img)
    elapsed = time.perf_counter() - t0
    fps = args.repeats / elapsed
    try:
        import resource
        peak_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
        mem_line = f"peak RSS {peak_mb:.0f} MiB"
    except ImportError:
        mem_line = "peak RSS unavailable on this platform"
    print(
        f"bench: {args.size}x{args.size} input, {cascade.magnification}x magnification, "
        f"{args.repeats} runs: {fps:.2f} FPS ({1000.0 / fps:.1f} ms/image), {mem_line}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docsr",
        description="Document-image super-resolution with cascaded 2x generator networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic training corpus")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="parallel per-stage training")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="penetrating fine-tuning of a trained cascade")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", help="cascade checkpoint (default: <output_dir>/train/cascade_parallel.ckpt)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sr", help="super-resolve one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="input PNG")
    p.add_argument("--output", required=True, help="output PNG path")
    p.add_argument("--stages", type=int, default=None, help="stages to apply (default: all)")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("eval", help="metric report on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", help="cascade checkpoint (default: finetuned, then parallel)")
    p.add_argument("--ocr", action="store_true", help="also run OCR and score S_LCS / S_LD")
    p.add_argument("--baselines", action="store_true",
                   help="include bicubic and hybrid-cascade baseline rows")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="inference throughput report (informational)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--size", type=int, default=128, help="square input size")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
