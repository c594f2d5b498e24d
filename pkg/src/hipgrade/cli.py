"""Command-line entry points for the grading pipeline.

Subcommands: phantom-gen, drr, train, predict, evaluate, ablate,
stats-grid, embed.  Every command accepts --seed, --config and
--out-dir.  Data goes to files under --out-dir; logs go to stderr.
Failures exit 1 with a single machine-readable JSON error line on
stderr; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import experiments
from .drr import render_drr, save_drr, load_drr, augment, AugmentationParams
from .grading import BackboneSpec, default_head_spec, load_checkpoint
from .labels import GradeLabel, ManifestRow, load_manifest, write_manifest
from .stats import significance_grid, grid_to_csv, render_grid
from .uncertainty import make_prediction_record, mc_sample, write_prediction_records
from .volume import (detect_fhc_phantom, generate_phantom, load_landmarks,
                     load_volume, save_landmarks, save_volume, spec_for_class)
from .utils import atomic_write_text, child_seeds

__all__ = ["main", "build_parser"]

_TASKS = {"cls": "classification", "reg": "regression"}


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _parse_classes(text: str) -> list[int]:
    """Parse class selections like "1-7" or "1,3,5"."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out or any(c < 1 or c > 7 for c in out):
        raise ValueError(f"classes must lie in 1..7, got {text!r}")
    return sorted(set(out))


def _load_base_config(args) -> experiments.ExperimentConfig | None:
    if getattr(args, "config", None):
        return experiments.load_config(args.config)
    return None


def _build_config(args) -> experiments.ExperimentConfig:
    """Experiment config from --config with CLI flag overrides."""
    cfg = _load_base_config(args)
    task = _TASKS[args.task] if getattr(args, "task", None) else None
    scheme = getattr(args, "setting", None)
    backbone_name = getattr(args, "backbone", None)
    if cfg is None:
        backbone_name = backbone_name or "small_cnn"
        task = task or "classification"
        scheme = scheme or "combined"
        cfg = experiments.ExperimentConfig(
            backbone=BackboneSpec(name=backbone_name,
                                  pretrained=bool(getattr(args, "pretrained", False)),
                                  dropout_rate=0.2),
            head=default_head_spec(task, scheme, backbone_name),
        )
    else:
        if backbone_name and backbone_name != cfg.backbone.name:
            cfg = replace(cfg, backbone=replace(cfg.backbone, name=backbone_name))
        if task or scheme:
            head = default_head_spec(task or cfg.head.task,
                                     scheme or cfg.head.scheme,
                                     cfg.backbone.name)
            cfg = replace(cfg, head=head)
    overrides = {}
    for flag, key in (("epochs", "epochs"), ("base_lr", "base_lr"),
                      ("batch_size", "batch_size"), ("folds", "folds"),
                      ("repeats", "repeats"), ("mc_samples", "mc_samples")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "dropout", None) is not None:
        cfg = replace(cfg, backbone=replace(cfg.backbone, dropout_rate=args.dropout))
    if getattr(args, "alpha", None) is not None:
        cfg = replace(cfg, head=replace(cfg.head, alpha=args.alpha))
    if getattr(args, "no_augment", False):
        cfg = replace(cfg, augmentation=replace(cfg.augmentation, enabled=False))
    return replace(cfg, **overrides) if overrides else cfg


def cmd_phantom_gen(args) -> None:
    classes = _parse_classes(args.classes)
    out_dir = Path(args.out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    seeds = child_seeds(args.seed, len(classes) * args.per_class)
    rows = []
    idx = 0
    for cls in classes:
        for _ in range(args.per_class):
            pid = f"p{idx:04d}"
            spec = spec_for_class(cls, seed=seeds[idx], noise_sd=args.noise_sd)
            volume, label, landmarks = generate_phantom(spec)
            vol_path = vol_dir / f"{pid}.{args.format}"
            save_volume(volume, vol_path)
            save_landmarks(landmarks, pid, vol_path.with_suffix(".landmarks.json"))
            rows.append(ManifestRow(patient_id=pid, side="right",
                                    image_path=str(vol_path), crowe=label.crowe,
                                    kl=label.kl, combined_class=label.combined))
            idx += 1
    write_manifest(rows, out_dir / "manifest.csv")
    _log(f"phantom-gen: wrote {len(rows)} volumes for classes {classes} "
         f"under {out_dir}")


def cmd_drr(args) -> None:
    rows = load_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    out_rows = []
    for row in rows:
        volume = load_volume(row.image_path)
        lm_path = Path(row.image_path).with_suffix(".landmarks.json")
        if lm_path.exists():
            _, landmarks = load_landmarks(lm_path)
        else:
            landmarks = detect_fhc_phantom(volume)
        fhc = landmarks.left_fhc if row.side == "left" else landmarks.right_fhc
        image = render_drr(volume, fhc, side=row.side, patient_id=row.patient_id,
                           source=row.image_path)
        label = GradeLabel(row.crowe, row.kl, row.combined_class)
        png_path = img_dir / f"{row.patient_id}_{row.side}.png"
        save_drr(image, png_path, label)
        out_rows.append(replace(row, image_path=str(png_path)))
    write_manifest(out_rows, out_dir / "drr_manifest.csv")
    _log(f"drr: rendered {len(out_rows)} projections under {img_dir}")


def cmd_train(args) -> None:
    rows = load_manifest(args.manifest)
    cfg = _build_config(args)
    run_dir = Path(args.out_dir) / cfg.hash
    experiments.save_config(cfg, run_dir / "config.json")
    report = experiments.run_cv(cfg, rows, out_dir=run_dir,
                                with_uncertainty=args.with_uncertainty,
                                save_checkpoints=not args.no_checkpoints,
                                progress=_log if args.verbose else None)
    agg = report.aggregate()
    brief = ", ".join(f"{k}={v['mean']:.3f}±{v['sd']:.3f}"
                      for k, v in sorted(agg.items()) if k in ("eca", "onca", "se"))
    _log(f"train: {len(report.entries)} fold runs -> {run_dir} ({brief})")


def cmd_predict(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    image, _ = load_drr(args.image)
    params = AugmentationParams(enabled=False)
    tensor = augment(image, params, np.random.default_rng(0))
    sample_set = mc_sample(model, tensor, t=args.mc_samples, seed=args.seed)
    record = make_prediction_record(str(args.image), sample_set, model.head_spec)
    line = json.dumps(asdict(record))
    if args.out_dir is not None:
        write_prediction_records([record], Path(args.out_dir) / "prediction.jsonl")
    print(line)


def cmd_evaluate(args) -> None:
    rows = load_manifest(args.manifest)
    report = experiments.evaluate_external(args.checkpoint, rows,
                                          mc_samples=args.mc_samples,
                                          seed=args.seed, out_dir=args.out_dir)
    _log(f"evaluate: n={report['n']} single eca={report['single_sample']['eca']:.3f} "
         f"mc eca={report['mc']['eca']:.3f} -> {args.out_dir}")


def cmd_ablate(args) -> None:
    rows = load_manifest(args.manifest)
    cfg = _build_config(args)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    table = experiments.ablate(cfg, args.param, values, rows, out_dir=args.out_dir,
                               progress=_log if args.verbose else None)
    _log(f"ablate: {len(table)} settings of {args.param} -> {args.out_dir}")


def _vectors_from_inputs(paths: list[str], metric: str) -> dict[str, np.ndarray]:
    vectors: dict[str, np.ndarray] = {}
    for path in paths:
        payload = json.loads(Path(path).read_text())
        if "entries" in payload:
            entries = payload["entries"]
            repeats = sorted({e["repeat"] for e in entries})
            vec = [np.mean([e["metrics"][metric] for e in entries if e["repeat"] == r])
                   for r in repeats]
            vectors[Path(path).parent.name or Path(path).stem] = np.asarray(vec)
        else:
            for name, values in payload.items():
                vectors[name] = np.asarray(values, dtype=float)
    return vectors


def cmd_stats_grid(args) -> None:
    vectors = _vectors_from_inputs(args.inputs, args.metric)
    grid = significance_grid(vectors, paired=not args.unpaired,
                             base_alpha=args.alpha)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid_to_csv(grid, out_dir / "grid.csv")
    rendered = render_grid(grid)
    atomic_write_text(out_dir / "grid.txt", rendered + "\n")
    print(rendered)


def cmd_embed(args) -> None:
    rows = load_manifest(args.manifest)
    cache = experiments.ImageCache()
    cache.preload(rows)
    pixels = [cache.get(r) for r in rows]
    coords = experiments.embed_features(args.checkpoint, pixels,
                                        method=args.method, seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["patient_id,side,combined_class,x,y"]
    for row, (x, y) in zip(rows, coords):
        lines.append(f"{row.patient_id},{row.side},{row.combined_class},{x:.6g},{y:.6g}")
    atomic_write_text(out_dir / "embedding.csv", "\n".join(lines) + "\n")
    experiments.plot_embedding(coords, [r.combined_class for r in rows],
                               out_dir / "embedding.png")
    _log(f"embed: {len(rows)} points -> {out_dir}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hipgrade",
        description="Hip osteoarthritis DRR grading pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_default="."):
        p.add_argument("--seed", type=int, default=0, help="master RNG seed")
        p.add_argument("--config", default=None, help="experiment config JSON")
        p.add_argument("--out-dir", default=out_default, help="output directory")

    def training_flags(p: argparse.ArgumentParser):
        p.add_argument("--backbone", choices=("vit_b16", "vgg16", "densenet161",
                                              "small_cnn"), default=None)
        p.add_argument("--task", choices=tuple(_TASKS), default=None,
                       help="cls=classification, reg=regression")
        p.add_argument("--setting", choices=("combined", "separated"), default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--base-lr", type=float, default=None, dest="base_lr")
        p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
        p.add_argument("--folds", type=int, default=None)
        p.add_argument("--repeats", type=int, default=None)
        p.add_argument("--mc-samples", type=int, default=None, dest="mc_samples")
        p.add_argument("--dropout", type=float, default=None,
                       help="override backbone dropout rate")
        p.add_argument("--alpha", type=float, default=None,
                       help="override separated-loss alpha")
        p.add_argument("--pretrained", action="store_true")
        p.add_argument("--no-augment", action="store_true")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("phantom-gen", help="synthesize labeled phantom volumes")
    common(p)
    p.add_argument("--classes", default="1-7", help='e.g. "1-7" or "1,3,5"')
    p.add_argument("--per-class", type=int, default=10, dest="per_class")
    p.add_argument("--noise-sd", type=float, default=20.0, dest="noise_sd")
    p.add_argument("--format", choices=("vol", "mha"), default="vol")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("drr", help="render DRRs for a volume manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_drr)

    p = sub.add_parser("train", help="cross-validated training on a DRR manifest")
    common(p, out_default="runs")
    p.add_argument("--manifest", required=True)
    training_flags(p)
    p.add_argument("--with-uncertainty", action="store_true", dest="with_uncertainty")
    p.add_argument("--no-checkpoints", action="store_true", dest="no_checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="MC-dropout prediction for one image")
    common(p, out_default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mc-samples", type=int, default=50, dest="mc_samples")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mc-samples", type=int, default=None, dest="mc_samples")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep alpha or dropout_rate")
    common(p, out_default="runs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--param", choices=("alpha", "dropout_rate"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    training_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stats-grid", help="pairwise significance grid")
    common(p)
    p.add_argument("--inputs", nargs="+", required=True,
                   help="report.json files or a JSON of name->vector")
    p.add_argument("--metric", default="eca")
    p.add_argument("--unpaired", action="store_true")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_stats_grid)

    p = sub.add_parser("embed", help="2D embedding of penultimate features")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=("spectral", "tsne", "pca"),
                   default="spectral")
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.manual_seed(args.seed)
    try:
        args.func(args)
    except Exception as exc:
        error = {"command": args.command, "error": type(exc).__name__,
                 "message": str(exc)}
        print(json.dumps(error), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
