"""Command-line surface: synth-data, train, score, evaluate, visualize,
and the full-scale reproduction runner.

Exit codes: 0 success, 2 configuration/validation error, 3 runtime error.
Every artifact directory receives a copy of the resolved run config.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import cv2
import numpy as np

from . import config as cfgmod
from .dataset import (
    ANOMALOUS,
    DatasetSplit,
    generate_synthetic,
    load_mvtec_class,
    save_mvtec_layout,
)
from .encoder import EncoderConfig
from .errors import ConfigError, CpcAdError, GeometryError
from .geometry import GridSpec
from .metrics import auroc, pixel_auroc
from .scoring import build_negative_bank, image_score, make_mask, score_image
from .trainer import TrainConfig, load_bundle, save_bundle, train_class

TEXTURE_CLASSES = {"carpet", "grid", "leather", "tile", "wood"}
OBJECT_CLASSES = {
    "bottle", "cable", "capsule", "hazelnut", "metal_nut",
    "pill", "screw", "toothbrush", "transistor", "zipper",
}


def _safe_id(source_id: str) -> str:
    return source_id.replace("/", "_")


def _load_split(cfg) -> DatasetSplit:
    if cfg.dataset_root is not None:
        return load_mvtec_class(
            cfg.dataset_root, cfg.class_name, cfg.image_side, cfg.resize_interpolation
        )
    return generate_synthetic(cfg.synthetic, cfg.image_side)


def _archive_config(cfg, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.ini").write_text(cfgmod.dump_run_config(cfg))


def cmd_synth_data(args) -> int:
    cfg = cfgmod.load_run_config(args.config)
    if cfg.synthetic is None:
        raise ConfigError("config has no [synthetic] section")
    out_dir = Path(args.out or cfg.output_dir)
    split = generate_synthetic(cfg.synthetic, cfg.image_side)
    save_mvtec_layout(split, out_dir)
    _archive_config(cfg, out_dir)
    print(f"wrote synthetic class {split.class_name!r} to {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = cfgmod.load_run_config(args.config)
    out_dir = Path(args.out or cfg.output_dir)
    _archive_config(cfg, out_dir)
    split = _load_split(cfg)
    resume = load_bundle(args.resume) if args.resume else None
    loss_log = []
    bundle = train_class(
        split,
        cfg.grid,
        cfg.encoder,
        cfg.train,
        loss_log=loss_log,
        checkpoint_dir=out_dir / "checkpoints",
        resume=resume,
    )
    save_bundle(bundle, out_dir / "bundle.cpc")
    with open(out_dir / "train_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["direction", "epoch", "mean_loss"])
        for direction, epoch, loss in loss_log:
            w.writerow([direction, epoch, f"{loss:.8f}"])
    print(f"trained {bundle.trained_epochs} epochs; bundle at {out_dir / 'bundle.cpc'}")
    return 0


def _write_heatmap_outputs(out_dir: Path, per_image):
    """16-bit PNGs (dataset-wide min-max normalized), raw float32 sidecars,
    and a JSON with the normalization constants."""
    masks_dir = out_dir / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    lo = min(float(hm.min()) for _, hm in per_image)
    hi = max(float(hm.max()) for _, hm in per_image)
    span = hi - lo if hi > lo else 1.0
    meta = {"min": lo, "max": hi, "images": {}}
    for image_id, hm in per_image:
        norm = np.round((hm - lo) / span * 65535.0).astype(np.uint16)
        cv2.imwrite(str(masks_dir / f"{image_id}.png"), norm)
        raw = hm.astype("<f4")
        (masks_dir / f"{image_id}.bin").write_bytes(raw.tobytes())
        meta["images"][image_id] = {"shape": list(hm.shape)}
    (masks_dir / "normalization.json").write_text(json.dumps(meta, indent=1))


def cmd_score(args) -> int:
    cfg = cfgmod.load_run_config(args.config)
    out_dir = Path(args.out or cfg.output_dir)
    _archive_config(cfg, out_dir)
    split = _load_split(cfg)
    bundle = load_bundle(args.bundle)
    bank = build_negative_bank(
        split.train,
        bundle,
        max_pool_size=cfg.scoring.max_bank_size,
        seed=cfg.seed,
        n_negatives=cfg.scoring.n_negatives,
    )
    samples = split.test if args.split == "test" else split.train

    maps_dir = out_dir / "scoremaps"
    gt_dir = out_dir / "gt"
    maps_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)
    rows, per_image = [], []
    for sample in samples:
        smap = score_image(
            sample,
            bundle,
            bank,
            offsets=cfg.scoring.offsets,
            n_negatives=cfg.scoring.n_negatives,
            rng_seed=cfg.seed,
            negative_sampling_scope=cfg.scoring.negative_sampling_scope,
        )
        sid = _safe_id(sample.source_id)
        (maps_dir / f"{sid}.values.bin").write_bytes(
            smap.values.astype("<f8").tobytes()
        )
        (maps_dir / f"{sid}.counts.bin").write_bytes(
            smap.counts.astype("<i8").tobytes()
        )
        rows.append((sid, sample.label, image_score(smap, cfg.scoring.top_fraction)))
        per_image.append((sid, make_mask(smap, cfg.grid).heatmap))
        if sample.gt_mask is not None:
            cv2.imwrite(str(gt_dir / f"{sid}.png"), sample.gt_mask * 255)
    if not rows:
        raise ConfigError(f"split {args.split!r} has no images to score")
    (maps_dir / "meta.json").write_text(
        json.dumps({"lattice_side": int(smap.values.shape[0])}, indent=1)
    )
    _write_heatmap_outputs(out_dir, per_image)
    with open(out_dir / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label", "score"])
        for sid, label, score in rows:
            w.writerow([sid, label, f"{score:.10f}"])
    print(f"scored {len(rows)} images; artifacts in {out_dir}")
    return 0


def _load_eval_inputs(scores_csv, masks_dir, gt_dir):
    rows = []
    with open(scores_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((row["image_id"], row["label"], float(row["score"])))
    masks_dir, gt_dir = Path(masks_dir), Path(gt_dir)
    meta = json.loads((masks_dir / "normalization.json").read_text())
    heatmaps, gts = [], []
    for image_id, label, _ in rows:
        shape = tuple(meta["images"][image_id]["shape"])
        raw = (masks_dir / f"{image_id}.bin").read_bytes()
        heatmaps.append(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64))
        gt_path = gt_dir / f"{image_id}.png"
        if gt_path.is_file():
            gts.append((cv2.imread(str(gt_path), cv2.IMREAD_GRAYSCALE) > 127).astype(np.uint8))
        else:
            gts.append(np.zeros(shape, dtype=np.uint8))
    return rows, heatmaps, gts


def _rollup(classes: dict) -> dict:
    def _mean(names, key):
        vals = [classes[n][key] for n in names if classes[n].get(key) is not None]
        return float(np.mean(vals)) if vals else None

    groups = {
        "mean": list(classes),
        "texture_mean": [n for n in classes if n in TEXTURE_CLASSES],
        "object_mean": [n for n in classes if n in OBJECT_CLASSES],
    }
    return {
        g: {
            "detection_auroc": _mean(names, "detection_auroc"),
            "pixel_auroc": _mean(names, "pixel_auroc"),
        }
        for g, names in groups.items()
    }


def cmd_evaluate(args) -> int:
    rows, heatmaps, gts = _load_eval_inputs(args.scores, args.masks, args.gt)
    scores = [r[2] for r in rows]
    labels = [r[1] for r in rows]
    det = auroc(scores, labels)
    pix = pixel_auroc(heatmaps, gts, per_image_mean=args.per_image_mean)

    out_path = Path(args.out)
    report = {"classes": {}}
    if out_path.is_file():
        report = json.loads(out_path.read_text())
    report["classes"][args.class_name] = {
        "detection_auroc": det.auroc,
        "pixel_auroc": pix.auroc,
        "n_test_images": len(rows),
    }
    report.update(_rollup(report["classes"]))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(report, indent=1, sort_keys=True))
    print(
        f"{args.class_name}: detection AUROC {det.auroc:.4f}, "
        f"pixel AUROC {pix.auroc:.4f} -> {out_path}"
    )
    return 0


def _colorize(values: np.ndarray) -> np.ndarray:
    """Map [0,1] values through the inferno colormap to uint8 RGB."""
    from matplotlib import cm

    return (cm.inferno(np.clip(values, 0.0, 1.0))[..., :3] * 255).astype(np.uint8)


def cmd_visualize(args) -> int:
    image = cv2.imread(str(args.image), cv2.IMREAD_GRAYSCALE)
    if image is None:
        raise ConfigError(f"cannot read image {args.image}")
    mask_path = Path(args.mask)
    if mask_path.suffix == ".bin":
        raw = np.frombuffer(mask_path.read_bytes(), dtype="<f4")
        if raw.size != image.size:
            raise ConfigError(
                f"mask has {raw.size} values but image has {image.size} pixels"
            )
        heat = raw.reshape(image.shape)
    else:
        heat = cv2.imread(str(mask_path), cv2.IMREAD_UNCHANGED)
        if heat is None:
            raise ConfigError(f"cannot read mask {args.mask}")
        heat = heat.astype(np.float64)
    if heat.shape != image.shape:
        raise ConfigError(f"mask shape {heat.shape} != image shape {image.shape}")
    span = heat.max() - heat.min()
    heat_norm = (heat - heat.min()) / (span if span > 0 else 1.0)

    gray_rgb = np.stack([image] * 3, axis=-1)
    overlay = (0.4 * gray_rgb + 0.6 * _colorize(heat_norm)).astype(np.uint8)
    panels = [gray_rgb, overlay]
    if args.gt:
        gt = cv2.imread(str(args.gt), cv2.IMREAD_GRAYSCALE)
        if gt is None:
            raise ConfigError(f"cannot read ground truth {args.gt}")
        if gt.shape != image.shape:
            raise ConfigError(f"gt shape {gt.shape} != image shape {image.shape}")
        panels.append(np.stack([(gt > 127).astype(np.uint8) * 255] * 3, axis=-1))
    strip = np.concatenate(panels, axis=1)
    cv2.imwrite(str(args.out), cv2.cvtColor(strip, cv2.COLOR_RGB2BGR))
    print(f"wrote {len(panels)}-panel visualization to {args.out}")
    return 0


def cmd_reproduce_full(args) -> int:
    """Full-scale configuration: 768x768 images, 256/128 patches, 64/32
    sub-patches, truncated ResNet-18 v2, Adam 1.5e-4, batch 16, 16
    negatives, four directions.  Pass --epochs 2 for a smoke run."""
    grid = GridSpec(768, 256, 128, 64, 32)
    enc = EncoderConfig("resnet18v2-block3", 256, 64)
    train = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=1.5e-4,
        n_negatives=16,
        offsets=(2, 3),
        seed=args.seed,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = load_mvtec_class(args.root, args.class_name, 768)
    loss_log = []
    bundle = train_class(split, grid, enc, train, loss_log=loss_log,
                         checkpoint_dir=out_dir / "checkpoints")
    save_bundle(bundle, out_dir / "bundle.cpc")

    bank = build_negative_bank(split.train, bundle, max_pool_size=8192, seed=args.seed)
    rows, per_image = [], []
    for sample in split.test:
        smap = score_image(sample, bundle, bank, rng_seed=args.seed)
        sid = _safe_id(sample.source_id)
        rows.append((sid, sample.label, image_score(smap)))
        per_image.append((sid, make_mask(smap, grid).heatmap))
    _write_heatmap_outputs(out_dir, per_image)
    with open(out_dir / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label", "score"])
        for sid, label, score in rows:
            w.writerow([sid, label, f"{score:.10f}"])

    labels = [r[1] for r in rows]
    report = {"class": args.class_name, "epochs": args.epochs}
    if ANOMALOUS in labels and any(l != ANOMALOUS for l in labels):
        det = auroc([r[2] for r in rows], labels)
        gts = [
            s.gt_mask if s.gt_mask is not None else np.zeros_like(s.pixels, dtype=np.uint8)
            for s in split.test
        ]
        pix = pixel_auroc([hm for _, hm in per_image], gts)
        report.update(detection_auroc=det.auroc, pixel_auroc=pix.auroc)
        print(f"detection AUROC {det.auroc:.4f}, pixel AUROC {pix.auroc:.4f}")
    (out_dir / "metrics.json").write_text(json.dumps(report, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpcad",
        description="Patch-contrastive anomaly detection and segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic MVTec-layout dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train the directional models for one class")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--resume", default=None, help="checkpoint bundle to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score a split with a trained bundle")
    p.add_argument("--config", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="compute AUROC metrics from score artifacts")
    p.add_argument("--scores", required=True, help="scores.csv from `score`")
    p.add_argument("--masks", required=True, help="masks directory from `score`")
    p.add_argument("--gt", required=True, help="ground-truth mask directory")
    p.add_argument("--class", dest="class_name", default="synthetic")
    p.add_argument("--out", default="metrics.json")
    p.add_argument("--per-image-mean", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize", help="input / heatmap overlay / ground truth strip")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True, help="heatmap PNG or raw .bin sidecar")
    p.add_argument("--gt", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser(
        "reproduce-full",
        help="run the full-scale MVTec configuration on one class",
    )
    p.add_argument("--root", required=True, help="MVTec-AD dataset root")
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reproduce_full)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CpcAdError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
