"""Dataset ingestion and synthesis.

Loads MVTec-AD-layout directories, generates synthetic desk-scale defect
datasets with exact ground-truth masks, and applies the training-time
augmentation (random square crop at [0.8, 1.0] scale plus horizontal flip).
All images are single-channel float arrays with intensities in [0, 1].
"""

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import cv2
import numpy as np

from .errors import (
    ConfigError,
    DatasetLayoutError,
    ImageDecodeError,
    MissingMaskError,
)

NORMAL = "normal"
ANOMALOUS = "anomalous"

TEXTURE_KINDS = ("sine-grating", "checker", "value-noise")
DEFECT_KINDS = ("rectangle-blot", "intensity-shift", "texture-swap")

_INTERPOLATIONS = {
    "bilinear": cv2.INTER_LINEAR,
    "nearest": cv2.INTER_NEAREST,
    "bicubic": cv2.INTER_CUBIC,
    "area": cv2.INTER_AREA,
}


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W) float in [0, 1]
    label: str  # NORMAL | ANOMALOUS
    gt_mask: Optional[np.ndarray]  # (H, W) uint8 in {0, 1}, anomalous test only
    source_id: str


@dataclass
class DatasetSplit:
    train: List[ImageSample]
    test: List[ImageSample]
    class_name: str


@dataclass(frozen=True)
class SynthDefectConfig:
    texture_kind: str = "sine-grating"
    defect_kind: str = "rectangle-blot"
    defect_size_range: Tuple[float, float] = (0.15, 0.3)
    n_train: int = 40
    n_test_normal: int = 20
    n_test_anomalous: int = 20
    seed: int = 0

    def validate(self):
        if self.texture_kind not in TEXTURE_KINDS:
            raise ConfigError(f"unknown texture_kind {self.texture_kind!r}")
        if self.defect_kind not in DEFECT_KINDS:
            raise ConfigError(f"unknown defect_kind {self.defect_kind!r}")
        lo, hi = self.defect_size_range
        if not (0.0 < lo <= hi <= 0.5):
            raise ConfigError(
                f"defect_size_range must lie within (0, 0.5], got {self.defect_size_range}"
            )
        if self.n_train < 1:
            raise ConfigError("n_train must be positive")
        if self.n_test_normal < 0 or self.n_test_anomalous < 0:
            raise ConfigError("test counts must be non-negative")


def _resize(img: np.ndarray, side: int, interpolation: str) -> np.ndarray:
    if img.shape == (side, side):
        return img
    return cv2.resize(img, (side, side), interpolation=_INTERPOLATIONS[interpolation])


def _read_gray(path: Path, side: int, interpolation: str) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageDecodeError(f"cannot decode {path}")
    if raw.ndim == 3:
        # luma weights 0.299/0.587/0.114 (cv2 stores channels as BGR)
        raw = cv2.cvtColor(raw[..., :3], cv2.COLOR_BGR2GRAY)
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw.astype(np.float32) / scale
    return np.clip(_resize(img, side, interpolation), 0.0, 1.0)


def _read_mask(path: Path, side: int) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise ImageDecodeError(f"cannot decode mask {path}")
    mask = _resize(raw.astype(np.float32) / 255.0, side, "nearest")
    return (mask > 0.5).astype(np.uint8)


def load_mvtec_class(
    root_path, class_name: str, image_side: int, interpolation: str = "bilinear"
) -> DatasetSplit:
    """Load one class from an MVTec-AD-layout directory tree."""
    base = Path(root_path) / class_name
    train_dir = base / "train" / "good"
    test_dir = base / "test"
    if not train_dir.is_dir() or not test_dir.is_dir():
        raise DatasetLayoutError(f"{base} does not follow the MVTec-AD layout")

    train = []
    for p in sorted(train_dir.glob("*.png")):
        train.append(
            ImageSample(
                pixels=_read_gray(p, image_side, interpolation),
                label=NORMAL,
                gt_mask=None,
                source_id=f"{class_name}/train/good/{p.stem}",
            )
        )

    test = []
    for sub in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        for p in sorted(sub.glob("*.png")):
            pixels = _read_gray(p, image_side, interpolation)
            if sub.name == "good":
                test.append(
                    ImageSample(pixels, NORMAL, None, f"{class_name}/test/good/{p.stem}")
                )
                continue
            mask_path = base / "ground_truth" / sub.name / f"{p.stem}_mask.png"
            if not mask_path.is_file():
                candidates = sorted((base / "ground_truth" / sub.name).glob(f"{p.stem}*.png")) if (base / "ground_truth" / sub.name).is_dir() else []
                if not candidates:
                    raise MissingMaskError(f"no ground-truth mask for {p}")
                mask_path = candidates[0]
            test.append(
                ImageSample(
                    pixels,
                    ANOMALOUS,
                    _read_mask(mask_path, image_side),
                    f"{class_name}/test/{sub.name}/{p.stem}",
                )
            )
    return DatasetSplit(train=train, test=test, class_name=class_name)


def save_mvtec_layout(split: DatasetSplit, root_path) -> Path:
    """Write a DatasetSplit back out as an MVTec-AD-layout directory."""
    base = Path(root_path) / split.class_name
    (base / "train" / "good").mkdir(parents=True, exist_ok=True)
    (base / "test" / "good").mkdir(parents=True, exist_ok=True)

    def _write_png(path: Path, img: np.ndarray):
        cv2.imwrite(str(path), np.round(img * 255.0).astype(np.uint8))

    for i, s in enumerate(split.train):
        _write_png(base / "train" / "good" / f"{i:03d}.png", s.pixels)
    normal_i = anom_i = 0
    for s in split.test:
        if s.label == NORMAL:
            _write_png(base / "test" / "good" / f"{normal_i:03d}.png", s.pixels)
            normal_i += 1
        else:
            (base / "test" / "defect").mkdir(parents=True, exist_ok=True)
            (base / "ground_truth" / "defect").mkdir(parents=True, exist_ok=True)
            _write_png(base / "test" / "defect" / f"{anom_i:03d}.png", s.pixels)
            cv2.imwrite(
                str(base / "ground_truth" / "defect" / f"{anom_i:03d}_mask.png"),
                (s.gt_mask * 255).astype(np.uint8),
            )
            anom_i += 1
    return base


# --- synthetic data -------------------------------------------------------

def _texture(kind: str, side: int, rng: np.random.Generator) -> np.ndarray:
    """Normal-appearance texture with intensities kept inside [0.05, 0.95]."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    if kind == "sine-grating":
        freq = rng.uniform(4.0, 8.0)
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        coord = (xx * np.cos(theta) + yy * np.sin(theta)) / side
        return 0.5 + 0.4 * np.sin(2 * np.pi * freq * coord + phase)
    if kind == "checker":
        cell = int(rng.integers(8, 17))
        oy, ox = rng.integers(0, cell, size=2)
        parity = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
        return 0.25 + 0.5 * parity
    # value-noise: coarse random grid smoothly upsampled
    coarse = rng.uniform(0.1, 0.9, size=(9, 9))
    return np.clip(
        cv2.resize(coarse, (side, side), interpolation=cv2.INTER_CUBIC), 0.05, 0.95
    )


def _paint_defect(
    image: np.ndarray, cfg: SynthDefectConfig, rng: np.random.Generator
) -> np.ndarray:
    side = image.shape[0]
    lo, hi = cfg.defect_size_range
    h = int(round(rng.uniform(lo, hi) * side))
    w = int(round(rng.uniform(lo, hi) * side))
    if h > side or w > side:
        raise ConfigError(f"defect {h}x{w} larger than image side {side}")
    h, w = max(h, 1), max(w, 1)
    top = int(rng.integers(0, side - h + 1))
    left = int(rng.integers(0, side - w + 1))
    out = image.copy()
    region = out[top : top + h, left : left + w]
    if cfg.defect_kind == "rectangle-blot":
        # 0.98 / 0.02 are outside the texture range, so every pixel changes
        region[:] = 0.98 if region.mean() < 0.5 else 0.02
    elif cfg.defect_kind == "intensity-shift":
        delta = 0.3 if region.mean() <= 0.5 else -0.3
        region[:] = np.clip(region + delta, 0.0, 1.0)
    else:  # texture-swap
        other = [k for k in TEXTURE_KINDS if k != cfg.texture_kind][0]
        region[:] = _texture(other, side, rng)[:h, :w]
    return out


def generate_synthetic(config: SynthDefectConfig, image_side: int) -> DatasetSplit:
    """Deterministic synthetic split; anomalous gt_mask marks exactly the
    pixels the defect painter changed."""
    config.validate()
    rng = np.random.default_rng(config.seed)

    def _normal(tag, i):
        return ImageSample(
            pixels=_texture(config.texture_kind, image_side, rng),
            label=NORMAL,
            gt_mask=None,
            source_id=f"synthetic/{tag}/{i:03d}",
        )

    train = [_normal("train", i) for i in range(config.n_train)]
    test = [_normal("test-good", i) for i in range(config.n_test_normal)]
    for i in range(config.n_test_anomalous):
        clean = _texture(config.texture_kind, image_side, rng)
        defected = _paint_defect(clean, config, rng)
        mask = (defected != clean).astype(np.uint8)
        test.append(
            ImageSample(defected, ANOMALOUS, mask, f"synthetic/test-defect/{i:03d}")
        )
    return DatasetSplit(train=train, test=test, class_name="synthetic")


def augment_train(image: ImageSample, rng: np.random.Generator) -> ImageSample:
    """Random square crop at uniform [0.8, 1.0] scale resized back, then a
    50% horizontal flip."""
    if image.label != NORMAL:
        raise ConfigError("augmentation is applied to training (normal) samples only")
    side = image.pixels.shape[0]
    scale = rng.uniform(0.8, 1.0)
    crop = int(round(scale * side))
    top = int(rng.integers(0, side - crop + 1))
    left = int(rng.integers(0, side - crop + 1))
    flip = rng.random() < 0.5
    pixels = image.pixels[top : top + crop, left : left + crop]
    if crop != side:
        pixels = cv2.resize(pixels, (side, side), interpolation=cv2.INTER_LINEAR)
    if flip:
        pixels = pixels[:, ::-1]
    return dataclasses.replace(
        image, pixels=np.clip(np.ascontiguousarray(pixels), 0.0, 1.0)
    )
