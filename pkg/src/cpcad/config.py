"""Declarative run configuration (INI format) shared by all CLI commands.

Sections: [run] seed / output; [dataset] MVTec root + class or synthetic
parameters; [grid]; [encoder]; [train]; [scoring].  Cross-field consistency
is validated eagerly at load.
"""

import configparser
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

from .dataset import SynthDefectConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .geometry import GridSpec, plan_grid
from .trainer import TrainConfig

NEGATIVE_SAMPLING_SCOPES = ("per_site", "per_image")


@dataclass
class ScoringConfig:
    offsets: Tuple[int, ...] = (2, 3)
    n_negatives: int = 16
    top_fraction: float = 0.05
    max_bank_size: int = 4096
    negative_sampling_scope: str = "per_site"

    def validate(self):
        if not (0.0 < self.top_fraction <= 1.0):
            raise ConfigError(f"top_fraction must be in (0, 1], got {self.top_fraction}")
        if self.negative_sampling_scope not in NEGATIVE_SAMPLING_SCOPES:
            raise ConfigError(
                f"negative_sampling_scope must be one of {NEGATIVE_SAMPLING_SCOPES}"
            )
        if self.n_negatives < 1 or self.max_bank_size < self.n_negatives:
            raise ConfigError("bank must hold at least n_negatives embeddings")


@dataclass
class RunConfig:
    seed: int
    output_dir: Path
    image_side: int
    dataset_root: Optional[Path]
    class_name: str
    synthetic: Optional[SynthDefectConfig]
    grid: GridSpec
    encoder: EncoderConfig
    train: TrainConfig
    scoring: ScoringConfig
    resize_interpolation: str = "bilinear"

    def validate(self):
        layout = plan_grid(self.grid)
        self.encoder.validate()
        self.train.validate()
        self.scoring.validate()
        if self.grid.image_side != self.image_side:
            raise ConfigError(
                f"grid image_side {self.grid.image_side} != dataset image_side "
                f"{self.image_side}"
            )
        if self.encoder.input_side != self.grid.subpatch_side:
            raise ConfigError(
                f"encoder input_side {self.encoder.input_side} != subpatch_side "
                f"{self.grid.subpatch_side}"
            )
        s = layout.subpatches_per_patch_axis
        for offs in (self.train.offsets, self.scoring.offsets):
            if max(offs) >= s:
                raise ConfigError(
                    f"offset {max(offs)} does not fit the {s}x{s} sub-patch grid"
                )
        if self.dataset_root is None and self.synthetic is None:
            raise ConfigError("config needs either a dataset root or a synthetic section")


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def load_run_config(path) -> RunConfig:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = _parse(cp)
    except (configparser.Error, KeyError, ValueError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
    cfg.validate()
    return cfg


def _parse(cp: configparser.ConfigParser) -> RunConfig:
    run = cp["run"]
    ds = cp["dataset"]
    image_side = ds.getint("image_side")

    synthetic = None
    if cp.has_section("synthetic"):
        sy = cp["synthetic"]
        synthetic = SynthDefectConfig(
            texture_kind=sy.get("texture_kind", "sine-grating"),
            defect_kind=sy.get("defect_kind", "rectangle-blot"),
            defect_size_range=(
                sy.getfloat("defect_size_min", 0.15),
                sy.getfloat("defect_size_max", 0.3),
            ),
            n_train=sy.getint("n_train", 40),
            n_test_normal=sy.getint("n_test_normal", 20),
            n_test_anomalous=sy.getint("n_test_anomalous", 20),
            seed=sy.getint("seed", run.getint("seed", 0)),
        )

    g = cp["grid"]
    grid = GridSpec(
        image_side=g.getint("image_side", image_side),
        patch_side=g.getint("patch_side"),
        patch_stride=g.getint("patch_stride"),
        subpatch_side=g.getint("subpatch_side"),
        subpatch_stride=g.getint("subpatch_stride"),
    )
    e = cp["encoder"]
    encoder = EncoderConfig(
        backbone=e.get("backbone", "small-cnn"),
        embedding_dim=e.getint("embedding_dim", 64),
        input_side=e.getint("input_side", grid.subpatch_side),
    )
    t = cp["train"] if cp.has_section("train") else {}
    defaults = TrainConfig()
    directions = (
        tuple(x.strip() for x in t.get("directions").split(","))
        if isinstance(t, configparser.SectionProxy) and t.get("directions")
        else defaults.directions
    )
    train = TrainConfig(
        epochs=int(t.get("epochs", defaults.epochs)),
        batch_size=int(t.get("batch_size", defaults.batch_size)),
        learning_rate=float(t.get("learning_rate", defaults.learning_rate)),
        n_negatives=int(t.get("n_negatives", defaults.n_negatives)),
        offsets=_ints(t.get("offsets", "2,3")),
        directions=directions,
        share_encoder=str(t.get("share_encoder", "false")).lower() == "true",
        seed=int(t.get("seed", run.getint("seed", 0))),
    )
    sc = cp["scoring"] if cp.has_section("scoring") else {}
    sdef = ScoringConfig()
    scoring = ScoringConfig(
        offsets=_ints(sc.get("offsets", ",".join(str(k) for k in train.offsets))),
        n_negatives=int(sc.get("n_negatives", train.n_negatives)),
        top_fraction=float(sc.get("top_fraction", sdef.top_fraction)),
        max_bank_size=int(sc.get("max_bank_size", sdef.max_bank_size)),
        negative_sampling_scope=sc.get(
            "negative_sampling_scope", sdef.negative_sampling_scope
        ),
    )
    return RunConfig(
        seed=run.getint("seed", 0),
        output_dir=Path(run.get("output_dir", "out")),
        image_side=image_side,
        dataset_root=Path(ds["root"]) if ds.get("root") else None,
        class_name=ds.get("class_name", "synthetic"),
        synthetic=synthetic,
        grid=grid,
        encoder=encoder,
        train=train,
        scoring=scoring,
        resize_interpolation=ds.get("resize_interpolation", "bilinear"),
    )


def dump_run_config(cfg: RunConfig) -> str:
    """Serialize back to the INI text archived next to every artifact."""
    cp = configparser.ConfigParser()
    cp["run"] = {"seed": str(cfg.seed), "output_dir": str(cfg.output_dir)}
    cp["dataset"] = {
        "image_side": str(cfg.image_side),
        "class_name": cfg.class_name,
        "resize_interpolation": cfg.resize_interpolation,
    }
    if cfg.dataset_root is not None:
        cp["dataset"]["root"] = str(cfg.dataset_root)
    if cfg.synthetic is not None:
        sy = cfg.synthetic
        cp["synthetic"] = {
            "texture_kind": sy.texture_kind,
            "defect_kind": sy.defect_kind,
            "defect_size_min": repr(sy.defect_size_range[0]),
            "defect_size_max": repr(sy.defect_size_range[1]),
            "n_train": str(sy.n_train),
            "n_test_normal": str(sy.n_test_normal),
            "n_test_anomalous": str(sy.n_test_anomalous),
            "seed": str(sy.seed),
        }
    g = cfg.grid
    cp["grid"] = {
        "image_side": str(g.image_side),
        "patch_side": str(g.patch_side),
        "patch_stride": str(g.patch_stride),
        "subpatch_side": str(g.subpatch_side),
        "subpatch_stride": str(g.subpatch_stride),
    }
    cp["encoder"] = {
        "backbone": cfg.encoder.backbone,
        "embedding_dim": str(cfg.encoder.embedding_dim),
        "input_side": str(cfg.encoder.input_side),
    }
    t = cfg.train
    cp["train"] = {
        "epochs": str(t.epochs),
        "batch_size": str(t.batch_size),
        "learning_rate": repr(t.learning_rate),
        "n_negatives": str(t.n_negatives),
        "offsets": ",".join(str(k) for k in t.offsets),
        "directions": ",".join(t.directions),
        "share_encoder": str(t.share_encoder).lower(),
        "seed": str(t.seed),
    }
    s = cfg.scoring
    cp["scoring"] = {
        "offsets": ",".join(str(k) for k in s.offsets),
        "n_negatives": str(s.n_negatives),
        "top_fraction": repr(s.top_fraction),
        "max_bank_size": str(s.max_bank_size),
        "negative_sampling_scope": s.negative_sampling_scope,
    }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
