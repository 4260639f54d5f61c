"""Per-class training of the four directional contrastive models, plus
checkpoint bundle persistence.

Each direction gets its own encoder and bilinear predictor, trained from
scratch with Adam on defect-free images only.  One optimization step per
image batch aggregates all patches, directional pairs, and offsets into a
single mean loss.
"""

import configparser
import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .contrastive import (
    DIRECTIONS,
    DirectionalPredictor,
    directional_pairs,
    infonce_loss_many,
)
from .dataset import NORMAL, DatasetSplit, augment_train
from .encoder import EncoderConfig, init_encoder
from .errors import (
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
    DivergenceError,
)
from .geometry import GridSpec, extract_subpatches, plan_grid

BUNDLE_VERSION = "cpcad-bundle/1"
CHECKPOINT_EVERY = 25


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    learning_rate: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    n_negatives: int = 16  # N-1
    offsets: Tuple[int, ...] = (2, 3)
    directions: Tuple[str, ...] = DIRECTIONS
    share_encoder: bool = False
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.n_negatives < 1:
            raise ConfigError(f"n_negatives must be >= 1, got {self.n_negatives}")
        if not self.offsets or min(self.offsets) < 1:
            raise ConfigError(f"offsets must be positive, got {self.offsets}")
        bad = [d for d in self.directions if d not in DIRECTIONS]
        if bad or not self.directions:
            raise ConfigError(f"invalid directions {self.directions}")


@dataclass
class ModelBundle:
    class_name: str
    grid: GridSpec
    encoder_config: EncoderConfig
    train_config: TrainConfig
    encoders: Dict[str, torch.nn.Module]  # direction -> encoder (may be shared)
    predictors: Dict[str, DirectionalPredictor]
    trained_epochs: int = 0

    @property
    def directions(self) -> Tuple[str, ...]:
        return tuple(self.predictors.keys())

    def fingerprint(self) -> str:
        return hashlib.sha256(_bundle_config_text(self).encode()).hexdigest()[:16]

    def eval(self):
        for enc in self.encoders.values():
            enc.eval()
        for pred in self.predictors.values():
            pred.eval()
        return self


def _derived_torch_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def _flat_index(b, pr, pc, sr, sc, p, s):
    return (((b * p + pr) * p + pc) * s + sr) * s + sc


def _pair_indices(batch_size: int, p: int, s: int, pairs) -> Tuple[np.ndarray, np.ndarray]:
    """Flat (context, target) index arrays over all images, patches, pairs."""
    ctx, tgt = [], []
    for b in range(batch_size):
        for pr in range(p):
            for pc in range(p):
                for (cr, cc), (tr, tc) in pairs:
                    ctx.append(_flat_index(b, pr, pc, cr, cc, p, s))
                    tgt.append(_flat_index(b, pr, pc, tr, tc, p, s))
    return np.asarray(ctx), np.asarray(tgt)


def _draw_negative_indices(
    pool_size: int, exclude: np.ndarray, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Per-row uniform sample without replacement, excluding the row's target."""
    keys = rng.random((exclude.shape[0], pool_size))
    keys[np.arange(exclude.shape[0]), exclude] = np.inf
    return np.argpartition(keys, count, axis=1)[:, :count]


def batch_loss(
    embeddings: torch.Tensor,  # (B, P, P, S, S, d)
    predictor: DirectionalPredictor,
    pair_cache: Dict[int, Tuple[np.ndarray, np.ndarray]],
    n_negatives: int,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Mean InfoNCE loss over all (patch, pair, offset) sites in one batch.

    Negatives are drawn uniformly without replacement from every sub-patch
    embedding in the batch, excluding the positive target itself.
    """
    d = embeddings.shape[-1]
    flat = embeddings.reshape(-1, d)
    pool = flat.shape[0]
    losses = []
    for k in predictor.offsets:
        ctx_idx, tgt_idx = pair_cache[k]
        neg_idx = _draw_negative_indices(pool, tgt_idx, n_negatives, rng)
        losses.append(
            infonce_loss_many(
                flat[ctx_idx],
                flat[tgt_idx],
                flat[torch.from_numpy(neg_idx)],
                predictor.matrix(k),
            )
        )
    return torch.cat(losses).mean()


def train_class(
    split: DatasetSplit,
    grid: GridSpec,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    loss_log: Optional[List[Tuple[str, int, float]]] = None,
    checkpoint_dir=None,
    resume: Optional["ModelBundle"] = None,
) -> ModelBundle:
    """Train one directional model per configured direction on split.train.

    Only the training split ever enters this function's data path; it must
    be non-empty and all-normal.  Deterministic for a fixed cfg.seed.
    """
    cfg.validate()
    enc_cfg.validate()
    layout = plan_grid(grid)
    if not split.train:
        raise ConfigError("training split is empty")
    if any(s.label != NORMAL for s in split.train):
        raise ConfigError("training split contains non-normal samples")
    if enc_cfg.input_side != grid.subpatch_side:
        raise ConfigError(
            f"encoder input_side {enc_cfg.input_side} != subpatch_side "
            f"{grid.subpatch_side}"
        )
    s = layout.subpatches_per_patch_axis
    if max(cfg.offsets) >= s:
        raise ConfigError(
            f"offset {max(cfg.offsets)} does not fit the {s}x{s} sub-patch grid"
        )

    if resume is not None:
        bundle = resume
        start_epoch = resume.trained_epochs
        if start_epoch >= cfg.epochs:
            return bundle
    else:
        bundle = _init_bundle(split.class_name, grid, enc_cfg, cfg)
        start_epoch = 0

    p = layout.patches_per_axis
    n_train = len(split.train)
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)

    # per-direction optimizer and rng; rng streams are derived from
    # (seed, direction index, start epoch) so each direction trains as an
    # independent run
    opts, rngs, pair_caches = {}, {}, {}
    for di, direction in enumerate(cfg.directions):
        bundle.encoders[direction].train()
        bundle.predictors[direction].train()
        params = list(
            dict.fromkeys(
                list(bundle.encoders[direction].parameters())
                + list(bundle.predictors[direction].parameters())
            )
        )
        opts[direction] = torch.optim.Adam(
            params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2)
        )
        rngs[direction] = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, di, start_epoch])
        )
        pair_caches[direction] = {}

    for epoch in range(start_epoch, cfg.epochs):
        for direction in cfg.directions:
            encoder = bundle.encoders[direction]
            predictor = bundle.predictors[direction]
            rng = rngs[direction]
            pair_cache = pair_caches[direction]
            order = rng.permutation(n_train)
            epoch_losses = []
            for step in range(steps_per_epoch):
                idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
                blocks = np.stack(
                    [
                        extract_subpatches(
                            augment_train(split.train[i], rng).pixels, layout
                        )
                        for i in idx
                    ]
                ).astype(np.float32)
                b = blocks.shape[0]
                x = torch.from_numpy(
                    blocks.reshape(-1, 1, grid.subpatch_side, grid.subpatch_side)
                )
                z = encoder(x).reshape(b, p, p, s, s, -1)
                if b not in pair_cache:
                    pair_cache[b] = {
                        k: _pair_indices(b, p, s, directional_pairs(s, direction, k))
                        for k in cfg.offsets
                    }
                loss = batch_loss(z, predictor, pair_cache[b], cfg.n_negatives, rng)
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss in direction {direction}",
                        step=epoch * steps_per_epoch + step,
                    )
                opts[direction].zero_grad()
                loss.backward()
                opts[direction].step()
                epoch_losses.append(float(loss.detach()))
            if loss_log is not None:
                loss_log.append((direction, epoch, float(np.mean(epoch_losses))))
        if checkpoint_dir is not None:
            if (epoch + 1) % CHECKPOINT_EVERY == 0 and (epoch + 1) < cfg.epochs:
                bundle.trained_epochs = epoch + 1
                save_bundle(
                    bundle, Path(checkpoint_dir) / f"checkpoint_ep{epoch + 1:04d}.cpc"
                )

    bundle.trained_epochs = cfg.epochs
    bundle.eval()
    return bundle


def _init_bundle(class_name, grid, enc_cfg, cfg) -> ModelBundle:
    encoders, predictors = {}, {}
    shared = None
    if cfg.share_encoder:
        shared = init_encoder(enc_cfg, _derived_torch_seed(cfg.seed, 1000))
    for di, direction in enumerate(cfg.directions):
        encoders[direction] = (
            shared
            if shared is not None
            else init_encoder(enc_cfg, _derived_torch_seed(cfg.seed, di))
        )
        gen_state = torch.random.get_rng_state()
        try:
            torch.manual_seed(_derived_torch_seed(cfg.seed, di, 7))
            predictors[direction] = DirectionalPredictor(
                direction, cfg.offsets, enc_cfg.embedding_dim
            )
        finally:
            torch.random.set_rng_state(gen_state)
    return ModelBundle(
        class_name=class_name,
        grid=grid,
        encoder_config=enc_cfg,
        train_config=cfg,
        encoders=encoders,
        predictors=predictors,
    )


# --- checkpoint bundle persistence ----------------------------------------

def _bundle_config_text(bundle: ModelBundle) -> str:
    cp = configparser.ConfigParser()
    cp["bundle"] = {
        "class_name": bundle.class_name,
        "trained_epochs": str(bundle.trained_epochs),
    }
    g = bundle.grid
    cp["grid"] = {
        "image_side": str(g.image_side),
        "patch_side": str(g.patch_side),
        "patch_stride": str(g.patch_stride),
        "subpatch_side": str(g.subpatch_side),
        "subpatch_stride": str(g.subpatch_stride),
    }
    e = bundle.encoder_config
    cp["encoder"] = {
        "backbone": e.backbone,
        "embedding_dim": str(e.embedding_dim),
        "input_side": str(e.input_side),
    }
    t = bundle.train_config
    cp["train"] = {
        "epochs": str(t.epochs),
        "batch_size": str(t.batch_size),
        "learning_rate": repr(t.learning_rate),
        "beta1": repr(t.beta1),
        "beta2": repr(t.beta2),
        "n_negatives": str(t.n_negatives),
        "offsets": ",".join(str(k) for k in t.offsets),
        "directions": ",".join(t.directions),
        "share_encoder": str(t.share_encoder).lower(),
        "seed": str(t.seed),
    }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _weight_entries(bundle: ModelBundle):
    """Ordered (name, tensor) pairs; a shared encoder is stored once."""
    entries = []
    if bundle.train_config.share_encoder:
        enc = next(iter(bundle.encoders.values()))
        for name, t in enc.state_dict().items():
            entries.append((f"shared.encoder.{name}", t))
    else:
        for direction, enc in bundle.encoders.items():
            for name, t in enc.state_dict().items():
                entries.append((f"{direction}.encoder.{name}", t))
    for direction, pred in bundle.predictors.items():
        for k in pred.offsets:
            entries.append((f"{direction}.predictor.{k}", pred.matrix(k).data))
    return entries


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write a bundle archive: version tag, configs, weight manifest, and
    raw little-endian float32 weight arrays."""
    entries = _weight_entries(bundle)
    manifest = []
    blob = io.BytesIO()
    for name, t in entries:
        arr = t.detach().cpu().numpy().astype("<f4")
        manifest.append({"name": name, "shape": list(arr.shape)})
        blob.write(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("VERSION", BUNDLE_VERSION)
        zf.writestr("config.ini", _bundle_config_text(bundle))
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        zf.writestr("weights.bin", blob.getvalue())


def load_bundle(path) -> ModelBundle:
    """Reconstruct a ModelBundle; weights round-trip bit-exactly."""
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            required = {"VERSION", "config.ini", "manifest.json", "weights.bin"}
            if not required <= names:
                raise CheckpointFormatError(
                    f"bundle missing entries: {sorted(required - names)}"
                )
            version = zf.read("VERSION").decode().strip()
            if version != BUNDLE_VERSION:
                raise CheckpointVersionError(
                    f"unsupported bundle version {version!r}, expected {BUNDLE_VERSION!r}"
                )
            config_text = zf.read("config.ini").decode()
            manifest = json.loads(zf.read("manifest.json").decode())
            raw = zf.read("weights.bin")
    except zipfile.BadZipFile as exc:
        raise CheckpointFormatError(f"not a valid bundle archive: {path}") from exc

    cp = configparser.ConfigParser()
    cp.read_string(config_text)
    grid = GridSpec(
        image_side=cp.getint("grid", "image_side"),
        patch_side=cp.getint("grid", "patch_side"),
        patch_stride=cp.getint("grid", "patch_stride"),
        subpatch_side=cp.getint("grid", "subpatch_side"),
        subpatch_stride=cp.getint("grid", "subpatch_stride"),
    )
    enc_cfg = EncoderConfig(
        backbone=cp.get("encoder", "backbone"),
        embedding_dim=cp.getint("encoder", "embedding_dim"),
        input_side=cp.getint("encoder", "input_side"),
    )
    train_cfg = TrainConfig(
        epochs=cp.getint("train", "epochs"),
        batch_size=cp.getint("train", "batch_size"),
        learning_rate=cp.getfloat("train", "learning_rate"),
        beta1=cp.getfloat("train", "beta1"),
        beta2=cp.getfloat("train", "beta2"),
        n_negatives=cp.getint("train", "n_negatives"),
        offsets=tuple(int(k) for k in cp.get("train", "offsets").split(",")),
        directions=tuple(cp.get("train", "directions").split(",")),
        share_encoder=cp.getboolean("train", "share_encoder"),
        seed=cp.getint("train", "seed"),
    )
    bundle = _init_bundle(cp.get("bundle", "class_name"), grid, enc_cfg, train_cfg)
    bundle.trained_epochs = cp.getint("bundle", "trained_epochs")

    arrays = {}
    offset = 0
    for item in manifest:
        shape = tuple(item["shape"])
        n = int(np.prod(shape)) if shape else 1
        chunk = raw[offset : offset + 4 * n]
        if len(chunk) != 4 * n:
            raise CheckpointFormatError("weights.bin truncated")
        arrays[item["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape)
        offset += 4 * n
    if offset != len(raw):
        raise CheckpointFormatError("weights.bin has trailing bytes")

    expected = _weight_entries(bundle)
    if [n for n, _ in expected] != [m["name"] for m in manifest]:
        raise CheckpointFormatError("manifest does not match bundle structure")
    for name, t in expected:
        arr = arrays[name]
        if tuple(t.shape) != arr.shape:
            raise CheckpointFormatError(f"shape mismatch for {name}")
        with torch.no_grad():
            t.copy_(torch.from_numpy(arr.copy()).to(t.dtype))
    bundle.eval()
    return bundle
