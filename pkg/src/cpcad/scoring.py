"""Test-time anomaly scoring.

Negatives come from a bank of embeddings of defect-free *training*
sub-patches, so an anomaly can only ever appear in the positive pair.  Each
evaluated (patch, pair, offset, direction) loss is attributed to its target
sub-patch's global lattice position; per-position losses are averaged into
a ScoreMap, aggregated to an image-level score (mean of the top fraction),
and spread over pixel footprints to form a full-resolution heatmap.
"""

import hashlib
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import torch

from .contrastive import directional_pairs, infonce_loss_many
from .dataset import NORMAL, ImageSample
from .encoder import encode
from .errors import (
    BankHygieneError,
    BankTooSmallError,
    ConfigError,
    EmptyScoreMapError,
)
from .geometry import (
    GridSpec,
    extract_subpatches,
    pixel_footprint,
    plan_grid,
)
from .trainer import ModelBundle

ANOMALOUS_LABEL = "anomalous"
NORMAL_LABEL = "normal"


@dataclass
class NegativeBank:
    pools: Dict[str, np.ndarray]  # direction -> (pool_size, d)
    pool_size: int
    fingerprint: str
    bundle_fingerprint: str


@dataclass
class ScoreMap:
    values: np.ndarray  # (L, L) mean losses, NaN where absent
    counts: np.ndarray  # (L, L) contributing evaluations

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    def present_values(self) -> np.ndarray:
        return self.values[self.present]


@dataclass
class AnomalyMask:
    heatmap: np.ndarray  # (image_side, image_side)


def build_negative_bank(
    train_samples: Sequence[ImageSample],
    bundle: ModelBundle,
    max_pool_size: int = 4096,
    seed: int = 0,
    n_negatives: Optional[int] = None,
) -> NegativeBank:
    """Encode unaugmented training sub-patches into per-direction pools.

    Refuses any sample that is not a normal training image; test data must
    never reach the bank.
    """
    if not train_samples:
        raise BankTooSmallError("no training samples to build the bank from")
    for s in train_samples:
        if s.label != NORMAL or s.gt_mask is not None:
            raise BankHygieneError(
                f"sample {s.source_id!r} is not a normal training image; "
                f"the negative bank accepts only defect-free training data"
            )
    layout = plan_grid(bundle.grid)
    if n_negatives is None:
        n_negatives = bundle.train_config.n_negatives

    pools = {}
    rng = np.random.default_rng(seed)
    for direction in bundle.directions:
        embeddings = []
        for s in train_samples:
            blocks = extract_subpatches(s.pixels, layout)
            grid = encode(blocks, bundle.encoders[direction], bundle.grid.subpatch_side)
            embeddings.append(grid.values.reshape(-1, grid.dim))
        pool = np.concatenate(embeddings, axis=0)
        if pool.shape[0] > max_pool_size:
            keep = rng.choice(pool.shape[0], size=max_pool_size, replace=False)
            pool = pool[np.sort(keep)]
        pools[direction] = pool

    pool_size = min(p.shape[0] for p in pools.values())
    if pool_size < n_negatives:
        raise BankTooSmallError(
            f"bank pool of {pool_size} embeddings is smaller than the "
            f"{n_negatives} negatives required"
        )
    h = hashlib.sha256()
    for s in train_samples:
        h.update(s.source_id.encode())
        h.update(b"\0")
    h.update(str(seed).encode())
    return NegativeBank(
        pools=pools,
        pool_size=pool_size,
        fingerprint=h.hexdigest()[:16],
        bundle_fingerprint=bundle.fingerprint(),
    )


def _site_negatives(
    pool: np.ndarray,
    rng_seed: int,
    dir_index: int,
    k: int,
    position,
    count: int,
    scope: str = "per_site",
) -> np.ndarray:
    """Deterministic negative draw; per_site keys the seed on the target
    position, per_image reuses one draw per (image, direction, k)."""
    if scope == "per_site":
        ss = np.random.SeedSequence([rng_seed, dir_index, k, position[0], position[1]])
    elif scope == "per_image":
        ss = np.random.SeedSequence([rng_seed, dir_index, k])
    else:
        raise ConfigError(f"unknown negative sampling scope {scope!r}")
    rng = np.random.default_rng(ss)
    return rng.choice(pool.shape[0], size=count, replace=False)


def score_image(
    image: ImageSample,
    bundle: ModelBundle,
    bank: NegativeBank,
    offsets: Optional[Sequence[int]] = None,
    n_negatives: Optional[int] = None,
    rng_seed: int = 0,
    negative_sampling_scope: str = "per_site",
) -> ScoreMap:
    """Per-position InfoNCE anomaly losses for one image.

    Every loss is accumulated into the *target* sub-patch's global lattice
    position; final values are sum/count over all contributing
    (direction, offset, pair, duplicate-patch) evaluations.
    """
    if bank.bundle_fingerprint != bundle.fingerprint():
        raise ConfigError("negative bank was built for a different bundle")
    layout = plan_grid(bundle.grid)
    spec = bundle.grid
    if offsets is None:
        offsets = bundle.train_config.offsets
    if n_negatives is None:
        n_negatives = bundle.train_config.n_negatives
    if bank.pool_size < n_negatives:
        raise BankTooSmallError(
            f"bank pool of {bank.pool_size} < {n_negatives} negatives"
        )
    s = layout.subpatches_per_patch_axis
    p = layout.patches_per_axis
    r = spec.stride_ratio
    L = layout.distinct_positions_per_axis

    blocks = extract_subpatches(image.pixels, layout)
    sums = np.zeros((L, L), dtype=np.float64)
    counts = np.zeros((L, L), dtype=np.int64)

    for di, direction in enumerate(bundle.directions):
        z = encode(blocks, bundle.encoders[direction], spec.subpatch_side).values
        pool = bank.pools[direction]
        pool_t = torch.from_numpy(np.ascontiguousarray(pool, dtype=np.float32))
        predictor = bundle.predictors[direction]
        for k in offsets:
            pairs = directional_pairs(s, direction, k)
            contexts, targets, neg_idx, positions = [], [], [], []
            for pr in range(p):
                for pc in range(p):
                    for (cr, cc), (tr, tc) in pairs:
                        pos = (pr * r + tr, pc * r + tc)
                        contexts.append(z[pr, pc, cr, cc])
                        targets.append(z[pr, pc, tr, tc])
                        neg_idx.append(
                            _site_negatives(
                                pool, rng_seed, di, k, pos, n_negatives,
                                scope=negative_sampling_scope,
                            )
                        )
                        positions.append(pos)
            ctx_t = torch.from_numpy(np.stack(contexts).astype(np.float32))
            tgt_t = torch.from_numpy(np.stack(targets).astype(np.float32))
            negs = pool_t[torch.from_numpy(np.stack(neg_idx))]
            with torch.no_grad():
                losses = infonce_loss_many(
                    ctx_t, tgt_t, negs, predictor.matrix(k).to(torch.float32)
                ).numpy()
            for (row, col), loss in zip(positions, losses):
                sums[row, col] += loss
                counts[row, col] += 1

    values = np.full((L, L), np.nan)
    mask = counts > 0
    values[mask] = sums[mask] / counts[mask]
    return ScoreMap(values=values, counts=counts)


def image_score(score_map: ScoreMap, top_fraction: float = 0.05) -> float:
    """Mean of the top `top_fraction` of present per-position losses."""
    vals = score_map.present_values()
    if vals.size == 0:
        raise EmptyScoreMapError("score map has no present positions")
    m = max(1, int(np.ceil(top_fraction * vals.size)))
    top = np.sort(vals)[-m:]
    return float(top.mean())


def make_mask(score_map: ScoreMap, spec: GridSpec) -> AnomalyMask:
    """Spread per-position losses over their pixel footprints; each pixel
    gets the mean of the present positions covering it."""
    sums = np.zeros((spec.image_side, spec.image_side), dtype=np.float64)
    cover = np.zeros((spec.image_side, spec.image_side), dtype=np.int64)
    for row, col in zip(*np.nonzero(score_map.present)):
        top, left, h, w = pixel_footprint((row, col), spec)
        sums[top : top + h, left : left + w] += score_map.values[row, col]
        cover[top : top + h, left : left + w] += 1
    heatmap = np.zeros_like(sums)
    covered = cover > 0
    heatmap[covered] = sums[covered] / cover[covered]
    return AnomalyMask(heatmap=heatmap)


def classify(score: float, tau: float) -> str:
    """Threshold rule: anomalous iff score >= tau (boundary included)."""
    return ANOMALOUS_LABEL if score >= tau else NORMAL_LABEL
