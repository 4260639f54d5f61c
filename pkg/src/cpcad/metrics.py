"""Threshold-free evaluation: detection and pixel-wise AUROC.

AUROC uses the midrank tie convention: a tied (anomalous, normal) pair
contributes 0.5.  The rank-based computation is O(n log n) and equals the
pairwise definition exactly.
"""

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateLabelsError, ShapeError

ANOMALOUS = "anomalous"
NORMAL = "normal"


@dataclass
class RocResult:
    auroc: float
    curve: np.ndarray  # (n_points, 2) of (fpr, tpr), from (0,0) to (1,1)
    n_pos: int
    n_neg: int


def _as_positive_mask(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind in "bifu":
        return labels.astype(bool)
    return labels == ANOMALOUS


def _roc(scores: np.ndarray, positive: np.ndarray) -> RocResult:
    n_pos = int(positive.sum())
    n_neg = int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError(
            f"need both classes, got {n_pos} positives and {n_neg} negatives"
        )
    ranks = rankdata(scores, method="average")
    auc = (ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    # staircase: sweep thresholds downward over the distinct scores
    order = np.argsort(scores)[::-1]
    sorted_pos = positive[order]
    sorted_scores = scores[order]
    tp = np.cumsum(sorted_pos)
    fp = np.cumsum(~sorted_pos)
    distinct = np.nonzero(np.diff(sorted_scores))[0]
    cut = np.concatenate([distinct, [len(sorted_scores) - 1]])
    tpr = np.concatenate([[0.0], tp[cut] / n_pos])
    fpr = np.concatenate([[0.0], fp[cut] / n_neg])
    return RocResult(
        auroc=float(auc),
        curve=np.column_stack([fpr, tpr]),
        n_pos=n_pos,
        n_neg=n_neg,
    )


def auroc(scores: Sequence[float], labels) -> RocResult:
    """Image-level detection AUROC; anomalous is the positive class."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = _as_positive_mask(labels)
    if scores.shape != positive.shape:
        raise ShapeError(
            f"scores {scores.shape} and labels {positive.shape} differ in length"
        )
    return _roc(scores, positive)


def pairwise_auroc(scores, labels) -> float:
    """O(n^2) reference form of the same statistic: mean over all
    (anomalous, normal) pairs of 1 / 0.5 / 0 for win / tie / loss."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = _as_positive_mask(labels)
    pos, neg = scores[positive], scores[~positive]
    if pos.size == 0 or neg.size == 0:
        raise DegenerateLabelsError("need both classes")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def pixel_auroc(
    heatmaps: List[np.ndarray],
    gt_masks: List[np.ndarray],
    per_image_mean: bool = False,
) -> RocResult:
    """Pixel-level segmentation AUROC.

    Default pools all pixels of all images into one population; with
    per_image_mean=True, per-image AUROCs are averaged instead (images
    without both pixel classes are skipped).
    """
    if len(heatmaps) != len(gt_masks):
        raise ShapeError("heatmap/ground-truth list lengths differ")
    for hm, gt in zip(heatmaps, gt_masks):
        if hm.shape != gt.shape:
            raise ShapeError(f"heatmap {hm.shape} vs ground truth {gt.shape}")

    if per_image_mean:
        per_image = []
        for hm, gt in zip(heatmaps, gt_masks):
            pos = np.asarray(gt).astype(bool).ravel()
            if pos.any() and not pos.all():
                per_image.append(_roc(hm.ravel().astype(np.float64), pos))
        if not per_image:
            raise DegenerateLabelsError("no image has both pixel classes")
        mean_auc = float(np.mean([r.auroc for r in per_image]))
        return RocResult(
            auroc=mean_auc,
            curve=np.array([[0.0, 0.0], [1.0, 1.0]]),
            n_pos=sum(r.n_pos for r in per_image),
            n_neg=sum(r.n_neg for r in per_image),
        )

    scores = np.concatenate([hm.ravel().astype(np.float64) for hm in heatmaps])
    positive = np.concatenate([np.asarray(gt).astype(bool).ravel() for gt in gt_masks])
    return _roc(scores, positive)
