"""InfoNCE core: bilinear logits, the contrastive loss, directional pair
enumeration over a sub-patch grid, and train-time negative sampling.

One positive pair (context z_t, target z_{t+k}) is classified against N-1
negatives through a softmax over bilinear logits z^T W_k z_t; the loss is
the negative log-probability of the positive.  Each evaluated pair's loss
is attributed to the *target* sub-patch.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, GeometryError, SamplingError, ShapeError

DIRECTIONS = ("from_above", "from_below", "from_left", "from_right")


class DirectionalPredictor(nn.Module):
    """One prediction direction's bilinear matrices, one d x d W_k per offset."""

    def __init__(self, direction: str, offsets: Sequence[int], dim: int):
        super().__init__()
        if direction not in DIRECTIONS:
            raise ConfigError(f"unknown direction {direction!r}")
        offsets = tuple(sorted(int(k) for k in offsets))
        if not offsets or offsets[0] < 1:
            raise ConfigError(f"offsets must be positive integers, got {offsets}")
        self.direction = direction
        self.offsets = offsets
        self.dim = dim
        bound = 1.0 / np.sqrt(dim)
        self.matrices = nn.ParameterDict(
            {
                str(k): nn.Parameter(torch.empty(dim, dim).uniform_(-bound, bound))
                for k in offsets
            }
        )

    def matrix(self, k: int) -> torch.Tensor:
        if str(k) not in self.matrices:
            raise ConfigError(f"offset {k} not in predictor offsets {self.offsets}")
        return self.matrices[str(k)]


@dataclass
class ContrastiveBatch:
    context: np.ndarray  # z_t, (d,)
    target: np.ndarray  # z_{t+k}, (d,)
    negatives: List[np.ndarray]  # N-1 vectors z_j
    k: int
    direction: str

    def validate(self):
        d = len(self.context)
        if len(self.target) != d or any(len(z) != d for z in self.negatives):
            raise ShapeError("all batch vectors must share dimension d")
        if len(self.negatives) < 1:
            raise ConfigError("need at least one negative (N >= 2)")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def bilinear_score(z_a, z_b, w) -> torch.Tensor:
    """Logit z_a^T W z_b (exponentiation happens inside the loss)."""
    z_a, z_b, w = _as_tensor(z_a), _as_tensor(z_b), _as_tensor(w)
    if w.shape != (z_a.shape[-1], z_b.shape[-1]):
        raise ShapeError(
            f"W shape {tuple(w.shape)} incompatible with vectors "
            f"({z_a.shape[-1]}, {z_b.shape[-1]})"
        )
    return z_a @ w.to(z_a.dtype) @ z_b.to(z_a.dtype)


def infonce_loss(batch: ContrastiveBatch, predictor: DirectionalPredictor) -> torch.Tensor:
    """-log softmax probability of the positive pair, log-sum-exp stabilized."""
    batch.validate()
    w = predictor.matrix(batch.k)
    context = _as_tensor(batch.context)
    target = _as_tensor(batch.target)
    negatives = torch.stack([_as_tensor(z) for z in batch.negatives])
    dtype = w.dtype
    for t in (context, target, negatives):
        dtype = torch.promote_types(dtype, t.dtype)
    w = w.to(dtype)
    context, target = context.to(dtype), target.to(dtype)
    negatives = negatives.to(dtype)
    wc = w @ context
    pos = target @ wc
    neg = negatives @ wc
    logits = torch.cat([pos.reshape(1), neg])
    return torch.logsumexp(logits, dim=0) - pos


def infonce_loss_many(
    contexts: torch.Tensor,  # (M, d)
    targets: torch.Tensor,  # (M, d)
    negatives: torch.Tensor,  # (M, N-1, d)
    w: torch.Tensor,  # (d, d)
) -> torch.Tensor:
    """Vectorized InfoNCE over M evaluation sites; returns (M,) losses."""
    wc = contexts @ w.T  # (M, d), row m = W @ context_m
    pos = (targets * wc).sum(dim=1)  # (M,)
    neg = torch.einsum("mnd,md->mn", negatives, wc)  # (M, N-1)
    logits = torch.cat([pos.unsqueeze(1), neg], dim=1)
    return torch.logsumexp(logits, dim=1) - pos


def directional_pairs(
    side: int, direction: str, k: int
) -> List[Tuple[Tuple[int, int], Tuple[int, int]]]:
    """(context, target) local index pairs within one patch's side x side grid.

    from_above predicts downward (context (r, c) -> target (r+k, c));
    from_below the mirror; from_left / from_right analogous on columns.
    """
    if direction not in DIRECTIONS:
        raise ConfigError(f"unknown direction {direction!r}")
    if k < 1 or k >= side:
        raise GeometryError(f"offset k={k} does not fit a side-{side} grid")
    pairs = []
    for r in range(side):
        for c in range(side):
            if direction == "from_above" and r + k < side:
                pairs.append(((r, c), (r + k, c)))
            elif direction == "from_below" and r - k >= 0:
                pairs.append(((r, c), (r - k, c)))
            elif direction == "from_left" and c + k < side:
                pairs.append(((r, c), (r, c + k)))
            elif direction == "from_right" and c - k >= 0:
                pairs.append(((r, c), (r, c - k)))
    return pairs


def sample_negatives_train(
    pool: np.ndarray, exclude_index: int, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw `count` embeddings uniformly without replacement from the batch
    pool, excluding the positive target itself."""
    n = pool.shape[0]
    if n - 1 < count:
        raise SamplingError(
            f"pool of {n} embeddings cannot supply {count} negatives "
            f"excluding the target"
        )
    candidates = np.delete(np.arange(n), exclude_index)
    chosen = rng.choice(candidates, size=count, replace=False)
    return pool[chosen]


def sample_negative_indices(
    pool_size: int, exclude_index, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Index-level variant used by the trainer's vectorized path."""
    if pool_size - (1 if exclude_index is not None else 0) < count:
        raise SamplingError(
            f"pool of {pool_size} embeddings cannot supply {count} negatives"
        )
    if exclude_index is None:
        return rng.choice(pool_size, size=count, replace=False)
    candidates = np.delete(np.arange(pool_size), exclude_index)
    return rng.choice(candidates, size=count, replace=False)
