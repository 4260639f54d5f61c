"""Overlapping patch / sub-patch tiling with exact pixel bookkeeping.

An image of side ``image_side`` is tiled into overlapping patches of side
``patch_side`` (stride ``patch_stride``); each patch is tiled into
overlapping sub-patches of side ``subpatch_side`` (stride
``subpatch_stride``).  All sub-patches, across patches, live on one global
lattice with pitch ``subpatch_stride``; the same pixel rectangle can be
reached through several (patch, local) index pairs.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError


@dataclass(frozen=True)
class GridSpec:
    image_side: int
    patch_side: int
    patch_stride: int
    subpatch_side: int
    subpatch_stride: int

    @property
    def stride_ratio(self) -> int:
        """Global lattice steps per patch stride."""
        return self.patch_stride // self.subpatch_stride


@dataclass(frozen=True)
class GridLayout:
    spec: GridSpec
    patches_per_axis: int
    subpatches_per_patch_axis: int
    distinct_positions_per_axis: int


DEFAULT_SPEC = GridSpec(768, 256, 128, 64, 32)


def plan_grid(spec: GridSpec) -> GridLayout:
    """Validate a GridSpec and derive the tiling counts.

    Raises GeometryError when the patches or sub-patches do not tile the
    image exactly, or when patch offsets do not land on the global
    sub-patch lattice.
    """
    if spec.patch_side > spec.image_side or spec.subpatch_side > spec.patch_side:
        raise GeometryError(f"sides do not nest: {spec}")
    if spec.patch_stride <= 0 or spec.subpatch_stride <= 0:
        raise GeometryError(f"strides must be positive: {spec}")
    if (spec.image_side - spec.patch_side) % spec.patch_stride != 0:
        raise GeometryError(
            f"(image_side - patch_side) = {spec.image_side - spec.patch_side} "
            f"not divisible by patch_stride = {spec.patch_stride}"
        )
    if (spec.patch_side - spec.subpatch_side) % spec.subpatch_stride != 0:
        raise GeometryError(
            f"(patch_side - subpatch_side) = {spec.patch_side - spec.subpatch_side} "
            f"not divisible by subpatch_stride = {spec.subpatch_stride}"
        )
    if spec.patch_stride % spec.subpatch_stride != 0:
        raise GeometryError(
            f"patch_stride = {spec.patch_stride} not divisible by "
            f"subpatch_stride = {spec.subpatch_stride}; patches would not "
            f"align with the global sub-patch lattice"
        )
    return GridLayout(
        spec=spec,
        patches_per_axis=(spec.image_side - spec.patch_side) // spec.patch_stride + 1,
        subpatches_per_patch_axis=(spec.patch_side - spec.subpatch_side)
        // spec.subpatch_stride
        + 1,
        distinct_positions_per_axis=(spec.image_side - spec.subpatch_side)
        // spec.subpatch_stride
        + 1,
    )


def extract_subpatches(image: np.ndarray, layout: GridLayout) -> np.ndarray:
    """Cut an image into its (patch_row, patch_col, sub_row, sub_col) blocks.

    Returns an array of shape (P, P, S, S, side, side) where the block at
    (pr, pc, sr, sc) is the image rectangle with top-left corner
    (pr*patch_stride + sr*subpatch_stride, pc*patch_stride + sc*subpatch_stride).
    """
    spec = layout.spec
    if image.ndim != 2 or image.shape != (spec.image_side, spec.image_side):
        raise GeometryError(
            f"image shape {image.shape} does not match image_side {spec.image_side}"
        )
    side = spec.subpatch_side
    windows = np.lib.stride_tricks.sliding_window_view(image, (side, side))
    p = layout.patches_per_axis
    s = layout.subpatches_per_patch_axis
    # top-left offsets of every block on each axis
    offs = (
        np.arange(p)[:, None] * spec.patch_stride
        + np.arange(s)[None, :] * spec.subpatch_stride
    )  # (P, S)
    rows = offs[:, None, :, None]  # broadcast to (P, P, S, S)
    cols = offs[None, :, None, :]
    return windows[rows + np.zeros_like(cols), cols + np.zeros_like(rows)]


def global_position(patch_index, local_index, spec: GridSpec):
    """Map (patch, local sub-patch) indices to the global lattice position."""
    layout = plan_grid(spec)
    pr, pc = patch_index
    sr, sc = local_index
    p, s = layout.patches_per_axis, layout.subpatches_per_patch_axis
    if not (0 <= pr < p and 0 <= pc < p and 0 <= sr < s and 0 <= sc < s):
        raise GeometryError(
            f"indices {(patch_index, local_index)} out of bounds for {layout}"
        )
    r = spec.stride_ratio
    return (pr * r + sr, pc * r + sc)


def pixel_footprint(position, spec: GridSpec):
    """Pixel rectangle (top, left, height, width) covered by a lattice position."""
    row, col = position
    return (
        row * spec.subpatch_stride,
        col * spec.subpatch_stride,
        spec.subpatch_side,
        spec.subpatch_side,
    )


def coverage_counts(layout: GridLayout, present: np.ndarray = None) -> np.ndarray:
    """Per-pixel count of (present) lattice positions whose footprint covers it."""
    spec = layout.spec
    L = layout.distinct_positions_per_axis
    if present is None:
        present = np.ones((L, L), dtype=bool)
    counts = np.zeros((spec.image_side, spec.image_side), dtype=np.int64)
    for r, c in zip(*np.nonzero(present)):
        top, left, h, w = pixel_footprint((r, c), spec)
        counts[top : top + h, left : left + w] += 1
    return counts
