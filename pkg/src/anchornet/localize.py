"""Patch selection on class activation maps.

``lip`` greedily picks high-activation locations whose mapped patches
overlap every already-picked patch with IoU below a threshold.
``decide_class``/``select_branch`` turn per-branch class distributions into
the final class and the branch whose map gets localized.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument, OutOfBounds
from .rf import PatchRect, RFSummary, as_pair, map_location


@dataclass
class Heatmap:
    """A class-specific activation grid plus the geometry of the branch that made it.

    1D maps (text) are stored as shape ``(L,)`` and treated as a ``1 x L`` grid.
    """

    values: np.ndarray
    geometry: RFSummary
    class_index: int = 0
    branch: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim not in (1, 2) or self.values.size == 0:
            raise InvalidArgument(f"heatmap must be a non-empty 1D or 2D grid, got {self.values.shape}")
        if self.geometry.out_size is None:
            raise InvalidArgument("heatmap geometry needs an input size")
        if self.grid.shape != tuple(self.geometry.out_size):
            raise InvalidArgument(
                f"heatmap shape {self.values.shape} does not match branch output {self.geometry.out_size}"
            )

    @property
    def grid(self) -> np.ndarray:
        return self.values if self.values.ndim == 2 else self.values[None, :]

    def patch(self, row: int, col: int) -> PatchRect:
        return map_location((row, col), self.geometry)


@dataclass(frozen=True)
class LipParams:
    K: int
    T: float
    P: float

    def __post_init__(self):
        if self.K < 1:
            raise InvalidArgument(f"K must be >= 1, got {self.K}")
        if not 0.0 <= self.T <= 1.0:
            raise InvalidArgument(f"T must lie in [0, 1], got {self.T}")
        if not 0.0 < self.P <= 1.0:
            raise InvalidArgument(f"P must lie in (0, 1], got {self.P}")


# per-branch settings keyed by receptive field
TEST_REGIME = {63: LipParams(12, 0.5, 0.05), 95: LipParams(5, 0.5, 0.05), 111: LipParams(4, 0.5, 0.05)}
TRAIN_REGIME = {63: LipParams(24, 0.8, 0.3), 95: LipParams(10, 0.8, 0.3), 111: LipParams(8, 0.8, 0.3)}


def area_k(in_size, rf) -> int:
    """Largest K whose patches cannot out-area the input: ``floor(H*W / (rf_h*rf_w))``."""
    h, w = as_pair(in_size)
    rh, rw = as_pair(rf)
    return max(1, (h * w) // (rh * rw))


@dataclass(frozen=True)
class SelectedPatch:
    rect: PatchRect
    activation: float
    coord: tuple[int, int]


@dataclass
class PatchSet:
    patches: list[SelectedPatch]
    visited: int = 0

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    @property
    def rects(self) -> list[PatchRect]:
        return [p.rect for p in self.patches]


def iou(a: PatchRect, b: PatchRect) -> float:
    """Intersection over union of two pixel rectangles (exact integer counts)."""
    if a.area <= 0 or b.area <= 0:
        raise InvalidArgument("IoU needs rectangles with positive area")
    ih = max(0, min(a.bottom, b.bottom) - max(a.top, b.top))
    iw = max(0, min(a.right, b.right) - max(a.left, b.left))
    inter = ih * iw
    return inter / (a.area + b.area - inter)


def visit_budget(n_cells: int, fraction: float) -> int:
    # the 1e-9 guard keeps e.g. 100 * 0.07 = 7.000000000000001 from rounding up to 8
    return min(n_cells, max(1, math.ceil(n_cells * fraction - 1e-9)))


def descending_order(values: np.ndarray) -> np.ndarray:
    """Flat row-major indices by decreasing value; ties keep row-major order."""
    return np.argsort(-values.ravel(), kind="stable")


def lip(heatmap: Heatmap, params: LipParams) -> PatchSet:
    """Localize informative patches on one heatmap.

    Visits at most ``ceil(H*W*P)`` locations (the first included) in decreasing
    activation order and keeps a location when its patch has IoU < T with every
    kept patch; stops once K patches are kept.
    """
    grid = heatmap.grid
    H, W = grid.shape
    order = descending_order(grid)
    budget = visit_budget(H * W, params.P)

    # All patches of one branch share a size, so IoU depends only on the grid
    # offset between two locations; precompute which offsets block a candidate.
    geo = heatmap.geometry
    rh = min(H, -(-geo.rf[0] // geo.jump[0]))
    rw = min(W, -(-geo.rf[1] // geo.jump[1]))
    if params.T <= 0.0:
        table = np.ones((2 * H - 1, 2 * W - 1), dtype=bool)
        rh, rw = H, W
    else:
        base = PatchRect(0, 0, geo.rf[0], geo.rf[1])
        table = np.zeros((2 * rh - 1, 2 * rw - 1), dtype=bool)
        for dr in range(-rh + 1, rh):
            for dc in range(-rw + 1, rw):
                other = PatchRect(dr * geo.jump[0], dc * geo.jump[1], geo.rf[0], geo.rf[1])
                table[dr + rh - 1, dc + rw - 1] = iou(base, other) >= params.T
    blocked = np.zeros((H + 2 * (rh - 1), W + 2 * (rw - 1)), dtype=bool)

    kept: list[SelectedPatch] = []
    visited = 0
    for flat in order[:budget]:
        visited += 1
        r, c = divmod(int(flat), W)
        if blocked[r + rh - 1, c + rw - 1]:
            continue
        kept.append(SelectedPatch(heatmap.patch(r, c), float(grid[r, c]), (r, c)))
        if len(kept) == params.K:
            break
        blocked[r:r + 2 * rh - 1, c:c + 2 * rw - 1] |= table
    return PatchSet(kept, visited)


@dataclass(frozen=True)
class Decision:
    gamma: int
    labels: tuple[int, ...]
    confidences: tuple[float, ...]


def decide_class(branch_probs: Sequence[Sequence[float]]) -> Decision:
    """Final class: a class predicted by >= 2 branches, else the most confident branch's."""
    if len(branch_probs) == 0:
        raise InvalidArgument("need at least one branch distribution")
    dists = [np.asarray(p, dtype=np.float64) for p in branch_probs]
    labels = tuple(int(np.argmax(p)) for p in dists)
    conf = tuple(float(np.max(p)) for p in dists)
    votes = Counter(labels)
    majority = [y for y, n in votes.items() if n >= 2]
    if majority:
        gamma = min(majority, key=lambda y: (-votes[y], y))
    else:
        gamma = labels[int(np.argmax(conf))]
    return Decision(gamma, labels, conf)


def select_branch(gamma: int, branch_probs: Sequence[Sequence[float]]) -> int:
    """Index of the most confident branch whose top probability is that of ``gamma``.

    Ties go to the lowest branch index.
    """
    scores = []
    for p in branch_probs:
        p = np.asarray(p, dtype=np.float64)
        top = float(np.max(p))
        scores.append(top if top == float(p[gamma]) else 0.0)
    return int(np.argmax(scores))


def top1_text_patch(class_map, gamma: int, geometry: RFSummary | int) -> PatchRect:
    """Span of the branch receptive field starting at the argmax of column ``gamma``."""
    column = np.asarray(class_map.data if hasattr(class_map, "data") else class_map)[:, gamma]
    rf = geometry if isinstance(geometry, int) else geometry.rf[1]
    return PatchRect.span(int(np.argmax(column)), rf)


def _rects(patch_set) -> list[PatchRect]:
    if isinstance(patch_set, PatchSet):
        return patch_set.rects
    return [p.rect if isinstance(p, SelectedPatch) else p for p in patch_set]


def _media_hw(media: np.ndarray) -> tuple[int, int]:
    return (1, media.shape[0]) if media.ndim == 1 else media.shape[:2]


def _check_inside(rect: PatchRect, media: np.ndarray) -> None:
    if not rect.inside(_media_hw(media)):
        raise OutOfBounds(f"{rect} lies outside media of size {_media_hw(media)}")


def extract_patches(media, patch_set) -> list[np.ndarray]:
    """Copy out each patch; 1D media (token sequences) are sliced by span."""
    media = np.asarray(media)
    out = []
    for rect in _rects(patch_set):
        _check_inside(rect, media)
        if media.ndim == 1:
            out.append(media[rect.left:rect.right].copy())
        else:
            out.append(media[rect.top:rect.bottom, rect.left:rect.right].copy())
    return out


def mask_patches(media, patch_set, fill=0) -> np.ndarray:
    """Copy of ``media`` with every patch region set to ``fill``."""
    media = np.array(media)
    for rect in _rects(patch_set):
        _check_inside(rect, media)
        if media.ndim == 1:
            media[rect.left:rect.right] = fill
        else:
            media[rect.top:rect.bottom, rect.left:rect.right] = fill
    return media


def covered_mask(shape, patch_set) -> np.ndarray:
    """Boolean union of the patches over a grid of ``shape`` (H, W) or (L,)."""
    mask = np.zeros(shape, dtype=bool)
    return mask_patches(mask, patch_set, fill=True)


def ensemble_predict(distributions: Iterable[Sequence[float]]) -> int:
    """Argmax of the summed per-patch class distributions."""
    dists = [np.asarray(d, dtype=np.float64) for d in distributions]
    if not dists:
        raise InvalidArgument("ensemble needs at least one distribution")
    return int(np.argmax(np.sum(dists, axis=0)))
