"""Dense heatmap priors and sparse anchors from a category prototype.

The heatmap is the per-cell inner product between unit-normalized input
features and the prototype, spatially smoothed and min-max rescaled to
[0, 1]. Anchors are its local maxima after greedy distance-based suppression,
in descending response order. A training-time shortcut derives anchors
directly from ground-truth box centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .grids import Box2D, Point2D, as_grid, gaussian_smooth, minmax_rescale
from .retrieval import Prototype

DEFAULT_SIGMA = 1.0
DEFAULT_PEAK_THRESHOLD = 0.5
DEFAULT_RADIUS_CELLS = 3.0
DEFAULT_MAX_ANCHORS = 10


@dataclass
class DensePrior:
    category: str
    heatmap: np.ndarray  # (H, W) in [0, 1]
    sigma: float


@dataclass
class AnchorSet:
    category: str
    anchors: list[tuple[Point2D, float]]  # (point, response), response descending

    def __len__(self) -> int:
        return len(self.anchors)

    def points(self) -> list[Point2D]:
        return [p for p, _ in self.anchors]


def radius_cells_to_normalized(radius_cells: float, height: int, width: int) -> float:
    """Convert a suppression radius in grid cells to normalized coordinates."""
    return radius_cells / max(height, width)


def dense_prior(grid, proto: Prototype, sigma: float = DEFAULT_SIGMA) -> DensePrior:
    """Smoothed, rescaled compatibility heatmap between grid cells and prototype."""
    grid = as_grid(grid)
    if grid.shape[2] != proto.vector.shape[0]:
        raise InvalidInputError(
            f"grid dim {grid.shape[2]} != prototype dim {proto.vector.shape[0]}"
        )
    if proto.is_empty:
        h, w, _ = grid.shape
        return DensePrior(category=proto.category,
                          heatmap=np.zeros((h, w), dtype=np.float32), sigma=sigma)
    g = grid.astype(np.float64)
    norms = np.linalg.norm(g, axis=2)
    safe = np.where(norms > 1e-12, norms, 1.0)
    normalized = g / safe[:, :, None]
    normalized[norms <= 1e-12] = 0.0
    raw = (normalized @ proto.vector.astype(np.float64)).astype(np.float32)
    heat = minmax_rescale(gaussian_smooth(raw, sigma))
    return DensePrior(category=proto.category, heatmap=heat, sigma=sigma)


def find_peaks(heatmap: np.ndarray, threshold: float) -> list[tuple[int, int, float]]:
    """Cells >= all 8 neighbors (out-of-bounds ignored) with response >= threshold.

    Returned sorted by (response desc, row asc, col asc).
    """
    h, w = heatmap.shape
    hm = heatmap.astype(np.float64)
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = hm
    is_peak = np.ones((h, w), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            is_peak &= hm >= padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
    is_peak &= hm >= threshold
    rows, cols = np.nonzero(is_peak)
    peaks = [(int(r), int(c), float(hm[r, c])) for r, c in zip(rows, cols)]
    peaks.sort(key=lambda p: (-p[2], p[0], p[1]))
    return peaks


def extract_anchors(prior: DensePrior, threshold: float = DEFAULT_PEAK_THRESHOLD,
                    radius: float | None = None,
                    max_anchors: int = DEFAULT_MAX_ANCHORS) -> AnchorSet:
    """Greedy distance-suppressed selection of heatmap peaks.

    radius is in normalized coordinates; defaults to 3 cells for the
    heatmap's resolution.
    """
    if not (0.0 <= threshold <= 1.0):
        raise InvalidInputError(f"threshold must be in [0, 1], got {threshold}")
    h, w = prior.heatmap.shape
    if radius is None:
        radius = radius_cells_to_normalized(DEFAULT_RADIUS_CELLS, h, w)
    if radius <= 0:
        raise InvalidInputError(f"radius must be > 0, got {radius}")
    accepted: list[tuple[Point2D, float]] = []
    for r, c, resp in find_peaks(prior.heatmap, threshold):
        if len(accepted) >= max_anchors:
            break
        pt = Point2D((c + 0.5) / w, (r + 0.5) / h)
        if all(math.hypot(pt.x - q.x, pt.y - q.y) >= radius for q, _ in accepted):
            accepted.append((pt, resp))
    return AnchorSet(category=prior.category, anchors=accepted)


def anchors_from_gt(boxes: list[Box2D], category: str) -> AnchorSet:
    """Training-time approximation: one unit-response anchor per box center."""
    return AnchorSet(category=category,
                     anchors=[(box.center, 1.0) for box in boxes])
