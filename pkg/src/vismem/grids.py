"""Core numeric primitives: vectors, feature grids, scalar maps, and geometry.

Vectors are 1-D float32 arrays, feature grids are (H, W, D) float32 arrays,
scalar maps are (H, W) float32 arrays. Storage is 32-bit; reductions
accumulate in float64. Normalized image coordinates live in [0, 1] with the
cell-center convention: cell (r, c) of an HxW grid is centered at
((c + 0.5) / W, (r + 0.5) / H).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError

# Norms at or below this are treated as zero (degenerate) rather than divided by.
EPS_NORM = 1e-12


def as_vector(v) -> np.ndarray:
    """Coerce to a finite 1-D float32 vector."""
    arr = np.asarray(v, dtype=np.float32)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInputError(f"expected a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("vector contains non-finite entries")
    return arr


def as_grid(g) -> np.ndarray:
    """Coerce to a finite (H, W, D) float32 feature grid."""
    arr = np.asarray(g, dtype=np.float32)
    if arr.ndim != 3 or min(arr.shape) == 0:
        raise InvalidInputError(f"expected a non-empty (H, W, D) grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("feature grid contains non-finite entries")
    return arr


def as_scalar_map(m) -> np.ndarray:
    """Coerce to a finite (H, W) float32 scalar map."""
    arr = np.asarray(m, dtype=np.float32)
    if arr.ndim != 2 or min(arr.shape) == 0:
        raise InvalidInputError(f"expected a non-empty (H, W) map, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("scalar map contains non-finite entries")
    return arr


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned box in normalized [0, 1] coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise InvalidInputError(
                f"invalid box ({self.x0}, {self.y0}, {self.x1}, {self.y1})"
            )

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def center(self) -> "Point2D":
        return Point2D(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def iou(self, other: "Box2D") -> float:
        ix = max(0.0, min(self.x1, other.x1) - max(self.x0, other.x0))
        iy = max(0.0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class Point2D:
    """Point in normalized [0, 1] coordinates."""

    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise InvalidInputError(f"point ({self.x}, {self.y}) outside [0, 1]^2")


def l2_normalize(v) -> np.ndarray:
    """Scale v to unit L2 norm. Near-zero vectors map to the zero vector."""
    v = as_vector(v)
    norm = float(np.linalg.norm(v.astype(np.float64)))
    if norm <= EPS_NORM:
        return np.zeros_like(v)
    return (v.astype(np.float64) / norm).astype(np.float32)


def inner(a, b) -> float:
    """Inner product, accumulated in float64."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.dot(a.astype(np.float64), b.astype(np.float64)))


def weighted_combine(vectors, weights) -> np.ndarray:
    """Weighted sum of equal-dimension vectors. No normalization."""
    if len(vectors) == 0 or len(vectors) != len(weights):
        raise InvalidInputError("vectors and weights must be equal-length and non-empty")
    vecs = [as_vector(v) for v in vectors]
    dim = vecs[0].shape[0]
    if any(v.shape[0] != dim for v in vecs):
        raise InvalidInputError("all vectors must share one dimension")
    acc = np.zeros(dim, dtype=np.float64)
    for w, v in zip(weights, vecs):
        acc += float(w) * v.astype(np.float64)
    return acc.astype(np.float32)


def cell_centers(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized (x, y) center coordinates of every cell, each shaped (H, W)."""
    cx = (np.arange(width, dtype=np.float64) + 0.5) / width
    cy = (np.arange(height, dtype=np.float64) + 0.5) / height
    return np.broadcast_to(cx, (height, width)), np.broadcast_to(cy[:, None], (height, width))


def mean_pool_region(grid, box: Box2D) -> np.ndarray:
    """Mean of grid cells whose centers fall inside box.

    Falls back to the single cell containing the box center when no cell
    center is covered (very small boxes).
    """
    grid = as_grid(grid)
    h, w, _ = grid.shape
    cx, cy = cell_centers(h, w)
    mask = (cx >= box.x0) & (cx <= box.x1) & (cy >= box.y0) & (cy <= box.y1)
    if not mask.any():
        center = box.center
        r = min(h - 1, int(center.y * h))
        c = min(w - 1, int(center.x * w))
        return grid[r, c].copy()
    return grid[mask].astype(np.float64).mean(axis=0).astype(np.float32)


def bilinear_sample(grid, p: Point2D) -> np.ndarray:
    """Bilinear interpolation of the four surrounding cell-center features.

    Coordinates are clamped to the cell-center range at the borders, so
    corner samples reduce to the corner cell's feature.
    """
    grid = as_grid(grid)
    h, w, _ = grid.shape
    gx = min(max(p.x * w - 0.5, 0.0), w - 1.0)
    gy = min(max(p.y * h - 0.5, 0.0), h - 1.0)
    c0 = int(math.floor(gx))
    r0 = int(math.floor(gy))
    c1 = min(c0 + 1, w - 1)
    r1 = min(r0 + 1, h - 1)
    fx = gx - c0
    fy = gy - r0
    g = grid.astype(np.float64)
    top = (1.0 - fx) * g[r0, c0] + fx * g[r0, c1]
    bot = (1.0 - fx) * g[r1, c0] + fx * g[r1, c1]
    return ((1.0 - fy) * top + fy * bot).astype(np.float32)


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian kernel with radius ceil(3*sigma), float64."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_smooth(scalar_map, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding. sigma=0 is a no-op copy."""
    scalar_map = as_scalar_map(scalar_map)
    if sigma < 0:
        raise InvalidInputError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return scalar_map.copy()
    kernel = gaussian_kernel_1d(sigma)
    out = scalar_map.astype(np.float64)
    # scipy's "reflect" mode (d c b a | a b c d) conserves total mass.
    out = ndimage.correlate1d(out, kernel, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="reflect")
    return out.astype(np.float32)


def minmax_rescale(scalar_map) -> np.ndarray:
    """Affine rescale to [0, 1]. A (near-)constant map rescales to all zeros."""
    scalar_map = as_scalar_map(scalar_map)
    lo = float(scalar_map.min())
    hi = float(scalar_map.max())
    if hi - lo <= EPS_NORM:
        return np.zeros_like(scalar_map)
    return ((scalar_map.astype(np.float64) - lo) / (hi - lo)).astype(np.float32)


def layer_norm(v, gain, bias, eps: float = 1e-5) -> np.ndarray:
    """Layer normalization over the feature dimension with population variance."""
    v = as_vector(v)
    gain = as_vector(gain)
    bias = as_vector(bias)
    if not (v.shape == gain.shape == bias.shape):
        raise InvalidInputError("v, gain and bias must share one dimension")
    if eps <= 0:
        raise InvalidInputError(f"eps must be > 0, got {eps}")
    x = v.astype(np.float64)
    mean = x.mean()
    var = x.var()
    normed = (x - mean) / math.sqrt(var + eps)
    return (normed * gain.astype(np.float64) + bias.astype(np.float64)).astype(np.float32)
