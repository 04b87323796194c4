"""Region partitioning, crop-and-resize, RoI Align and mask pooling.

Boxes are normalized image coordinates end to end. A box edge at normalized
``x`` sits at continuous grid coordinate ``x * W - 0.5`` under the shared
cell-center convention of :mod:`numerics`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, as_float, bilinear_sample_many, bilinear_weights, resize_bilinear


@dataclass(frozen=True)
class RegionBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise ValueError(f"invalid box {self.as_tuple()}")

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass
class RegionSet:
    boxes: list
    origin: str = "grid"
    labels: list = field(default_factory=list)
    shape: tuple | None = None  # (m rows, n cols) for grid origin

    def __len__(self):
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)


def grid_regions(m: int, n: int) -> RegionSet:
    """``m`` rows by ``n`` columns of equal cells, row-major."""
    boxes = [
        RegionBox(j / n, i / m, (j + 1) / n, (i + 1) / m) for i in range(m) for j in range(n)
    ]
    return RegionSet(boxes, origin="grid", shape=(m, n))


def sample_grid(rng: Rng, lo: int = 1, hi: int = 6) -> RegionSet:
    if not 1 <= lo <= hi:
        raise ValueError(f"need 1 <= lo <= hi, got lo={lo} hi={hi}")
    m = int(rng.integers(lo, hi))
    n = int(rng.integers(lo, hi))
    return grid_regions(m, n)


def crop_resize(image, box: RegionBox, out: int) -> np.ndarray:
    """Bilinear resample of ``box`` of an (H, W, ch) image to ``out x out``."""
    return resize_bilinear(image, out, out, box.as_tuple())


def crop_resize_batch(image, boxes, out: int) -> np.ndarray:
    return np.stack([crop_resize(image, b, out) for b in boxes])


def roi_sample_points(box: RegionBox, h: int, w: int, bins: int = 1, samples: int = 2):
    """Sample coordinates (xs, ys), each of shape (bins*samples, bins*samples)."""
    if bins < 1 or samples < 1:
        raise ValueError("bins and samples must be >= 1")
    off = (np.arange(bins)[:, None] + (np.arange(samples)[None, :] + 0.5) / samples).ravel()
    off = off / bins
    xs = (box.x0 + off * (box.x1 - box.x0)) * w - 0.5
    ys = (box.y0 + off * (box.y1 - box.y0)) * h - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return xx, yy


def roi_align(feat, box: RegionBox, bins: int = 1, samples_per_bin_axis: int = 2) -> np.ndarray:
    """Pool one C-vector for ``box`` from an (H, W, C) grid.

    Each of the ``bins x bins`` bins averages ``samples_per_bin_axis**2``
    bilinear samples at regular offsets; the bins are then averaged. With
    equal sample counts per bin this is the plain mean of all samples.
    """
    feat = as_float(feat)
    h, w = feat.shape[:2]
    xx, yy = roi_sample_points(box, h, w, bins, samples_per_bin_axis)
    return bilinear_sample_many(feat, xx, yy).reshape(-1, feat.shape[-1]).mean(axis=0)


def roi_matrix(boxes, h: int, w: int, bins: int = 1, samples: int = 2, dtype=np.float32) -> np.ndarray:
    """(k, h*w) linear map taking a flattened grid to the k pooled region vectors.

    Used by the training path, where pooling must be differentiable.
    """
    rows = []
    for box in boxes:
        xx, yy = roi_sample_points(box, h, w, bins, samples)
        rows.append(bilinear_weights(h, w, xx, yy).mean(axis=0))
    return np.asarray(rows, dtype=dtype)


def mask_pool(feat, mask) -> np.ndarray:
    """Mean of feature vectors over the set cells of an (H, W) mask."""
    feat = as_float(feat)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != feat.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} != feature grid {feat.shape[:2]}")
    if not mask.any():
        raise ValueError("mask_pool: empty mask")
    return feat[mask].mean(axis=0)


def mask_to_grid(mask, h: int, w: int) -> np.ndarray:
    """Reduce a pixel mask to an (h, w) cell mask.

    A cell is set when at least half its pixels are set. If that leaves the
    grid empty, the single best-covered cell is kept so small objects still
    pool something.
    """
    mask = np.asarray(mask).astype(np.float64)
    H, W = mask.shape
    if H % h or W % w:
        cover = resize_bilinear(mask, h, w)
    else:
        cover = mask.reshape(h, H // h, w, W // w).mean(axis=(1, 3))
    out = cover >= 0.5
    if not out.any() and cover.max() > 0:
        out.flat[int(np.argmax(cover))] = True
    return out
