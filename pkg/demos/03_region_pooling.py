"""
Regions: grids of boxes, crops and RoI Align
============================================

Boxes are normalized to [0, 1]. A feature grid cell (i, j) is centered at
((j + 0.5) / W, (i + 0.5) / H), and RoI Align averages bilinear samples at
regular positions inside the box.
"""

import numpy as np

from decouple_distill.numerics import Rng
from decouple_distill.region_ops import (
    RegionBox,
    crop_resize,
    grid_regions,
    mask_pool,
    roi_align,
    roi_matrix,
    sample_grid,
)

# %% a 2x3 partition of the image, row-major
for box in grid_regions(2, 3):
    print(f"({box.x0:.3f}, {box.y0:.3f}) - ({box.x1:.3f}, {box.y1:.3f})")

# %% sampled grids vary per call but depend only on the seed
for step in range(3):
    regions = sample_grid(Rng(0).child(step), 1, 6)
    print(f"step {step}: {len(regions)} regions, grid {regions.shape}")

# %% pooling a linear ramp gives the ramp value at the box center
grid = np.arange(4, dtype=float)[None, :, None] * np.ones((4, 1, 1))  # value = column index
box = RegionBox(0.25, 0.0, 0.75, 1.0)
print("ramp pooled over the middle half:", roi_align(grid, box, bins=2, samples_per_bin_axis=2))

# %% pooling is a fixed linear map, which is what makes it differentiable
feat = np.random.default_rng(0).normal(size=(4, 4, 5))
boxes = list(grid_regions(2, 2))
m = roi_matrix(boxes, 4, 4, dtype=np.float64)
print("matrix form matches roi_align:",
      np.allclose(m @ feat.reshape(16, 5), [roi_align(feat, b) for b in boxes]))
print("full box vs grid mean:", np.abs(roi_align(feat, RegionBox(0, 0, 1, 1), 4, 4) - feat.mean((0, 1))).max())
quadrant = np.zeros((4, 4), bool)
quadrant[:2, :2] = True
print("mask pool of the top-left quadrant equals its mean:",
      np.allclose(mask_pool(feat, quadrant), feat[:2, :2].mean((0, 1))))

# %% crops are bilinear resamples with the same center convention
img = np.random.default_rng(1).uniform(size=(64, 64, 3))
crop = crop_resize(img, RegionBox(0, 0, 0.5, 0.5), 64)
print("crop", crop.shape, "top-left pixel close to source:", np.abs(crop[0, 0] - img[0, 0]).max() < 0.5)
