import itertools
import math

import numpy as np
import pytest

from decouple_distill.numerics import Rng
from decouple_distill.region_ops import (
    RegionBox,
    crop_resize,
    grid_regions,
    mask_pool,
    mask_to_grid,
    roi_align,
    roi_matrix,
    sample_grid,
)


def bilinear64(grid, x, y):
    h, w = grid.shape[:2]
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return ((1 - fy) * ((1 - fx) * grid[y0, x0] + fx * grid[y0, x1])
            + fy * ((1 - fx) * grid[y1, x0] + fx * grid[y1, x1]))


def dense_oracle(grid, box, n=100):
    """Mean of n*n regularly spaced bilinear samples over the box."""
    h, w = grid.shape[:2]
    acc = np.zeros(grid.shape[-1])
    for a in range(n):
        y = (box.y0 + (a + 0.5) / n * (box.y1 - box.y0)) * h - 0.5
        for b in range(n):
            x = (box.x0 + (b + 0.5) / n * (box.x1 - box.x0)) * w - 0.5
            acc += bilinear64(grid, x, y)
    return acc / (n * n)


def random_box(rng):
    x0, x1 = sorted(rng.uniform(0, 1, 2))
    y0, y1 = sorted(rng.uniform(0, 1, 2))
    return RegionBox(x0, y0, max(x1, x0 + 1e-3), max(y1, y0 + 1e-3))


def test_box_validation():
    with pytest.raises(ValueError):
        RegionBox(0.5, 0, 0.5, 1)
    with pytest.raises(ValueError):
        RegionBox(0, 0, 1.2, 1)


def test_degenerate_and_small_grids():
    rs = grid_regions(1, 1)
    assert [b.as_tuple() for b in rs] == [(0, 0, 1, 1)]
    rs = grid_regions(2, 3)
    assert len(rs) == 6
    assert all(b.area == pytest.approx(1 / 6) for b in rs)
    assert rs.boxes[1].as_tuple() == pytest.approx((1 / 3, 0, 2 / 3, 0.5))


@pytest.mark.parametrize("m,n", list(itertools.product(range(1, 7), repeat=2)))
def test_grid_tiles_unit_square(m, n):
    boxes = grid_regions(m, n).boxes
    assert sum(b.area for b in boxes) == pytest.approx(1.0, abs=1e-12)
    for a, b in itertools.combinations(boxes, 2):
        ox = min(a.x1, b.x1) - max(a.x0, b.x0)
        oy = min(a.y1, b.y1) - max(a.y0, b.y0)
        assert ox <= 1e-12 or oy <= 1e-12


def test_sample_grid_frequencies():
    counts = np.zeros(7)
    rng = Rng(0)
    for _ in range(10_000):
        rs = sample_grid(rng, 1, 6)
        counts[rs.shape[0]] += 1
    freq = counts[1:] / counts.sum()
    assert np.all(np.abs(freq - 1 / 6) < 0.02)
    with pytest.raises(ValueError):
        sample_grid(rng, 3, 2)


def test_crop_resize_identity_and_constant(rng):
    img = rng.uniform(size=(16, 16, 3)).astype(np.float32)
    np.testing.assert_allclose(crop_resize(img, RegionBox(0, 0, 1, 1), 16), img, atol=1e-6)
    const = np.full((16, 16, 3), 0.4)
    np.testing.assert_allclose(crop_resize(const, RegionBox(0.1, 0.3, 0.7, 0.9), 9), 0.4, atol=1e-7)


def test_crop_resize_ramp():
    W = 16
    ramp = np.tile(np.arange(W, dtype=np.float64), (W, 1))[..., None].repeat(3, axis=2)
    out = crop_resize(ramp, RegionBox(0, 0, 0.5, 1), W)
    u = np.arange(W)
    expected = np.clip((u + 0.5) / 2 - 0.5, 0, W - 1)
    np.testing.assert_allclose(out[5, :, 0], expected, atol=1e-9)


def test_roi_align_constant_and_cell(rng):
    const = np.full((5, 5, 3), -1.5)
    np.testing.assert_allclose(roi_align(const, random_box(rng), 2, 3), -1.5, atol=1e-6)
    grid = rng.normal(size=(4, 6, 3))
    box = RegionBox(2 / 6, 1 / 4, 3 / 6, 2 / 4)
    np.testing.assert_allclose(roi_align(grid, box, 1, 1), grid[1, 2], atol=1e-6)


def test_roi_align_dense_sampling_oracle(rng):
    for _ in range(10):
        grid = rng.normal(size=(6, 6, 4))
        box = random_box(rng)
        np.testing.assert_allclose(roi_align(grid, box, 5, 20), dense_oracle(grid, box), atol=1e-3)


def test_roi_align_translation(rng):
    grid = rng.normal(size=(6, 6, 2))
    shifted = np.zeros_like(grid)
    shifted[:, 1:] = grid[:, :-1]
    box = RegionBox(1 / 6, 1 / 6, 3.5 / 6, 4 / 6)
    moved = RegionBox(2 / 6, 1 / 6, 4.5 / 6, 4 / 6)
    np.testing.assert_allclose(roi_align(grid, box, 2, 2), roi_align(shifted, moved, 2, 2), atol=1e-6)


def test_full_box_mean(rng):
    grid = rng.normal(size=(5, 5, 3))
    full = RegionBox(0, 0, 1, 1)
    np.testing.assert_allclose(roi_align(grid, full, 5, 4), grid.mean(axis=(0, 1)), atol=1e-2)
    np.testing.assert_allclose(
        mask_pool(grid, np.ones((5, 5))), roi_align(grid, full, 5, 2), atol=5e-2
    )


def test_roi_matrix_matches_roi_align(rng):
    grid = rng.normal(size=(4, 4, 3))
    boxes = [random_box(rng) for _ in range(5)]
    R = roi_matrix(boxes, 4, 4, 2, 2, dtype=np.float64)
    np.testing.assert_allclose(R.sum(axis=1), 1, atol=1e-12)
    pooled = R @ grid.reshape(16, 3)
    for b, v in zip(boxes, pooled):
        np.testing.assert_allclose(v, roi_align(grid, b, 2, 2), atol=1e-6)


def test_mask_pool(rng):
    grid = rng.normal(size=(4, 5, 3))
    np.testing.assert_allclose(mask_pool(grid, np.ones((4, 5))), grid.mean(axis=(0, 1)), atol=1e-6)
    one = np.zeros((4, 5), bool)
    one[2, 3] = True
    np.testing.assert_allclose(mask_pool(grid, one), grid[2, 3], atol=1e-7)
    m = rng.uniform(size=(4, 5)) > 0.5
    m[0, 0] = True
    ref = sum(grid[i, j].astype(np.float64) for i in range(4) for j in range(5) if m[i, j]) / m.sum()
    np.testing.assert_allclose(mask_pool(grid.astype(np.float32), m), ref, atol=1e-6)
    with pytest.raises(ValueError, match="empty"):
        mask_pool(grid, np.zeros((4, 5)))


def test_mask_to_grid():
    m = np.zeros((8, 8), bool)
    m[0:4, 0:4] = True
    np.testing.assert_array_equal(mask_to_grid(m, 2, 2), [[True, False], [False, False]])
    tiny = np.zeros((8, 8), bool)
    tiny[6, 7] = True
    assert mask_to_grid(tiny, 2, 2).tolist() == [[False, False], [False, True]]
