"""Attention and feature-correlation diagnostics.

Layers are 0-based. Attention maps are the head-averaged post-softmax
weights recorded by :func:`encoder.encode`; row/column 0 is [CLS].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncodeOutput
from .numerics import resize_bilinear, unit_rows


@dataclass
class HeatmapImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) uint8


def _layer_map(out: EncodeOutput, layer: int) -> np.ndarray:
    if not 0 <= layer < len(out.attn_maps):
        raise IndexError(f"layer {layer} out of range (model depth {len(out.attn_maps)})")
    return out.attn_maps[layer]


def _anchor_index(grid_shape, anchor) -> int:
    h, w = grid_shape
    r, c = anchor
    if not (0 <= r < h and 0 <= c < w):
        raise IndexError(f"anchor {anchor} outside the {h}x{w} grid")
    return r * w + c


def cls_attention(out: EncodeOutput, layer: int) -> np.ndarray:
    """[CLS] row of the layer's attention, patch columns only (length HW)."""
    return _layer_map(out, layer)[0, 1:]


def anchor_attention(out: EncodeOutput, layer: int, anchor) -> np.ndarray:
    m = _layer_map(out, layer)
    i = _anchor_index(out.dense.shape[:2], anchor)
    return m[1 + i, 1:]


def feature_correlation(source, anchor, layer: int | None = None) -> np.ndarray:
    """Cosine of the anchor token against every token of a grid.

    ``source`` is either an (H, W, D) grid (e.g. the decoupled content grid)
    or an :class:`EncodeOutput`, in which case ``layer`` picks a block output
    (default: the final dense features).
    """
    if isinstance(source, EncodeOutput):
        grid = source.dense if layer is None else source.block_outputs[layer].grid
    else:
        grid = np.asarray(source)
    h, w, d = grid.shape
    flat = unit_rows(grid.reshape(h * w, d).astype(np.float64))
    a = flat[_anchor_index((h, w), anchor)]
    return np.clip(flat @ a, -1, 1)


def proxy_columns(cls_row: np.ndarray, fraction: float) -> np.ndarray:
    t = max(1, int(round(fraction * cls_row.size)))
    return np.argsort(-cls_row, kind="stable")[:t]


def proxy_score(out_or_map, layer: int = 0, fraction: float = 0.02) -> float:
    """Mean attention mass that patch rows put on the top-``fraction`` patch
    columns ranked by [CLS] attention. Uniform attention scores about
    ``fraction``; every row collapsing onto one shared column scores 1.
    """
    m = _layer_map(out_or_map, layer) if isinstance(out_or_map, EncodeOutput) else np.asarray(out_or_map)
    cols = 1 + proxy_columns(m[0, 1:], fraction)
    return float(m[1:, cols].sum(axis=1).mean())


def render_heatmap(vec, grid_hw, out_px: int) -> HeatmapImage:
    """Reshape to the grid, bilinearly upsample to ``out_px`` square, min-max to 8 bit."""
    h, w = grid_hw
    v = np.asarray(vec, dtype=np.float64).reshape(h, w)
    up = resize_bilinear(v, out_px, out_px)
    lo, hi = up.min(), up.max()
    if hi - lo <= 0:
        pix = np.full((out_px, out_px), 128, dtype=np.uint8)
    else:
        pix = np.rint((up - lo) / (hi - lo) * 255).astype(np.uint8)
    return HeatmapImage(out_px, out_px, pix)
