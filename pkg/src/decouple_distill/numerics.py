"""Deterministic numeric kernels shared by the rest of the package.

Storage and compute default to float32. Every kernel accepts float64 input
and stays in float64, which is how the verification oracles and the
finite-difference gradient check run.

Sampling convention (used by crop/resize, RoI Align and upsampling): cell
centers sit at integer coordinates, so cell ``(i, j)`` of a grid is at
``(x=j, y=i)``; coordinates outside ``[0, W-1] x [0, H-1]`` clamp to the
border.
"""

from __future__ import annotations

import numpy as np

FLOAT = np.float32


class NonFiniteError(ValueError):
    """Raised when a kernel receives NaN or Inf input."""


def as_float(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(FLOAT, copy=False)


def softmax_rows(m, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``scale * m`` with per-row max subtraction.

    Works on any array; the last axis is the row axis.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    m = as_float(m)
    finite = np.isfinite(m)
    if not finite.all():
        bad = np.argwhere(~finite.reshape(-1, m.shape[-1]).all(axis=1))
        raise NonFiniteError(f"softmax_rows: non-finite value in row {int(bad[0, 0])}")
    z = (m - m.max(axis=-1, keepdims=True)) * m.dtype.type(scale)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cosine(a, b) -> float:
    """Cosine similarity of two vectors, 0.0 if either has zero norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"cosine: length mismatch {a.size} vs {b.size}")
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def unit_rows(x) -> np.ndarray:
    """Normalize along the last axis; zero-norm rows stay zero."""
    x = as_float(x)
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    safe = np.where(n > 0, n, 1)
    return np.where(n > 0, x / safe, 0).astype(x.dtype, copy=False)


def cosine_matrix(a, b=None) -> np.ndarray:
    """Pairwise cosine between rows of ``a`` and rows of ``b`` (default ``a``)."""
    ua = unit_rows(a)
    ub = ua if b is None else unit_rows(b)
    return np.clip(ua @ ub.T, -1, 1)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> np.ndarray:
    """Layer normalization over the last axis."""
    x = as_float(x)
    gain = np.asarray(gain, dtype=x.dtype)
    bias = np.asarray(bias, dtype=x.dtype)
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ValueError(
            f"layer_norm: gain/bias length {gain.shape[-1]}/{bias.shape[-1]} "
            f"!= input length {x.shape[-1]}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + x.dtype.type(eps)) * gain + bias


def _corners(n: int, c):
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, n - 1)
    lo = np.floor(c).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    return lo, hi, c - lo


def bilinear_weights(h: int, w: int, xs, ys) -> np.ndarray:
    """Dense ``(n, h*w)`` matrix whose rows sample a flattened grid.

    Row ``k`` holds the four bilinear weights for the point ``(xs[k], ys[k])``.
    Multiplying by a flattened ``(h*w, D)`` grid gives the sampled vectors,
    which makes every sampling op a fixed linear map.
    """
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    x0, x1, fx = _corners(w, xs)
    y0, y1, fy = _corners(h, ys)
    n = xs.size
    out = np.zeros((n, h * w), dtype=np.float64)
    rows = np.arange(n)
    np.add.at(out, (rows, y0 * w + x0), (1 - fy) * (1 - fx))
    np.add.at(out, (rows, y0 * w + x1), (1 - fy) * fx)
    np.add.at(out, (rows, y1 * w + x0), fy * (1 - fx))
    np.add.at(out, (rows, y1 * w + x1), fy * fx)
    return out


def bilinear_sample_many(grid, xs, ys) -> np.ndarray:
    """Sample an ``H x W x D`` grid at many points; returns ``(*xs.shape, D)``."""
    grid = as_float(grid)
    h, w, d = grid.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.broadcast_to(np.asarray(ys, dtype=np.float64), xs.shape)
    x0, x1, fx = _corners(w, xs)
    y0, y1, fy = _corners(h, ys)
    fx = fx[..., None].astype(grid.dtype)
    fy = fy[..., None].astype(grid.dtype)
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bot = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def bilinear_sample(grid, x: float, y: float) -> np.ndarray:
    """Bilinear sample of an ``H x W x D`` grid at the continuous point (x, y)."""
    return bilinear_sample_many(grid, np.array(x), np.array(y))


def resize_bilinear(grid, out_h: int, out_w: int, box=None) -> np.ndarray:
    """Resample a box of ``grid`` to ``out_h x out_w`` output cells.

    ``box`` is ``(x0, y0, x1, y1)`` in normalized coordinates (default: the
    full grid). Output cell centers map back into the box proportionally, so
    the full box at the input size is the identity.
    """
    grid = as_float(grid)
    h, w = grid.shape[:2]
    x0, y0, x1, y1 = (0.0, 0.0, 1.0, 1.0) if box is None else box
    u = (np.arange(out_w) + 0.5) / out_w
    v = (np.arange(out_h) + 0.5) / out_h
    xs = (x0 + u * (x1 - x0)) * w - 0.5
    ys = (y0 + v * (y1 - y0)) * h - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    squeeze = grid.ndim == 2
    g = grid[..., None] if squeeze else grid
    out = bilinear_sample_many(g, xx, yy)
    return out[..., 0] if squeeze else out


class Rng:
    """Seeded counter-based random stream (Philox).

    The same seed gives the same draws on every run and platform. ``child``
    derives an independent stream keyed by an integer tag, so components can
    draw without perturbing each other's sequences.
    """

    def __init__(self, seed: int, tag: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.tag = tuple(int(t) for t in tag)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.tag])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *tag: int) -> "Rng":
        return Rng(self.seed, self.tag + tag)

    def integers(self, lo: int, hi: int, size=None):
        """Uniform integers in the closed range ``[lo, hi]``."""
        return self._gen.integers(lo, hi, size=size, endpoint=True)

    def uniform(self, lo=0.0, hi=1.0, size=None):
        return self._gen.uniform(lo, hi, size=size)

    def normal(self, size=None):
        return self._gen.standard_normal(size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def unit_vectors(self, n: int, dim: int) -> np.ndarray:
        v = self._gen.standard_normal((n, dim))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
