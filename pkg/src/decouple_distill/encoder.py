"""Minimal ViT encoder: patch stem, pre-norm attention blocks, V-L projection.

The forward graph is written once against :mod:`autograd` tensors. Inference
wraps parameters as constants (no tape is recorded); training wraps the
trainable subset with ``requires_grad``.

Parameter naming (weights stored ``(in, out)``)::

    stem.w, stem.b, cls, pos
    blocks.{l}.{ln1,ln2}.{g,b}
    blocks.{l}.{q,k,v,proj,fc1,fc2}.{w,b}
    vl.w                        (only when has_vl_proj)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .numerics import FLOAT, NonFiniteError, Rng

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 16
    depth: int = 4
    heads: int = 4
    dim: int = 32
    vl_dim: int = 16
    has_vl_proj: bool = True
    mlp_ratio: int = 4
    mean: tuple = CLIP_MEAN
    std: tuple = CLIP_STD
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return 1 + self.grid**2

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def out_dim(self) -> int:
        return self.vl_dim if self.has_vl_proj else self.dim


@dataclass
class TokenSeq:
    cls: np.ndarray  # (D,)
    grid: np.ndarray  # (H, W, D)

    def as_matrix(self) -> np.ndarray:
        h, w, d = self.grid.shape
        return np.concatenate([self.cls[None], self.grid.reshape(h * w, d)], axis=0)

    @classmethod
    def from_matrix(cls, m: np.ndarray, h: int, w: int) -> "TokenSeq":
        return cls(cls=m[0], grid=m[1:].reshape(h, w, m.shape[-1]))


@dataclass
class EncodeOutput:
    cls_token: np.ndarray
    dense: np.ndarray
    attn_maps: list = field(default_factory=list)
    last_block_input: TokenSeq | None = None
    last_qkv: tuple | None = None
    block_outputs: list = field(default_factory=list)


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple]:
    d, p = cfg.dim, cfg.patch_size
    hidden = cfg.mlp_ratio * d
    shapes = {
        "stem.w": (3 * p * p, d),
        "stem.b": (d,),
        "cls": (d,),
        "pos": (cfg.tokens, d),
    }
    for l in range(cfg.depth):
        pre = f"blocks.{l}."
        for ln in ("ln1", "ln2"):
            shapes[pre + ln + ".g"] = (d,)
            shapes[pre + ln + ".b"] = (d,)
        for name in ("q", "k", "v", "proj"):
            shapes[pre + name + ".w"] = (d, d)
            shapes[pre + name + ".b"] = (d,)
        shapes[pre + "fc1.w"] = (d, hidden)
        shapes[pre + "fc1.b"] = (hidden,)
        shapes[pre + "fc2.w"] = (hidden, d)
        shapes[pre + "fc2.b"] = (d,)
    if cfg.has_vl_proj:
        shapes["vl.w"] = (d, cfg.vl_dim)
    return shapes


def init_params(cfg: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded init: weights uniform in +-1/sqrt(fan_in), biases 0, LN gains 1."""
    rng = Rng(seed, (0xE0C,))
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("cls", "pos"):
            bound = 1.0 / np.sqrt(cfg.dim)
            val = rng.uniform(-bound, bound, shape)
        elif leaf == "g":
            val = np.ones(shape)
        elif leaf == "b":
            val = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            val = rng.uniform(-bound, bound, shape)
        params[name] = val.astype(FLOAT)
    return params


def check_params(params: dict, cfg: EncoderConfig) -> None:
    for name, shape in param_shapes(cfg).items():
        if name not in params:
            raise KeyError(f"missing parameter {name!r}")
        if tuple(params[name].shape) != shape:
            raise ValueError(
                f"parameter {name!r}: expected shape {shape}, got {tuple(params[name].shape)}"
            )


def wrap(params: dict, trainable=()) -> dict[str, ag.Tensor]:
    trainable = set(trainable)
    return {k: ag.Tensor(v, requires_grad=k in trainable) for k, v in params.items()}


def patchify(images: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """(B, S, S, 3) images -> (B, HW, 3*p*p) normalized patch rows."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    s, p = cfg.image_size, cfg.patch_size
    if images.shape[1:] != (s, s, 3):
        raise ValueError(f"image shape: expected ({s}, {s}, 3), got {images.shape[1:]}")
    dtype = images.dtype if images.dtype == np.float64 else FLOAT
    mean = np.asarray(cfg.mean, dtype=dtype)
    std = np.asarray(cfg.std, dtype=dtype)
    x = (images.astype(dtype) - mean) / std
    g = s // p
    b = x.shape[0]
    x = x.reshape(b, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, p * p * 3)


def embed_graph(patches, P) -> ag.Tensor:
    """Patch rows (B, HW, 3p^2) -> tokens (B, 1+HW, D) with cls and positions."""
    x = ag.linear(ag.lift(patches), P["stem.w"], P["stem.b"])
    b = x.shape[0]
    cls = ag.reshape(P["cls"], (1, 1, -1))
    cls = ag.add(cls, ag.Tensor(np.zeros((b, 1, 1), dtype=x.dtype)))
    return ag.add(ag.concat([cls, x], axis=1), P["pos"])


def split_heads(x: ag.Tensor, heads: int) -> ag.Tensor:
    b, t, d = x.shape
    return ag.transpose(ag.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: ag.Tensor) -> ag.Tensor:
    b, h, t, dh = x.shape
    return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _lin(x, P, name):
    return ag.linear(x, P[name + ".w"], P[name + ".b"])


def block_graph(x: ag.Tensor, P, l: int, cfg: EncoderConfig):
    """One pre-norm block. Returns (z, per-head attention (B,H,T,T), (q, k, v))."""
    pre = f"blocks.{l}."
    h = ag.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"], cfg.ln_eps)
    q = _lin(h, P, pre + "q")
    k = _lin(h, P, pre + "k")
    v = _lin(h, P, pre + "v")
    qh, kh, vh = (split_heads(t, cfg.heads) for t in (q, k, v))
    attn = ag.softmax(qh @ ag.swapaxes(kh, -1, -2), 1.0 / float(np.sqrt(cfg.head_dim)))
    y = ag.add(x, _lin(merge_heads(attn @ vh), P, pre + "proj"))
    hid = ag.gelu(_lin(ag.layer_norm(y, P[pre + "ln2.g"], P[pre + "ln2.b"], cfg.ln_eps), P, pre + "fc1"))
    z = ag.add(y, _lin(hid, P, pre + "fc2"))
    if not np.isfinite(z.data).all():
        raise NonFiniteError(f"non-finite activation after block {l}")
    return z, attn.data, (q.data, k.data, v.data)


def vl_project(x: ag.Tensor, P, cfg: EncoderConfig) -> ag.Tensor:
    return ag.matmul(x, P["vl.w"]) if cfg.has_vl_proj else x


def trunk_graph(images, P, cfg: EncoderConfig, stop: int | None = None, record=None):
    """Run the stem and blocks ``0..stop-1``; returns the token tensor.

    ``record`` (a dict) collects head-averaged attention, block outputs and
    the last executed block's input/QKV when given.
    """
    stop = cfg.depth if stop is None else stop
    x = embed_graph(patchify(images, cfg), P)
    for l in range(stop):
        if record is not None:
            record["last_input"] = x.data
        x, attn, qkv = block_graph(x, P, l, cfg)
        if record is not None:
            record.setdefault("attn", []).append(attn.mean(axis=1))
            record.setdefault("outputs", []).append(x.data)
            record["last_qkv"] = qkv
    return x


def patch_embed(image, params, cfg: EncoderConfig) -> TokenSeq:
    x = embed_graph(patchify(image, cfg), wrap(params)).data[0]
    return TokenSeq.from_matrix(x, cfg.grid, cfg.grid)


def block_forward(X: TokenSeq, params, cfg: EncoderConfig, layer: int = 0):
    """Apply block ``layer`` to a token sequence; returns (Z, head-averaged attn)."""
    x = ag.Tensor(X.as_matrix()[None])
    z, attn, _ = block_graph(x, wrap(params), layer, cfg)
    g = X.grid.shape[0]
    return TokenSeq.from_matrix(z.data[0], g, X.grid.shape[1]), attn[0].mean(axis=0)


def encode_batch(images, params, cfg: EncoderConfig, record: dict | None = None):
    """Batched encode; returns (cls (B, C), dense (B, H, W, C))."""
    P = wrap(params)
    x = trunk_graph(images, P, cfg, record=record)
    out = vl_project(x, P, cfg).data
    g = cfg.grid
    return out[:, 0], out[:, 1:].reshape(out.shape[0], g, g, -1)


def encode(image, params, cfg: EncoderConfig) -> EncodeOutput:
    """Full forward of one image with attention maps and last-block internals."""
    check_params(params, cfg)
    rec: dict = {}
    cls, dense = encode_batch(image, params, cfg, record=rec)
    g = cfg.grid
    q, k, v = (t[0] for t in rec["last_qkv"])
    return EncodeOutput(
        cls_token=cls[0],
        dense=dense[0],
        attn_maps=[a[0] for a in rec["attn"]],
        last_block_input=TokenSeq.from_matrix(rec["last_input"][0], g, g),
        last_qkv=(q, k, v),
        block_outputs=[TokenSeq.from_matrix(o[0], g, g) for o in rec["outputs"]],
    )
