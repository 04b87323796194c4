"""Decoupled replacement for the student's final attention block.

The block's input is layer-normalized (the block's own ``ln1``), then split:

* context: the query (or key) projection of the patch tokens. Its
  self-similarity, per head, gives the context attention;
* content: the value projection aggregated by the context attention, then the
  output projection and the V-L projection. No residual and no FFN.

The [CLS] token is dropped before anything else, so content depends on patch
tokens only.

``Q_PLUS_K`` computes the query-query and key-key attentions separately and
averages the two post-softmax matrices (rows stay stochastic). Its context
features, used by the correlation loss, are the mean of the two projections,
so tied query/key weights reproduce the single-projection variants exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .encoder import (
    EncoderConfig,
    TokenSeq,
    check_params,
    merge_heads,
    split_heads,
    trunk_graph,
    vl_project,
    wrap,
)


class ContextType(enum.Enum):
    Q = "q"
    K = "k"
    Q_PLUS_K = "qk"

    @classmethod
    def parse(cls, value) -> "ContextType":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"context_type must be one of q, k, qk; got {value!r}") from None


@dataclass
class DecoupledOutput:
    context: np.ndarray  # (H, W, D)
    content: np.ndarray  # (H, W, C)
    attn_context: np.ndarray  # (HW, HW), head-averaged


def _required(ctype: ContextType) -> tuple[str, ...]:
    ctx = {ContextType.Q: ("q",), ContextType.K: ("k",), ContextType.Q_PLUS_K: ("q", "k")}
    return ("ln1",) + ctx[ctype] + ("v", "proj")


def _check_projections(P, layer: int, ctype: ContextType):
    for name in _required(ctype):
        pre = f"blocks.{layer}.{name}."
        keys = (pre + "g", pre + "b") if name.startswith("ln") else (pre + "w", pre + "b")
        for key in keys:
            if key not in P:
                raise KeyError(f"decoupled head ({ctype.value}) needs projection {key!r}")


def decoupled_graph(x: ag.Tensor, P, cfg: EncoderConfig, ctype: ContextType, layer=None):
    """Tokens (B, 1+HW, D) -> (context (B,HW,D), content (B,HW,C), attn (B,HW,HW))."""
    layer = cfg.depth - 1 if layer is None else layer
    _check_projections(P, layer, ctype)
    pre = f"blocks.{layer}."
    h = ag.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"], cfg.ln_eps)
    h = h[:, 1:]
    scale = 1.0 / float(np.sqrt(cfg.head_dim))

    def self_attn(name):
        feat = ag.linear(h, P[pre + name + ".w"], P[pre + name + ".b"])
        fh = split_heads(feat, cfg.heads)
        return feat, ag.softmax(fh @ ag.swapaxes(fh, -1, -2), scale)

    if ctype is ContextType.Q_PLUS_K:
        fq, aq = self_attn("q")
        fk, ak = self_attn("k")
        context = ag.mul(ag.add(fq, fk), 0.5)
        attn = ag.mul(ag.add(aq, ak), 0.5)
    else:
        context, attn = self_attn(ctype.value)
    v = split_heads(ag.linear(h, P[pre + "v.w"], P[pre + "v.b"]), cfg.heads)
    content = ag.linear(merge_heads(attn @ v), P[pre + "proj.w"], P[pre + "proj.b"])
    content = vl_project(content, P, cfg)
    return context, content, attn.data.mean(axis=1)


def decoupled_forward(X: TokenSeq, params, cfg: EncoderConfig, ctype=ContextType.Q) -> DecoupledOutput:
    """Decoupled final block applied to the student's last-block input ``X``."""
    ctype = ContextType.parse(ctype)
    P = wrap(params)
    x = ag.Tensor(X.as_matrix()[None])
    context, content, attn = decoupled_graph(x, P, cfg, ctype)
    h, w = X.grid.shape[:2]
    return DecoupledOutput(
        context=context.data[0].reshape(h, w, -1),
        content=content.data[0].reshape(h, w, -1),
        attn_context=attn[0],
    )


def student_graph(images, P, cfg: EncoderConfig, ctype: ContextType):
    """Trunk through blocks 0..depth-2, then the decoupled head."""
    x = trunk_graph(images, P, cfg, stop=cfg.depth - 1)
    return decoupled_graph(x, P, cfg, ctype)


def dense_for_inference(image, params, cfg: EncoderConfig, ctype=ContextType.Q) -> np.ndarray:
    """The student's dense representation: the decoupled content grid (H, W, C)."""
    return dense_batch(image, params, cfg, ctype)[0]


def dense_batch(images, params, cfg: EncoderConfig, ctype=ContextType.Q) -> np.ndarray:
    ctype = ContextType.parse(ctype)
    check_params(params, cfg)
    _, content, _ = student_graph(images, wrap(params), cfg, ctype)
    g = cfg.grid
    return content.data.reshape(content.shape[0], g, g, -1)
