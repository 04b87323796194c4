"""Content and context distillation losses, gradients, and the training loop.

Content loss: RoI-pooled region vectors of the student's content grid are
pulled toward the frozen teacher's [CLS] embeddings of the matching crops
with ``1 - cosine``.

Context loss: the pairwise-cosine correlation volume of the student's
context features is matched to the VFM's. ``context_norm="pairs"`` averages
``|r_vfm - r_student|`` over all HW*HW pairs; ``"rows"`` averages, over anchor
tokens, the L2 norm of the discrepancy row.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .decoupled_head import ContextType, decoupled_graph
from .encoder import EncoderConfig, check_params, encode_batch, trunk_graph, vl_project, wrap
from .numerics import NonFiniteError, Rng, cosine_matrix, resize_bilinear
from .region_ops import RegionSet, crop_resize_batch, roi_matrix, sample_grid

log = logging.getLogger(__name__)


@dataclass
class CorrVolume:
    n: int
    vals: np.ndarray


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 0.25
    context_type: ContextType = ContextType.Q
    finetune_layers: int = 4
    grid_lo: int = 1
    grid_hi: int = 6
    teacher_crop_px: int = 64
    student_res: int = 64
    vfm_res: int = 32
    lr: float = 1e-5
    weight_decay: float = 0.1
    epochs: int = 6
    batch: int = 2
    seed: int = 0
    max_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    context_norm: str = "pairs"
    train_vl_proj: bool = True
    mode: str = "decoupled"
    roi_bins: int = 1
    roi_samples: int = 2
    log_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "context_type", ContextType.parse(self.context_type))
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.context_norm not in ("pairs", "rows"):
            raise ValueError(f"context_norm must be pairs or rows, got {self.context_norm!r}")
        if self.mode not in ("decoupled", "coupled"):
            raise ValueError(f"mode must be decoupled or coupled, got {self.mode!r}")
        if not 1 <= self.grid_lo <= self.grid_hi:
            raise ValueError("need 1 <= grid_lo <= grid_hi")


@dataclass
class LossReport:
    content: float
    context: float
    total: float
    step: int = 0

    def line(self) -> str:
        return f"{self.step}\t{self.content:.9g}\t{self.context:.9g}\t{self.total:.9g}"


@dataclass
class Models:
    """Student (trainable), teacher (frozen student copy) and VFM (frozen)."""

    student: dict
    teacher: dict
    vfm: dict
    student_cfg: EncoderConfig
    vfm_cfg: EncoderConfig

    def validate(self, cfg: DistillConfig) -> None:
        check_params(self.student, self.student_cfg)
        check_params(self.teacher, self.student_cfg)
        check_params(self.vfm, self.vfm_cfg)
        if self.student_cfg.grid != self.vfm_cfg.grid:
            raise ValueError(
                f"token-count mismatch: student grid {self.student_cfg.grid} "
                f"vs VFM grid {self.vfm_cfg.grid}"
            )
        if cfg.student_res != self.student_cfg.image_size or cfg.vfm_res != self.vfm_cfg.image_size:
            raise ValueError("student_res/vfm_res disagree with the encoder image sizes")
        if cfg.teacher_crop_px != self.student_cfg.image_size:
            raise ValueError("teacher_crop_px must equal the teacher's image_size")


# ---------------------------------------------------------------- plain losses


def corr_volume(tokens) -> CorrVolume:
    """Pairwise token cosines of an (H, W, D) grid; diagonal fixed at 1."""
    t = np.asarray(tokens)
    flat = t.reshape(-1, t.shape[-1])
    vals = cosine_matrix(flat)
    np.fill_diagonal(vals, 1)
    return CorrVolume(flat.shape[0], vals)


def _discrepancy(diff: np.ndarray, norm: str) -> float:
    if norm == "pairs":
        return float(np.abs(diff).mean())
    return float(np.sqrt((diff * diff).sum(axis=1)).mean())


def context_loss(student_context, vfm_dense, norm: str = "pairs") -> float:
    s = np.asarray(student_context)
    v = np.asarray(vfm_dense)
    if s.shape[:2] != v.shape[:2]:
        raise ValueError(f"grid mismatch: student {s.shape} vs VFM {v.shape}")
    diff = corr_volume(v).vals.astype(np.float64) - corr_volume(s).vals
    return _discrepancy(diff, norm)


def content_loss_from_vectors(teacher_vecs, student_vecs) -> float:
    ct = cosine_matrix(teacher_vecs, student_vecs).astype(np.float64)
    return float(np.mean(1.0 - np.diag(ct)))


def _usable(regions: RegionSet, image_px: int):
    keep = []
    for box in regions:
        if (box.x1 - box.x0) * image_px < 1 or (box.y1 - box.y0) * image_px < 1:
            warnings.warn(f"skipping degenerate region {box.as_tuple()}", stacklevel=3)
            continue
        keep.append(box)
    if not keep:
        raise ValueError("no usable regions")
    return keep


def teacher_targets(image, boxes, teacher, cfg: EncoderConfig, crop_px: int) -> np.ndarray:
    """Teacher [CLS] embeddings (k, C) of the crops of ``image`` at ``boxes``."""
    crops = crop_resize_batch(image, boxes, crop_px)
    cls, _ = encode_batch(crops.astype(np.asarray(teacher["stem.w"]).dtype), teacher, cfg)
    return cls


def content_loss(student_content, regions: RegionSet, teacher, teacher_cfg: EncoderConfig, image,
                 crop_px: int | None = None, bins: int = 1, samples: int = 2) -> float:
    """Mean over regions of ``1 - cos(teacher crop [CLS], RoI-pooled student content)``."""
    feat = np.asarray(student_content)
    h, w, c = feat.shape
    boxes = _usable(regions, np.asarray(image).shape[0])
    crop_px = teacher_cfg.image_size if crop_px is None else crop_px
    targets = teacher_targets(image, boxes, teacher, teacher_cfg, crop_px)
    pooled = roi_matrix(boxes, h, w, bins, samples, dtype=feat.dtype) @ feat.reshape(h * w, c)
    return content_loss_from_vectors(targets, pooled)


# ---------------------------------------------------------------- graph losses


def _content_graph(content: ag.Tensor, R: np.ndarray, targets: np.ndarray) -> ag.Tensor:
    pooled = ag.matmul(ag.Tensor(R.astype(content.dtype)), content)
    t = ag.Tensor(np.nan_to_num(_unit(targets)).astype(content.dtype))
    cos = ag.sum_(ag.mul(ag.unit_rows(pooled), t), axis=-1)
    return ag.mean(ag.add(ag.neg(cos), 1.0))


def _unit(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > 0, x / np.where(n > 0, n, 1), 0)


def _context_graph(ctx: ag.Tensor, vfm_corr: np.ndarray, norm: str) -> ag.Tensor:
    u = ag.unit_rows(ctx)
    r = ag.matmul(u, ag.swapaxes(u, -1, -2))
    n = vfm_corr.shape[0]
    off = 1.0 - np.eye(n, dtype=ctx.dtype)
    diff = ag.mul(ag.add(r, ag.Tensor(-vfm_corr.astype(ctx.dtype))), ag.Tensor(off))
    if norm == "pairs":
        return ag.mean(ag.absolute(diff))
    return ag.mean(ag.norm(diff, axis=-1))


def trainable_names(params: dict, cfg: EncoderConfig, dcfg: DistillConfig) -> list[str]:
    first = cfg.depth - min(dcfg.finetune_layers, cfg.depth)
    names = [
        k for k in params
        if k.startswith("blocks.") and int(k.split(".")[1]) >= first
    ]
    if dcfg.train_vl_proj and "vl.w" in params:
        names.append("vl.w")
    return sorted(names)


@dataclass
class Batch:
    """Everything the losses need for a set of images, teachers already run."""

    student_images: np.ndarray
    roi_mats: list
    targets: list
    vfm_corrs: list


def prepare_batch(images, regions_per_image, models: Models, dcfg: DistillConfig,
                  vfm_corr_cache: dict | None = None, keys=None, dtype=np.float32) -> Batch:
    s_cfg, v_cfg = models.student_cfg, models.vfm_cfg
    g = s_cfg.grid
    s_imgs, mats, targets, corrs = [], [], [], []
    for i, (img, regions) in enumerate(zip(images, regions_per_image)):
        img = np.asarray(img, dtype=dtype)
        boxes = _usable(regions, img.shape[0])
        s_imgs.append(_resize_to(img, s_cfg.image_size))
        mats.append(roi_matrix(boxes, g, g, dcfg.roi_bins, dcfg.roi_samples, dtype=dtype))
        targets.append(teacher_targets(img, boxes, models.teacher, s_cfg, dcfg.teacher_crop_px))
        key = None if keys is None else keys[i]
        if vfm_corr_cache is not None and key in vfm_corr_cache:
            corr = vfm_corr_cache[key]
        else:
            _, vd = encode_batch(_resize_to(img, v_cfg.image_size)[None], models.vfm, v_cfg)
            corr = corr_volume(vd[0]).vals
            if vfm_corr_cache is not None and key is not None:
                vfm_corr_cache[key] = corr
        corrs.append(corr)
    return Batch(np.stack(s_imgs), mats, targets, corrs)


def _resize_to(img, size: int):
    if img.shape[0] == size and img.shape[1] == size:
        return img
    return resize_bilinear(img, size, size)


def student_features(images, P, cfg: EncoderConfig, dcfg: DistillConfig):
    """(context, content) tensors of shape (B, HW, *) for the configured mode."""
    if dcfg.mode == "decoupled":
        x = trunk_graph(images, P, cfg, stop=cfg.depth - 1)
        context, content, _ = decoupled_graph(x, P, cfg, dcfg.context_type)
        return context, content
    x = trunk_graph(images, P, cfg)
    dense = vl_project(x, P, cfg)[:, 1:]
    return dense, dense


def loss_graph(batch: Batch, P, cfg: EncoderConfig, dcfg: DistillConfig):
    context, content = student_features(batch.student_images, P, cfg, dcfg)
    b = len(batch.roi_mats)
    lc = [_content_graph(content[i], batch.roi_mats[i], batch.targets[i]) for i in range(b)]
    lx = [_context_graph(context[i], batch.vfm_corrs[i], dcfg.context_norm) for i in range(b)]
    l_content = ag.mul(_sum(lc), 1.0 / b)
    l_context = ag.mul(_sum(lx), 1.0 / b)
    total = ag.add(l_content, ag.mul(l_context, float(dcfg.lam)))
    return l_content, l_context, total, context


def _sum(ts):
    out = ts[0]
    for t in ts[1:]:
        out = ag.add(out, t)
    return out


def _report(lc, lx, dcfg, step) -> LossReport:
    c, x = float(lc.data), float(lx.data)
    return LossReport(c, x, c + dcfg.lam * x, step)


def total_loss(image, models: Models, dcfg: DistillConfig, regions: RegionSet | None = None,
               rng: Rng | None = None) -> LossReport:
    """Both losses from one student forward on a single image."""
    if regions is None:
        regions = sample_grid(rng or Rng(dcfg.seed), dcfg.grid_lo, dcfg.grid_hi)
    batch = prepare_batch([image], [regions], models, dcfg)
    lc, lx, _, _ = loss_graph(batch, wrap(models.student), models.student_cfg, dcfg)
    return _report(lc, lx, dcfg, 0)


def loss_and_gradients(batch: Batch, params: dict, cfg: EncoderConfig, dcfg: DistillConfig,
                       step: int = 0):
    """Loss report and a gradient for every parameter (zeros where frozen)."""
    names = trainable_names(params, cfg, dcfg)
    P = wrap(params, names)
    lc, lx, total, _ = loss_graph(batch, P, cfg, dcfg)
    total.backward()
    grads = {}
    for k, t in P.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {k!r}")
        grads[k] = g
    return _report(lc, lx, dcfg, step), grads


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay, applied in place to a params dict."""

    def __init__(self, names, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1):
        self.names = list(names)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k in self.names:
            g = grads[k]
            p = params[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params[k] = (p * (1.0 - self.lr * self.weight_decay) - self.lr * update).astype(p.dtype)


# ---------------------------------------------------------------- training


class DivergenceError(RuntimeError):
    def __init__(self, report: LossReport):
        super().__init__(f"training diverged at step {report.step}: {report.line()}")
        self.report = report


@dataclass
class TrainResult:
    params: dict
    log: list = field(default_factory=list)

    def log_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.log)


def step_regions(dcfg: DistillConfig, step: int, slot: int) -> RegionSet:
    return sample_grid(Rng(dcfg.seed).child(2, step, slot), dcfg.grid_lo, dcfg.grid_hi)


def train(images, models: Models, dcfg: DistillConfig, out_checkpoint=None, callback=None) -> TrainResult:
    """Deterministic AdamW distillation of ``models.student`` (updated copy returned).

    ``images`` is an (N, S, S, 3) array in [0, 1]. One step draws a fresh
    region grid per image. ``max_steps`` (if > 0) stops early.
    """
    models.validate(dcfg)
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("empty dataset")
    params = {k: v.copy() for k, v in models.student.items()}
    names = trainable_names(params, models.student_cfg, dcfg)
    opt = AdamW(names, dcfg.lr, (dcfg.beta1, dcfg.beta2), dcfg.adam_eps, dcfg.weight_decay)
    cache: dict = {}
    result = TrainResult(params)
    step = 0
    rng = Rng(dcfg.seed)
    done = False
    for epoch in range(dcfg.epochs):
        order = rng.child(1, epoch).permutation(len(images))
        for start in range(0, len(order), dcfg.batch):
            idx = order[start:start + dcfg.batch]
            regions = [step_regions(dcfg, step, s) for s in range(len(idx))]
            batch = prepare_batch(images[idx], regions, models, dcfg, cache, keys=list(idx))
            report, grads = loss_and_gradients(batch, params, models.student_cfg, dcfg, step)
            if not np.isfinite(report.total):
                raise DivergenceError(report)
            if step % dcfg.log_every == 0:
                result.log.append(report)
                log.debug(report.line())
            if callback is not None:
                callback(step, params, report)
            opt.step(params, grads)
            step += 1
            if dcfg.max_steps and step >= dcfg.max_steps:
                done = True
                break
        if done:
            break
    result.params = params
    if out_checkpoint is not None:
        from .formats import save_checkpoint

        save_checkpoint(out_checkpoint, params)
    return result


@dataclass
class EvalLosses:
    content: float
    context: float
    corr_discrepancy: float


def evaluate_losses(images, params: dict, models: Models, dcfg: DistillConfig, seed: int = 1234) -> EvalLosses:
    """Losses on fixed, seeded regions over ``images``; comparable across runs.

    ``corr_discrepancy`` is the pair-mean ``|r_vfm - r|`` of the student's
    context features (the dense grid in coupled mode).
    """
    images = np.asarray(images, dtype=np.float32)
    regions = [
        sample_grid(Rng(seed).child(i), dcfg.grid_lo, dcfg.grid_hi) for i in range(len(images))
    ]
    batch = prepare_batch(images, regions, models, dcfg)
    lc, lx, _, ctx = loss_graph(batch, wrap(params), models.student_cfg, dcfg)
    g = models.student_cfg.grid
    disc = [
        float(np.abs(batch.vfm_corrs[i] - corr_volume(ctx.data[i].reshape(g, g, -1)).vals).mean())
        for i in range(len(images))
    ]
    return EvalLosses(float(lc.data), float(lx.data), float(np.mean(disc)))


# ---------------------------------------------------------------- gradient check


def tiny_models(seed: int = 0, dtype=np.float64):
    """The grad-check configuration: depth 2, dim 8, 2 heads, 2x2 token grid."""
    from .encoder import IMAGENET_MEAN, IMAGENET_STD, init_params

    s_cfg = EncoderConfig(image_size=32, patch_size=16, depth=2, heads=2, dim=8, vl_dim=8)
    v_cfg = EncoderConfig(image_size=16, patch_size=8, depth=1, heads=2, dim=8, has_vl_proj=False,
                          mean=IMAGENET_MEAN, std=IMAGENET_STD)
    student = {k: v.astype(dtype) for k, v in init_params(s_cfg, seed).items()}
    vfm = {k: v.astype(dtype) for k, v in init_params(v_cfg, seed + 1).items()}
    models = Models(student, {k: v.copy() for k, v in student.items()}, vfm, s_cfg, v_cfg)
    dcfg = DistillConfig(finetune_layers=2, teacher_crop_px=32, student_res=32, vfm_res=16)
    return models, dcfg


@dataclass
class GradCheck:
    max_rel_error: float
    coords: list
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(seed: int = 0, coords: int = 50, h: float = 1e-4, models=None, dcfg=None,
               images=None, floor: float = 1e-8) -> GradCheck:
    """Compare reverse-mode gradients with central differences in float64.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if models is None:
        models, base = tiny_models(seed)
        dcfg = dcfg or base
    dcfg = dcfg or DistillConfig()
    rng = Rng(seed).child(7)
    s = models.student_cfg.image_size
    if images is None:
        images = rng.uniform(0, 1, (2, s, s, 3))
    regions = [sample_grid(rng.child(i), 1, 3) for i in range(len(images))]
    regions = [r if len(r) > 1 else sample_grid(rng.child(i, 1), 2, 3) for i, r in enumerate(regions)]
    batch = prepare_batch(images, regions, models, dcfg, dtype=np.float64)
    params = {k: v.astype(np.float64) for k, v in models.student.items()}
    _, grads = loss_and_gradients(batch, params, models.student_cfg, dcfg)
    # parameters off the loss path (e.g. the decoupled block's FFN) are zero on
    # both sides and would make the check vacuous
    names = [k for k in trainable_names(params, models.student_cfg, dcfg) if np.any(grads[k])]
    sizes = np.array([params[k].size for k in names])
    flat = rng.permutation(int(sizes.sum()))[:coords]
    bounds = np.cumsum(sizes)
    picked, a_vals, n_vals = [], [], []

    def f(p):
        _, _, total, _ = loss_graph(batch, wrap(p), models.student_cfg, dcfg)
        return float(total.data)

    for c in flat:
        i = int(np.searchsorted(bounds, c, side="right"))
        name = names[i]
        off = int(c - (bounds[i - 1] if i else 0))
        idx = np.unravel_index(off, params[name].shape)
        orig = params[name][idx]
        params[name][idx] = orig + h
        fp = f(params)
        params[name][idx] = orig - h
        fm = f(params)
        params[name][idx] = orig
        picked.append((name, tuple(int(j) for j in idx)))
        a_vals.append(grads[name][idx])
        n_vals.append((fp - fm) / (2 * h))
    a = np.array(a_vals)
    n = np.array(n_vals)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return GradCheck(float(rel.max()), picked, a, n)


def with_lambda(dcfg: DistillConfig, lam: float) -> DistillConfig:
    return replace(dcfg, lam=lam)
