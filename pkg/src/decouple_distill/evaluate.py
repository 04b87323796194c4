"""Training-free segmentation and region classification from dense features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoupled_head import ContextType, dense_batch
from .encoder import EncoderConfig
from .numerics import resize_bilinear, unit_rows
from .region_ops import mask_pool, mask_to_grid, roi_align

IGNORE = 255


@dataclass
class SegPrediction:
    labels: np.ndarray  # (H_img, W_img) class indices


def class_scores(dense, embeds) -> np.ndarray:
    """Cosine of every cell against every class embedding: (H, W, K)."""
    d = unit_rows(np.asarray(dense, dtype=np.float64))
    e = unit_rows(np.asarray(embeds, dtype=np.float64))
    return d @ e.T


def classify_pixels(dense, bank):
    """Per-cell argmax cosine (ties go to the lowest class index)."""
    if len(bank) == 0:
        raise ValueError("empty class bank")
    scores = class_scores(dense, bank.embeds)
    return np.argmax(scores, axis=-1), scores


def upsample_labels(scores, out_h: int, out_w: int) -> SegPrediction:
    """Bilinearly upsample per-class scores, then take the per-pixel argmax."""
    h, w = scores.shape[:2]
    if out_h < h or out_w < w:
        raise ValueError("upsample_labels: output smaller than input")
    up = resize_bilinear(np.asarray(scores, dtype=np.float64), out_h, out_w)
    return SegPrediction(np.argmax(up, axis=-1))


def window_starts(size: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def sliding_window_dense(image, model, window: int, stride: int, patch: int) -> np.ndarray:
    """Stitch dense grids of overlapping windows, averaging where they overlap.

    ``model`` maps a batch of (window, window, 3) crops to (B, g, g, C) grids.
    Image sides, window and stride must be multiples of ``patch``.
    """
    image = np.asarray(image)
    H, W = image.shape[:2]
    if window > min(H, W):
        raise ValueError(f"window {window} larger than image {H}x{W}")
    if stride > window or stride < 1:
        raise ValueError("need 1 <= stride <= window")
    for name, v in (("height", H), ("width", W), ("window", window), ("stride", stride)):
        if v % patch:
            raise ValueError(f"{name} {v} is not a multiple of the patch size {patch}")
    ys, xs = window_starts(H, window, stride), window_starts(W, window, stride)
    crops = np.stack([image[y:y + window, x:x + window] for y in ys for x in xs])
    grids = model(crops)
    g = window // patch
    acc = np.zeros((H // patch, W // patch, grids.shape[-1]), dtype=np.float64)
    cnt = np.zeros((H // patch, W // patch, 1), dtype=np.float64)
    for (y, x), grid in zip(((y, x) for y in ys for x in xs), grids):
        cy, cx = y // patch, x // patch
        acc[cy:cy + g, cx:cx + g] += grid
        cnt[cy:cy + g, cx:cx + g] += 1
    return (acc / cnt).astype(grids.dtype)


def resize_shorter_side(image, target: int, multiple: int = 1) -> np.ndarray:
    """Scale so the shorter side is ``target``; both sides rounded to ``multiple``."""
    H, W = image.shape[:2]
    s = target / min(H, W)
    nh = max(multiple, int(round(H * s / multiple)) * multiple)
    nw = max(multiple, int(round(W * s / multiple)) * multiple)
    return resize_bilinear(image, nh, nw)


def student_model(params, cfg: EncoderConfig, ctype=ContextType.Q):
    return lambda crops: dense_batch(crops, params, cfg, ctype)


def segment(image, params, cfg: EncoderConfig, bank, window=None, stride=None,
            ctype=ContextType.Q, resize_short: int = 0) -> SegPrediction:
    """Dense features by sliding window, per-cell classification, upsample to the image."""
    image = np.asarray(image, dtype=np.float32)
    H, W = image.shape[:2]
    work = image
    if resize_short:
        work = resize_shorter_side(image, resize_short, cfg.patch_size)
    window = cfg.image_size if window is None else window
    stride = window if stride is None else stride
    if window != cfg.image_size:
        raise ValueError(f"window must equal the model's image_size {cfg.image_size}")
    dense = sliding_window_dense(work, student_model(params, cfg, ctype), window, stride, cfg.patch_size)
    _, scores = classify_pixels(dense, bank)
    return upsample_labels(scores, H, W)


def region_classify(dense, regions, bank, mode: str = "box", masks=None, bins: int = 1,
                    samples: int = 2) -> np.ndarray:
    """Pool each region (RoI Align or mask pooling) and pick the best class."""
    dense = np.asarray(dense)
    h, w = dense.shape[:2]
    feats = []
    for i, box in enumerate(regions):
        if mode == "box":
            feats.append(roi_align(dense, box, bins, samples))
        elif mode == "mask":
            m = np.asarray(masks[i])
            if m.shape != (h, w):
                m = mask_to_grid(m, h, w)
            feats.append(mask_pool(dense, m))
        else:
            raise ValueError(f"mode must be box or mask, got {mode!r}")
    scores = class_scores(np.array(feats), bank.embeds)
    return np.argmax(scores, axis=-1)


@dataclass
class ConfusionCounts:
    """Integer pixel counts, mergeable across images in any order."""

    inter: np.ndarray
    union: np.ndarray

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.inter + other.inter, self.union + other.union)


def seg_counts(pred, gt, num_classes: int, ignore_index: int = IGNORE) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = gt != ignore_index
    p, g = pred[valid].astype(np.int64), gt[valid].astype(np.int64)
    inter = np.bincount(g[p == g], minlength=num_classes)[:num_classes]
    area_p = np.bincount(p, minlength=num_classes)[:num_classes]
    area_g = np.bincount(g, minlength=num_classes)[:num_classes]
    return ConfusionCounts(inter, area_p + area_g - inter)


def iou_from_counts(c: ConfusionCounts):
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(c.union > 0, c.inter / np.maximum(c.union, 1), np.nan)
    present = c.union > 0
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return iou, mean


def miou(pred, gt, num_classes: int, ignore_index: int = IGNORE):
    """Per-class IoU (NaN for classes absent from both) and their mean."""
    if isinstance(pred, SegPrediction):
        pred = pred.labels
    return iou_from_counts(seg_counts(pred, gt, num_classes, ignore_index))


def macc(preds, gts) -> float:
    """Mean over ground-truth classes of per-class top-1 accuracy."""
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    if preds.size == 0 or preds.shape != gts.shape:
        raise ValueError("macc needs equal-length, nonempty inputs")
    accs = [float(np.mean(preds[gts == c] == c)) for c in np.unique(gts)]
    return float(np.mean(accs))
