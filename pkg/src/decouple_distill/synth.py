"""Seeded synthetic segmentation dataset: colored shapes on a background.

Directory layout written by :func:`gen_synth`::

    images/NNNNN.ppm        RGB image (P6)
    labels/NNNNN.pgm        class index per pixel (P5)
    masks/NNNNN_RR.pgm      instance mask of region RR (0 / 255)
    regions.txt             image_id x0 y0 x1 y1 class_id
    bank.txt                ClassBank of seeded random unit vectors
    meta.txt                count / px / classes / seed

Class 0 is the background. Rectangles use their bounding box as region box;
circles and triangles use an inscribed box so the box interior is (almost)
entirely the object's class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import (
    AnnotatedRegion,
    ClassBank,
    read_image,
    read_pnm,
    read_regions,
    to_uint8,
    write_bank,
    write_pgm,
    write_ppm,
    write_regions,
)
from .numerics import Rng
from .region_ops import RegionBox

log = logging.getLogger(__name__)

SHAPES = ("rectangle", "circle", "triangle")
MAX_TRIES = 50


@dataclass
class SynthSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    seg_labels: np.ndarray  # (H, W) uint8
    regions: list  # AnnotatedRegion
    masks: list  # (H, W) bool per region


def class_colors(seed: int, classes: int) -> np.ndarray:
    rng = Rng(seed).child(0xC01)
    return rng.uniform(0.1, 0.9, (classes, 3))


def _shape_mask(kind: str, px: int, x0: int, y0: int, s: int):
    yy, xx = np.mgrid[0:px, 0:px] + 0.5
    if kind == "rectangle":
        mask = (xx >= x0) & (xx < x0 + s) & (yy >= y0) & (yy < y0 + s)
        core = (x0, y0, x0 + s, y0 + s)
    elif kind == "circle":
        r = s / 2
        cx, cy = x0 + r, y0 + r
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        half = int(np.floor(r / np.sqrt(2)))
        core = (int(np.ceil(cx - half)), int(np.ceil(cy - half)),
                int(np.floor(cx + half)), int(np.floor(cy + half)))
    else:
        # isosceles, apex at the top center
        rel = (yy - y0) / s
        mask = (yy >= y0) & (yy < y0 + s) & (np.abs(xx - (x0 + s / 2)) <= rel * s / 2)
        q = s // 4
        core = (x0 + q, y0 + s // 2, x0 + s - q, y0 + s)
    return mask, core


def make_sample(rng: Rng, px: int, classes: int, colors: np.ndarray) -> SynthSample:
    labels = np.zeros((px, px), dtype=np.uint8)
    taken = np.zeros((px, px), dtype=bool)
    regions, masks = [], []
    want = int(rng.integers(1, 4))
    min_s = max(4, px // 6)
    max_s = max(min_s + 1, px // 2)
    for _ in range(want):
        for _try in range(MAX_TRIES):
            s = int(rng.integers(min_s, max_s))
            x0 = int(rng.integers(0, px - s))
            y0 = int(rng.integers(0, px - s))
            if taken[max(0, y0 - 1):y0 + s + 1, max(0, x0 - 1):x0 + s + 1].any():
                continue
            kind = SHAPES[int(rng.integers(0, len(SHAPES) - 1))]
            cls = int(rng.integers(1, classes - 1))
            mask, core = _shape_mask(kind, px, x0, y0, s)
            cx0, cy0, cx1, cy1 = core
            if cx1 <= cx0 or cy1 <= cy0:
                continue
            taken[y0:y0 + s, x0:x0 + s] = True
            labels[mask] = cls
            box = RegionBox(cx0 / px, cy0 / px, cx1 / px, cy1 / px)
            regions.append((box, cls))
            masks.append(mask)
            break
        else:
            log.info("placement failed after %d tries; sample has %d shapes", MAX_TRIES, len(regions))
            break
    img = colors[labels] + 0.03 * rng.normal((px, px, 3))
    img = np.clip(img, 0, 1)
    # quantize through uint8 so in-memory samples equal what is read back from disk
    img = (to_uint8(img).astype(np.float32) / 255).astype(np.float32)
    return SynthSample(img, labels, regions, masks)


def gen_synth(out, seed: int = 0, count: int = 64, px: int = 64, classes: int = 4,
              dim: int = 16) -> Path:
    """Write a synthetic dataset directory; same arguments give identical bytes."""
    if classes < 2:
        raise ValueError("need at least 2 classes (background + one shape class)")
    out = Path(out)
    for sub in ("images", "labels", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    colors = class_colors(seed, classes)
    rng = Rng(seed)
    annotated = []
    for i in range(count):
        sample = make_sample(rng.child(1, i), px, classes, colors)
        write_ppm(out / "images" / f"{i:05d}.ppm", to_uint8(sample.image))
        write_pgm(out / "labels" / f"{i:05d}.pgm", sample.seg_labels)
        for r, ((box, cls), mask) in enumerate(zip(sample.regions, sample.masks)):
            write_pgm(out / "masks" / f"{i:05d}_{r:02d}.pgm", mask.astype(np.uint8) * 255)
            annotated.append(AnnotatedRegion(i, box, cls))
    write_regions(out / "regions.txt", annotated)
    names = ["background"] + [f"class{c}" for c in range(1, classes)]
    write_bank(out / "bank.txt", ClassBank(names, Rng(seed).child(0xBA4).unit_vectors(classes, dim)))
    (out / "meta.txt").write_text(f"count {count}\npx {px}\nclasses {classes}\nseed {seed}\n")
    return out


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) float32
    labels: np.ndarray  # (N, H, W) uint8
    regions: list  # AnnotatedRegion, file order
    root: Path

    def regions_of(self, image_id: int):
        return [r for r in self.regions if r.image_id == image_id]

    def mask(self, image_id: int, index: int) -> np.ndarray:
        return read_pnm(self.root / "masks" / f"{image_id:05d}_{index:02d}.pgm") > 0


def load_dataset(root) -> Dataset:
    root = Path(root)
    files = sorted((root / "images").glob("*.ppm"))
    if not files:
        raise FileNotFoundError(f"{root}: no images/*.ppm")
    images = np.stack([read_image(f) for f in files])
    labels = np.stack([read_pnm(root / "labels" / (f.stem + ".pgm")) for f in files])
    regions = read_regions(root / "regions.txt") if (root / "regions.txt").exists() else []
    return Dataset(images, labels, regions, root)
