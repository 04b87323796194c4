"""
Training-free segmentation and region classification
====================================================

Every dense cell is compared (cosine) against a bank of class embeddings.
Segmentation stitches sliding windows, classifies cells and upsamples the
class scores to pixels. Region classification pools a box or a mask first.

The synthetic class bank is random, so scores on real data mean little here;
the point is the pipeline. A constructed bank shows the perfect case.
"""

from pathlib import Path

import numpy as np

from decouple_distill import evaluate, formats, synth
from decouple_distill.decoupled_head import dense_for_inference

HERE = Path(__file__).parent
OUT = HERE / "out" / "eval"
OUT.mkdir(parents=True, exist_ok=True)
rc = formats.load_config(HERE.parent / "configs" / "toy.cfg")
cfg = rc.student_config()

trained = HERE / "out" / "distill" / "student.ckpt"
if trained.exists():
    params = formats.load_checkpoint(trained)
    print("using", trained)
else:
    from decouple_distill.encoder import init_params
    params = init_params(cfg, 0)
    print("no distilled checkpoint yet (run 05_toy_distillation.py); using a fresh init")

ds = synth.load_dataset(synth.gen_synth(OUT / "data", seed=7, count=8, px=128, classes=4))
bank = formats.read_bank(ds.root / "bank.txt")

# %% 128 px images, 64 px windows, stride 32: a 3x3 arrangement of windows
counts = None
for img, gt in zip(ds.images, ds.labels):
    pred = evaluate.segment(img, params, cfg, bank, window=64, stride=32)
    c = evaluate.seg_counts(pred.labels, gt, len(bank))
    counts = c if counts is None else counts.merge(c)
iou, miou = evaluate.iou_from_counts(counts)
for name, v in zip(bank.names, iou):
    print(f"{name:11s} IoU {v:.3f}")
print(f"mIoU {miou:.3f}")
formats.write_pgm(OUT / "pred_0.pgm", (pred.labels * 60).astype(np.uint8))

# %% region classification by box and by mask
preds, masks_preds, gts = [], [], []
for i, img in enumerate(ds.images):
    regs = ds.regions_of(i)
    dense = dense_for_inference(evaluate.resize_shorter_side(img, 64), params, cfg)
    preds += evaluate.region_classify(dense, [r.box for r in regs], bank).tolist()
    masks = [ds.mask(i, k) for k in range(len(regs))]
    masks_preds += evaluate.region_classify(dense, [r.box for r in regs], bank, "mask", masks).tolist()
    gts += [r.class_id for r in regs]
print(f"{len(gts)} regions: box mAcc {evaluate.macc(preds, gts):.3f}, mask mAcc {evaluate.macc(masks_preds, gts):.3f}")

# %% a bank built from the model's own feature on a flat image: perfect score
flat = np.full((64, 64, 3), 0.5, np.float32)
f = dense_for_inference(flat, params, cfg)[0, 0]
pm = formats.ClassBank(["flat", "anti"], np.stack([f, -f]))
pred = evaluate.segment(np.full((128, 128, 3), 0.5, np.float32), params, cfg, pm, 64, 32)
print("flat-image mIoU with a matching bank:", evaluate.miou(pred, np.zeros((128, 128), int), 2)[1])
