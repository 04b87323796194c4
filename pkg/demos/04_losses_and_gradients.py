"""
The two distillation losses and their gradients
===============================================

content: 1 - cos between the frozen teacher's [CLS] on an image crop and the
student's content features pooled over the same box.

context: mean absolute difference between the student's and the VFM's token
correlation volumes.

total = content + lambda * context. Gradients come from a small reverse-mode
autodiff on numpy and are checked against central differences.
"""

from dataclasses import replace

import numpy as np

from decouple_distill.distill import (
    context_loss,
    content_loss_from_vectors,
    grad_check,
    tiny_models,
    total_loss,
)
from decouple_distill.region_ops import grid_regions

# %% closed-form sanity values
e1, e2 = np.eye(3)[:2]
student = np.ones((1, 4, 3))                 # every token identical
vfm = np.array([[e1, e1, e2, e2]])           # two orthogonal groups
print("identical vs two blocks:", context_loss(student, vfm))          # 0.5
print("rescaled tokens:", context_loss(vfm * [[[2], [3], [0.5], [7]]], vfm))  # 0
print("cosines {1, 0.5}:", content_loss_from_vectors([[1, 0], [1, 0]], [[2, 0], [0.5, np.sqrt(3) / 2]]))

# %% on the tiny model
models, dcfg = tiny_models(0)
img = np.random.default_rng(0).uniform(size=(32, 32, 3))
regions = grid_regions(2, 2)
for lam in (0.0, 0.25, 1.0):
    r = total_loss(img, models, replace(dcfg, lam=lam), regions)
    print(f"lambda {lam:4}: content {r.content:.5f} context {r.context:.5f} total {r.total:.5f}")

# %% analytic vs numeric gradients
for ctype in ("q", "k", "qk"):
    res = grad_check(seed=0, coords=30, dcfg=replace(dcfg, context_type=ctype))
    print(f"context_type {ctype:2s}: max relative error over 30 coords = {res.max_rel_error:.2e}")
