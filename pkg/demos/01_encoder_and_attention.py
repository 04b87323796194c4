"""
Encoding an image with the toy ViT
==================================

Patchify, run the pre-norm blocks, and look at what comes out: the [CLS]
vector, the dense grid and one head-averaged attention map per layer.
"""

from pathlib import Path

import numpy as np

from decouple_distill import formats, probe, synth
from decouple_distill.encoder import EncoderConfig, encode, init_params
from decouple_distill.numerics import Rng

OUT = Path(__file__).parent / "out" / "encoder"
OUT.mkdir(parents=True, exist_ok=True)

# %% a 64 px synthetic image and a randomly initialized 4-layer encoder
cfg = EncoderConfig(image_size=64, patch_size=16, depth=4, heads=4, dim=32, vl_dim=16)
params = init_params(cfg, seed=0)
sample = synth.make_sample(Rng(0), 64, 4, synth.class_colors(0, 4))
formats.write_ppm(OUT / "image.ppm", formats.to_uint8(sample.image))

out = encode(sample.image, params, cfg)
print("grid", cfg.grid, "x", cfg.grid, "| tokens", cfg.tokens)
print("cls", out.cls_token.shape, "dense", out.dense.shape)

# %% attention rows are distributions over [CLS] + patches
for layer, m in enumerate(out.attn_maps):
    print(f"layer {layer}: map {m.shape}, max |row sum - 1| = {np.abs(m.sum(1) - 1).max():.1e}, "
          f"proxy score {probe.proxy_score(out, layer):.3f}")

# %% where does [CLS] look in the last layer?
cls_row = probe.cls_attention(out, cfg.depth - 1)
print("last-layer [CLS] attention over the 4x4 grid:")
print(np.round(cls_row.reshape(cfg.grid, cfg.grid), 3))
formats.write_pgm(OUT / "cls_attention.pgm", probe.render_heatmap(cls_row, (cfg.grid, cfg.grid), 64).pixels)
print("wrote", OUT)
