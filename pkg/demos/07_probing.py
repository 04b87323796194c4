"""
Probing attention and feature correlations
==========================================

For an anchor cell: the [CLS] attention row, the anchor's attention row and
the cosine correlation of its features, per layer, written as 8-bit PGM
heatmaps. The proxy score is the average attention that patch rows spend on
the few columns [CLS] attends to most: around ``p`` for uniform attention,
1 when everything collapses onto one column.

Compares the fresh student with the distilled one when it exists.
"""

from pathlib import Path

import numpy as np

from decouple_distill import formats, probe, synth
from decouple_distill.decoupled_head import decoupled_forward
from decouple_distill.encoder import encode, init_params
from decouple_distill.numerics import Rng

HERE = Path(__file__).parent
OUT = HERE / "out" / "probe"
OUT.mkdir(parents=True, exist_ok=True)
rc = formats.load_config(HERE.parent / "configs" / "toy.cfg")
cfg = rc.student_config()
g = (cfg.grid, cfg.grid)

image = synth.make_sample(Rng(3), 64, 4, synth.class_colors(0, 4)).image
formats.write_ppm(OUT / "image.ppm", formats.to_uint8(image))
anchor = (1, 2)

students = {"init": init_params(cfg, rc.seed)}
trained = HERE / "out" / "distill" / "student.ckpt"
if trained.exists():
    students["distilled"] = formats.load_checkpoint(trained)

for tag, params in students.items():
    out = encode(image, params, cfg)
    for layer in range(cfg.depth):
        for name, vec in (("cls", probe.cls_attention(out, layer)),
                          ("anchor", probe.anchor_attention(out, layer, anchor)),
                          ("featcorr", probe.feature_correlation(out, anchor, layer))):
            formats.write_pgm(OUT / f"{tag}_{name}_L{layer}.pgm", probe.render_heatmap(vec, g, 64).pixels)
        print(f"{tag:9s} layer {layer}: proxy score {probe.proxy_score(out, layer, 0.02):.3f}")
    # content features inherit a random teacher's near-constant [CLS], so their
    # correlations sit close to 1; the context grid is what carries the VFM's structure
    head = decoupled_forward(out.last_block_input, params, cfg)
    for name, grid in (("content", head.content), ("context", head.context)):
        corr = probe.feature_correlation(grid, anchor)
        formats.write_pgm(OUT / f"{tag}_{name}_corr.pgm", probe.render_heatmap(corr, g, 64).pixels)
        print(f"{tag:9s} {name} correlation with anchor {anchor}:")
        print(np.round(corr.reshape(g), 3))

# %% reference points for the proxy score
uniform = np.full((17, 17), 1 / 17)
collapsed = np.zeros((17, 17))
collapsed[:, 3] = 1
print("uniform map:", round(probe.proxy_score(uniform), 4), "| collapsed map:", probe.proxy_score(collapsed))
print("wrote", OUT)
