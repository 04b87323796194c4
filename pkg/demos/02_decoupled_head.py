"""
Splitting the last block into context and content
=================================================

The decoupled head takes the final block's input and returns

* context features (the query projection) whose self-similarity drives attention,
* content features: values mixed by that attention, projected into the shared space.

Content never sees the residual stream or the FFN of that block, and
perturbing the value path leaves context untouched.
"""

import numpy as np

from decouple_distill.decoupled_head import ContextType, decoupled_forward
from decouple_distill.encoder import EncoderConfig, encode, init_params
from decouple_distill.distill import corr_volume

cfg = EncoderConfig(image_size=64, patch_size=16, depth=2, heads=4, dim=32, vl_dim=16)
params = init_params(cfg, seed=1)
image = np.random.default_rng(1).uniform(size=(64, 64, 3))

x = encode(image, params, cfg).last_block_input
for ctype in ContextType:
    o = decoupled_forward(x, params, cfg, ctype)
    print(f"{ctype.name:9s} context {o.context.shape}  content {o.content.shape}  "
          f"attn rows sum to 1: {np.allclose(o.attn_context.sum(-1), 1)}")

# %% the value path cannot move the context
base = decoupled_forward(x, params, cfg)
bumped = dict(params)
bumped["blocks.1.v.w"] = params["blocks.1.v.w"] + 1.0
moved = decoupled_forward(x, bumped, cfg)
print("context changed by value perturbation:", not np.array_equal(base.context, moved.context))
print("content changed by value perturbation:", not np.array_equal(base.content, moved.content))

# %% tie key to query: the three variants coincide
tied = dict(params)
tied["blocks.1.k.w"], tied["blocks.1.k.b"] = params["blocks.1.q.w"], params["blocks.1.q.b"]
outs = [decoupled_forward(x, tied, cfg, t) for t in ContextType]
print("max q/k/qk difference with tied weights:",
      max(np.abs(o.content - outs[0].content).max() for o in outs))

# %% the context grid's token correlations are what gets distilled
print("context correlation volume, first row:")
print(np.round(corr_volume(base.context).vals[0], 2))
