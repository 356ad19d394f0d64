"""
Attention rollout on one image
==============================

Captures per-layer attention from a forward pass, rolls it out to a
patch-grid saliency map, and writes the overlay and the raw map.
"""

import tempfile
from pathlib import Path

import numpy as np

from vitderm.attention import attention_rollout, render_heatmap, write_attention
from vitderm.model import init_weights, make_config
from vitderm.synthetic import lesion_image

cfg = make_config("custom", image_size=32, patch_size=8, hidden_dim=16, mlp_dim=32, num_heads=2, depth=3)
model = init_weights(cfg, seed=0)
image = lesion_image(4, 32, np.random.default_rng(1))

_, records = model.forward(image[None].astype(np.float32), capture_attention=True)
amap, rolled = attention_rollout(records[0], return_intermediates=True)
print("row sums after each layer:", [float(np.abs(m.sum(axis=1) - 1).max()) for m in rolled])
print("rollout grid:\n", np.round(amap.grid, 2))

last = attention_rollout(records[0], mode="last", head=0)
print("last layer, head 0:\n", np.round(last.grid, 2))

overlay, raw = render_heatmap(amap, image, alpha=0.5)
out = Path(tempfile.mkdtemp(prefix="vitderm_demo_"))
print("wrote", *write_attention(out, "demo_lesion", overlay, raw))
