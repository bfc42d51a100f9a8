"""Token features as pictures: PCA to three components, mapped to LCh colour.

Writes PNGs to ``notebooks/out/``. Identical inputs give byte-identical files.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch

from encoderlab.data import ShapeVocab, gen_shapes_dataset
from encoderlab.model import EncoderConfig, TextConfig, build_model, normalize_images
from encoderlab.viz import lowpass_blend, pca3, save_png, visualize

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

# %% A hand-made grid with three feature clusters turns into three colours.
grid = np.zeros((6, 6, 3))
grid[:, :2, 0] = grid[:, 2:4, 1] = grid[:, 4:, 2] = 1.0
rgb = visualize(grid, blend=False)
print("distinct colours:", len(np.unique(np.round(rgb.reshape(-1, 3), 6), axis=0)))

# %% PCA on its own: the first component carries most of the variance of a near-line.
rng = np.random.default_rng(0)
line = rng.normal(size=(50, 1)) * np.array([[1.0, -2.0, 3.0]]) + 0.01 * rng.normal(size=(50, 3))
_, ev = pca3(line)
print("explained variance ratios:", np.round(ev / ev.sum(), 4))

# %% Blending smooths a feature map with a 3x3 Gaussian before the PCA.
noisy = rng.normal(size=(8, 8, 4))
print("std before / after blend:", noisy.std().round(3), lowpass_blend(noisy).std().round(3))

# %% Feature maps from an (untrained) encoder, one PNG per image.
vocab = ShapeVocab()
words = vocab.words()
model = build_model(EncoderConfig(width=16, depth=2, mlp_dim=32, heads=2, patch_size=4, image_size=32,
                                  clip_dim=16, pool_heads=2),
                    TextConfig(vocab_size=len(words) + 3, width=16, depth=1, mlp_dim=32, heads=2, clip_dim=16),
                    words, seed=0)
ds = gen_shapes_dataset(0, 2, vocab, size=32)
with torch.no_grad():
    feats = model.visual.forward_features(normalize_images(ds.images), [2])[2]
for i, g in enumerate(feats.as_grid().numpy()):
    p = save_png(visualize(g), OUT / f"features_img{i}.png")
    print(p.name, hashlib.sha256(p.read_bytes()).hexdigest()[:16])
