"""Spatial alignment and frozen-feature probes across layers.

Uses the toy config. The locality score is the correlation between token
similarity and "same object" on held-out scenes.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from encoderlab.augment import resize_labels
from encoderlab.config import load_config
from encoderlab.contrastive import TrainConfig, train_run
from encoderlab.data import ShapeVocab, gen_shapes_dataset, heldout_pairs
from encoderlab.model import EncoderConfig, TextConfig, build_model
from encoderlab.probes import ProbeConfig, layer_sweep, normalize_scores
from encoderlab.spatial import (SpatialAlignConfig, locality_correlation, mask_logit_teacher,
                                spatial_align_run, temperature_transform)

CONFIG = Path(__file__).parents[1] / "configs" / "toy.yaml"
cfg = load_config(CONFIG)
vocab = ShapeVocab()
words = vocab.words()
held = heldout_pairs(vocab)
train = gen_shapes_dataset(0, cfg["data"]["n_train"], vocab, exclude=held)
evals = gen_shapes_dataset(2, cfg["data"]["n_eval"], vocab, exclude=held)
model = build_model(EncoderConfig(**cfg["model"]["vision"]),
                    TextConfig(vocab_size=len(words) + 3, **cfg["model"]["text"]), words, seed=0)
train_run(model, train.images, train.captions, TrainConfig(**cfg["pretrain"]))

# %% The locality teacher: one-hot instance masks turned into logits, pooled to the token grid.
seg = np.zeros((16, 16), np.int64)
seg[4:12, 4:12] = 1
teacher = mask_logit_teacher(seg, g=4)
print("mask-logit grid:", teacher.logits.shape)
print("exp(t(x-1)) keeps 1 and shrinks the rest:", temperature_transform(torch.tensor([1.0, 0.9, 0.0]), 20.0))

# %% Finetune and compare locality before and after.
scfg = SpatialAlignConfig(**cfg["spatial_align"])
res = scfg.resolution


def small(images):
    from encoderlab.augment import resize

    return np.stack([resize(im.astype(np.float32) / 255.0, res) for im in images])


labels = np.stack([resize_labels(m, res) for m in evals.instances])
before = locality_correlation(model, small(evals.images), labels)
aligned, _ = spatial_align_run(model, train.images, train.instances, scfg)
after = locality_correlation(aligned, small(evals.images), labels)
print(f"locality {before:.3f} -> {after:.3f}")

# %% kNN probe per layer on frozen features. Scores are min-max normalised per model for plotting.
ds = gen_shapes_dataset(5, 90, vocab, count_weights=(1.0,), size=res)
data = {"train_x": ds.images[:60], "train_y": ds.shape_labels[:60],
        "test_x": ds.images[60:], "test_y": ds.shape_labels[60:]}
scores = {}
for name, m in (("base", model), ("aligned", aligned)):
    r = layer_sweep(m, "knn", [1, 2], data, ProbeConfig(knn_k=5), model_id=name)
    scores[name] = r.per_layer
    print(name, "knn per layer:", r.per_layer, "best layer", r.best_layer)
print("normalised:", normalize_scores(scores))
