"""Contrastive pretraining at toy scale, then zero-shot and retrieval.

The toy config trains for a few seconds, so the numbers are near chance. Swap
``configs/toy.yaml`` for ``None`` to use the full defaults (a few minutes on a
single CPU core, held-out zero-shot around 0.9).
"""
from __future__ import annotations

from pathlib import Path

import torch

from encoderlab.augment import ResolutionSchedule, resolution_at
from encoderlab.config import load_config
from encoderlab.contrastive import TrainConfig, clip_loss, train_run
from encoderlab.data import ShapeVocab, gen_heldout_eval, gen_shapes_dataset, heldout_pairs
from encoderlab.model import EncoderConfig, TextConfig, build_model
from encoderlab.zeroshot import (encode_images, eval_with_transforms, retrieve, shapes_prompt_bank,
                                 zeroshot_accuracy)

CONFIG = Path(__file__).parents[1] / "configs" / "toy.yaml"
cfg = load_config(CONFIG)
vocab = ShapeVocab()
words = vocab.words()

# %% Data. Held-out colour/shape pairs are excluded from the captions the model learns from.
held = heldout_pairs(vocab)
train = gen_shapes_dataset(0, cfg["data"]["n_train"], vocab, exclude=held, attr_dropout=0.5)
heldout = gen_heldout_eval(1, cfg["data"]["n_eval"], vocab)

# %% The loss on its own: matched pairs on the diagonal, symmetric cross-entropy.
e = torch.nn.functional.normalize(torch.randn(4, 8), dim=-1)
print("loss for perfect pairs at scale 100:", float(clip_loss(e, e, 100.0)))

# %% Model and training. Resolution grows with the number of samples seen.
model = build_model(EncoderConfig(**cfg["model"]["vision"]),
                    TextConfig(vocab_size=len(words) + 3, **cfg["model"]["text"]), words, seed=0)
tcfg = TrainConfig(**cfg["pretrain"])
sched = ResolutionSchedule(tcfg.schedule)
print("resolution at 0 / 100 / 180 samples:", [resolution_at(sched, n) for n in (0, 100, 180)])
rows = train_run(model, train.images, train.captions, tcfg)
print(f"{len(rows)} steps, clip loss {rows[0]['clip_loss']:.3f} -> {rows[-1]['clip_loss']:.3f}")

# %% Zero-shot over shape names, scored with the better of two resize modes.
bank = shapes_prompt_bank(vocab)
res = model.visual.cfg.image_size
best, per_mode = eval_with_transforms(
    lambda m: zeroshot_accuracy(model, heldout.images, heldout.shape_labels, list(vocab.shapes), bank, res, m))
print(f"held-out zero-shot top-1 {best:.3f} {per_mode}  (chance {1 / len(vocab.shapes):.3f})")

# %% Retrieval, with and without the dual-softmax rerank.
with torch.no_grad():
    txt = model.encode_text(model.tokenizer()(heldout.captions))
    img = encode_images(model, heldout.images, res)
for dsl in (False, True):
    r = retrieve(img, txt, use_dsl=dsl)
    print(f"dsl={dsl}: t2i R@1 {r['t2i_R@1']:.3f}  i2t R@1 {r['i2t_R@1']:.3f}")
