"""Distilling into a smaller student, then finetuning on short clips.

Both use the toy config, so this checks the plumbing rather than the gains.
"""
from __future__ import annotations

from pathlib import Path

import torch

from encoderlab.config import load_config
from encoderlab.contrastive import TrainConfig, train_run
from encoderlab.data import ShapeVocab, gen_motion_clips, gen_shapes_dataset, heldout_pairs
from encoderlab.distill import DistillConfig, argmax_agreement, distill_loss_from_scores, distill_run, teacher_scale
from encoderlab.model import EncoderConfig, TextConfig, build_model
from encoderlab.video import VideoFTConfig, average_frame_embeddings, video_finetune_run, video_retrieval

CONFIG = Path(__file__).parents[1] / "configs" / "toy.yaml"
cfg = load_config(CONFIG)
vocab = ShapeVocab()
words = vocab.words()
held = heldout_pairs(vocab)
train = gen_shapes_dataset(0, cfg["data"]["n_train"], vocab, exclude=held)
evals = gen_shapes_dataset(2, cfg["data"]["n_eval"], vocab, count_weights=(1.0,), exclude=held)


def make(vision_over=None, seed=0):
    vis = {**cfg["model"]["vision"], **(vision_over or {})}
    return build_model(EncoderConfig(**vis), TextConfig(vocab_size=len(words) + 3, **cfg["model"]["text"]),
                       words, seed=seed)


teacher = make()
train_run(teacher, train.images, train.captions, TrainConfig(**cfg["pretrain"]))

# %% The target is sharpened: the teacher uses a smaller temperature than the student.
print("teacher scale for student scale 100, factor 0.5:", teacher_scale(100.0, 0.5))
scores = torch.randn(3, 3)
print("KL of a score matrix with itself:", float(distill_loss_from_scores(scores, scores)))

# %% Distill. Agreement is how often student and teacher pick the same caption.
dc = dict(cfg["distill"])
student = make(dc.pop("student"), seed=1)
dcfg = DistillConfig(**dc)
before = argmax_agreement(student, teacher, evals.images, evals.captions, dcfg.resolution)
distill_run(student, teacher, train.images, train.captions, dcfg)
after = argmax_agreement(student, teacher, evals.images, evals.captions, dcfg.resolution)
print(f"argmax agreement {before:.3f} -> {after:.3f}")

# %% Video: frames go through the image tower and the pooled embeddings are averaged.
pooled = torch.nn.functional.normalize(torch.randn(2, 4, 8), dim=-1)
print("averaged embedding shape:", tuple(average_frame_embeddings(pooled).shape))

clips = gen_motion_clips(3, cfg["data"]["n_clips"], cfg["data"]["frames"], vocab, exclude=held)
ev = gen_motion_clips(4, cfg["data"]["n_eval_clips"], cfg["data"]["frames"], vocab, exclude=held)
vc = VideoFTConfig(**cfg["video_ft"])
r0 = video_retrieval(teacher, ev.frames, ev.captions, vc.n_frames, vc.resolution)
video_finetune_run(teacher, clips.frames, clips.captions, vc)
r1 = video_retrieval(teacher, ev.frames, ev.captions, vc.n_frames, vc.resolution)
print(f"t2v R@1 {r0['t2i_R@1']:.3f} -> {r1['t2i_R@1']:.3f}")
