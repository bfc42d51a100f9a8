"""Contrastive image-text pretraining: loss, logit-scale cap, mask regularization, training loop."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugConfig, ResolutionSchedule, augment_batch, resolution_at
from .lamb import Lamb, param_groups
from .model import CLIPModel, normalize_images, save_checkpoint


class InvariantError(RuntimeError):
    """A training invariant (finite loss, capped logit scale) was violated."""


def clip_loss(image_embs: torch.Tensor, text_embs: torch.Tensor, logit_scale) -> torch.Tensor:
    """Symmetric InfoNCE over the in-batch similarity matrix; matching pairs on the diagonal."""
    n = image_embs.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if text_embs.shape[0] != n:
        raise ValueError(f"{n} image embeddings vs {text_embs.shape[0]} text embeddings")
    scores = logit_scale * image_embs @ text_embs.T
    target = torch.arange(n, device=scores.device)
    return 0.5 * (F.cross_entropy(scores, target) + F.cross_entropy(scores.T, target))


def clamp_logit_scale(scale, max_scale: float = 100.0):
    if isinstance(scale, torch.Tensor):
        return scale.clamp(max=max_scale)
    return min(float(scale), max_scale)


@dataclass
class MaskRegSpec:
    batch_fraction: float = 1 / 16
    token_mask_ratio: float = 0.4
    mask_block: tuple[int, int] = (2, 2)

    def __post_init__(self):
        self.mask_block = tuple(self.mask_block)
        if not 0.0 < self.token_mask_ratio < 1.0:
            raise ValueError("token_mask_ratio must be in (0, 1)")
        if not 0.0 < self.batch_fraction <= 1.0:
            raise ValueError("batch_fraction must be in (0, 1]")

    def n_duplicated(self, batch_size: int) -> int:
        return max(1, math.ceil(self.batch_fraction * batch_size - 1e-9))


def block_mask(grid, ratio: float, block, rng: np.random.Generator) -> np.ndarray:
    """Boolean [rows, cols] mask built from aligned blocks drawn without replacement."""
    rows, cols = grid
    bh, bw = block
    if bh > rows or bw > cols:
        raise ValueError(f"mask block {block} larger than grid {grid}")
    cells = [(r, c) for r in range(0, rows, bh) for c in range(0, cols, bw)]
    order = rng.permutation(len(cells))
    mask = np.zeros((rows, cols), dtype=bool)
    target = ratio * rows * cols
    for i in order:
        if mask.sum() >= target:
            break
        r, c = cells[i]
        mask[r : r + bh, c : c + bw] = True
    return mask


def masked_cosine_loss(masked_tokens, target_tokens, mask) -> torch.Tensor:
    """Mean over masked positions of 1 - cos(masked output, target)."""
    cos = F.cosine_similarity(masked_tokens, target_tokens, dim=-1, eps=1e-8)
    m = mask.reshape(cos.shape).to(cos.dtype)
    return ((1 - cos) * m).sum() / m.sum().clamp(min=1)


def mask_regularization_loss(model: CLIPModel, images: torch.Tensor, spec: MaskRegSpec, rng: np.random.Generator,
                             unmasked_tokens: torch.Tensor | None = None, return_tokens: bool = False):
    """Re-encode the first ``n`` images with token blocks masked and align to the unmasked output.

    The unmasked target is detached, and the masked forward never enters the
    CLIP similarity matrix, so the two objectives' gradients stay disjoint.
    Returns (loss, patch mask [n, rows*cols]), plus the masked output tokens
    when ``return_tokens`` is set.
    """
    vis = model.visual
    n = spec.n_duplicated(images.shape[0])
    dup = images[:n]
    grid = (images.shape[-2] // vis.cfg.patch_size, images.shape[-1] // vis.cfg.patch_size)
    mask = np.stack([block_mask(grid, spec.token_mask_ratio, spec.mask_block, rng) for _ in range(n)])
    mask = torch.from_numpy(mask.reshape(n, -1)).to(images.device)
    if unmasked_tokens is None:
        with torch.no_grad():
            unmasked_tokens = vis.forward_features(dup)[vis.cfg.depth].patch_tokens
    target = unmasked_tokens[:n].detach()
    masked = vis.forward_features(dup, mask=mask)[vis.cfg.depth].patch_tokens
    loss = masked_cosine_loss(masked, target, mask)
    return (loss, mask, masked) if return_tokens else (loss, mask)


def pretrain_losses(model: CLIPModel, x: torch.Tensor, text, mask_reg: MaskRegSpec | None,
                    rng: np.random.Generator) -> dict:
    """CLIP loss on the full batch plus mask regularization on its duplicated head.

    Returns the two losses and the branch outputs they were computed from
    (``unmasked_tokens``, ``masked_tokens``).
    """
    vis = model.visual
    feats = vis.forward_features(x)[vis.cfg.depth]
    img = F.normalize(vis.pool(feats.values), dim=-1)
    txt = model.encode_text(text)
    out = {"clip_loss": clip_loss(img, txt, model.logit_scale), "unmasked_tokens": feats.patch_tokens}
    if mask_reg is None:
        out["mask_loss"] = torch.zeros((), dtype=img.dtype)
        out["masked_tokens"] = None
    else:
        out["mask_loss"], _, out["masked_tokens"] = mask_regularization_loss(
            model, x, mask_reg, rng, feats.patch_tokens, return_tokens=True)
    return out


def lr_at(step: int, base_lr: float, warmup: int, total: int, min_ratio: float = 0.0) -> float:
    """Linear warm-up from base_lr/warmup, then cosine decay to ``min_ratio * base_lr``."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total - warmup)
    frac = min(1.0, (step - warmup) / span)
    return base_lr * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 64
    lr: float = 2e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    eps: float = 1e-6
    warmup_steps: int = 30
    min_lr_ratio: float = 0.0
    schedule: list = field(default_factory=lambda: [(12800, 32), (12800, 48), (12800, 64)])
    aug: AugConfig = field(default_factory=AugConfig)
    mask_reg: MaskRegSpec | None = field(default_factory=MaskRegSpec)
    max_logit_scale: float = 100.0
    seed: int = 0
    max_epochs: int | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.aug, dict):
            self.aug = AugConfig(**self.aug)
        if isinstance(self.mask_reg, dict):
            self.mask_reg = MaskRegSpec(**self.mask_reg)
        self.betas = tuple(self.betas)
        self.schedule = [(s["samples"], s["resolution"]) if isinstance(s, dict) else tuple(s) for s in self.schedule]


def make_optimizer(model, cfg) -> Lamb:
    return Lamb(param_groups(model, cfg.weight_decay), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator, max_epochs: int | None = None):
    """Yield index batches from successive shuffled epochs (drop_last)."""
    epoch = 0
    while max_epochs is None or epoch < max_epochs:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i : i + batch_size]
        epoch += 1


def check_invariants(model: CLIPModel, loss: torch.Tensor):
    if not torch.isfinite(loss):
        raise InvariantError(f"non-finite loss {loss.item()}")
    if model.logit_scale.item() > model.max_logit_scale * (1 + 1e-6):
        raise InvariantError("logit scale above its cap")


class MetricsWriter:
    """Collect per-step metrics and mirror them to a JSONL file."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, row: dict):
        self.rows.append(row)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(row) + "\n")


def train_run(model: CLIPModel, images: np.ndarray, captions, cfg: TrainConfig, *, metrics_path=None,
              checkpoint_dir=None, log=None) -> list[dict]:
    """Pretrain ``model`` in place on (uint8 image, caption) pairs; returns the metric rows."""
    tok = model.tokenizer()
    model.max_logit_scale = cfg.max_logit_scale
    schedule = ResolutionSchedule(cfg.schedule)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(model, cfg)
    writer = MetricsWriter(metrics_path)
    batches = epoch_batches(len(captions), cfg.batch_size, rng, cfg.max_epochs)
    model.train()
    for step in range(cfg.steps):
        try:
            idx = next(batches)
        except StopIteration:
            warnings.warn(f"dataset exhausted after {step} steps; stopping early")
            break
        samples_seen = step * cfg.batch_size
        res = resolution_at(schedule, samples_seen)
        lr = lr_at(step, cfg.lr, cfg.warmup_steps, cfg.steps, cfg.min_lr_ratio)
        for g in opt.param_groups:
            g["lr"] = lr
        seeds = rng.integers(0, 2**31 - 1, size=len(idx))
        x = normalize_images(augment_batch(images[idx], cfg.aug, seeds, res))
        text = tok([captions[i] for i in idx])

        parts = pretrain_losses(model, x, text, cfg.mask_reg, rng)
        loss_clip, loss_mask = parts["clip_loss"], parts["mask_loss"]
        loss = loss_clip + loss_mask
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        model.clamp_logit_scale_()
        check_invariants(model, loss)
        row = {
            "step": step,
            "samples_seen": samples_seen + len(idx),
            "resolution": res,
            "clip_loss": loss_clip.item(),
            "mask_loss": loss_mask.item(),
            "logit_scale": model.logit_scale.item(),
            "lr": lr,
        }
        writer(row)
        if log and (step % 50 == 0 or step == cfg.steps - 1):
            log(row)
        if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"step{step + 1:06d}.npz", model, {"step": step + 1})
    model.eval()
    return writer.rows
