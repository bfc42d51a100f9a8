"""Frame-averaged video embeddings, caption sources, clip storage and video finetuning."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugConfig, augment
from .contrastive import MetricsWriter, check_invariants, clip_loss, epoch_batches, lr_at, make_optimizer
from .model import CLIPModel, normalize_images
from .zeroshot import retrieve


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, H, W, 3] uint8 or float in [0, 1]
    duration_s: float = 1.0

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("a clip needs at least one frame")

    def __len__(self) -> int:
        return len(self.frames)


class CaptionSource(Protocol):
    def caption(self, clip_id: str) -> str: ...


class SyntheticCaptionSource:
    """Captions held in memory, e.g. the ground-truth motion captions of generated clips."""

    def __init__(self, captions: dict[str, str]):
        self.captions = dict(captions)

    def caption(self, clip_id: str) -> str:
        return self.captions[clip_id]


class TSVCaptionSource:
    """clip_id -> caption read from a tab-separated file with a ``clip_id``/``caption`` header."""

    def __init__(self, path):
        with open(path, newline="") as fh:
            self.captions = {r["clip_id"]: r["caption"] for r in csv.DictReader(fh, delimiter="\t")}

    def caption(self, clip_id: str) -> str:
        return self.captions[clip_id]


def sample_frames(clip, n: int = 8) -> np.ndarray:
    """``n`` indices evenly spaced over [0, T-1], rounded half down.

    n == 1 picks the middle frame; T < n repeats frames.
    """
    t = clip if isinstance(clip, (int, np.integer)) else len(clip)
    if t < 1:
        raise ValueError("empty clip")
    if n < 1:
        raise ValueError("n must be >= 1")
    # position k is k (t-1) / (n-1); ceil(x - 1/2) in integers keeps exact halves exact
    num, den = (np.array([t - 1]), 2) if n == 1 else (np.arange(n) * (t - 1), n - 1)
    return -((den - 2 * num) // (2 * den)).astype(np.int64)


def _frames_tensor(frames, res: int | None) -> torch.Tensor:
    from .augment import resize

    x = np.asarray(frames)
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / 255.0
    if res is not None and x.shape[1] != res:
        x = np.stack([resize(f, res) for f in x])
    return normalize_images(x)


def average_frame_embeddings(pooled: torch.Tensor, average: str = "pooled") -> torch.Tensor:
    """Reduce [..., T, D] per-frame pooled embeddings to unit video embeddings [..., D].

    ``average="pooled"`` means raw pooled embeddings then normalises once;
    ``"normalized"`` normalises each frame first.
    """
    if average == "normalized":
        pooled = F.normalize(pooled, dim=-1)
    elif average != "pooled":
        raise ValueError(f"unknown averaging mode {average!r}")
    return F.normalize(pooled.mean(dim=-2), dim=-1)


def encode_video(model: CLIPModel, clip, n: int = 8, *, res: int | None = None, average: str = "pooled",
                 frame_batch: int | None = None) -> torch.Tensor:
    """Unit embedding of one clip from ``n`` uniformly sampled frames."""
    frames = clip.frames if isinstance(clip, VideoClip) else clip
    idx = sample_frames(len(frames), n)
    x = _frames_tensor(np.asarray(frames)[idx], res)
    step = frame_batch or len(x)
    pooled = torch.cat([model.visual(x[i : i + step]) for i in range(0, len(x), step)])
    return average_frame_embeddings(pooled, average)


def encode_videos(model: CLIPModel, clips: np.ndarray, n: int = 8, *, res: int | None = None,
                  average: str = "pooled") -> torch.Tensor:
    """Batched :func:`encode_video` over clips [N, T, H, W, 3]."""
    clips = np.asarray(clips)
    idx = sample_frames(clips.shape[1], n)
    sel = clips[:, idx]
    b, t = sel.shape[:2]
    x = _frames_tensor(sel.reshape(b * t, *sel.shape[2:]), res)
    pooled = model.visual(x).reshape(b, t, -1)
    return average_frame_embeddings(pooled, average)


@torch.no_grad()
def video_retrieval(model: CLIPModel, clips, captions, n: int = 8, res: int | None = None, use_dsl=True,
                    ks=(1, 5, 10), average: str = "pooled") -> dict:
    vids = torch.cat([encode_videos(model, clips[i : i + 32], n, res=res, average=average)
                      for i in range(0, len(clips), 32)])
    txt = model.encode_text(model.tokenizer()(list(captions)))
    return retrieve(vids, txt, use_dsl=use_dsl, ks=ks)


# ------------------------------------------------------------------ storage


def write_clip_dir(root, clips: np.ndarray, captions, ids=None) -> Path:
    """Directory of per-clip PNG frames plus ``index.tsv`` (clip_id, n_frames, caption)."""
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = ids or [f"clip{i:05d}" for i in range(len(clips))]
    with open(root / "index.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["clip_id", "n_frames", "caption"])
        for cid, frames, cap in zip(ids, clips, captions):
            d = root / cid
            d.mkdir(exist_ok=True)
            for t, f in enumerate(frames):
                Image.fromarray(np.asarray(f)).save(d / f"{t:04d}.png")
            w.writerow([cid, len(frames), cap])
    return root


def read_clip_dir(root) -> tuple[list[str], np.ndarray, list[str]]:
    from PIL import Image

    root = Path(root)
    with open(root / "index.tsv", newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    clips = []
    for r in rows:
        n = int(r["n_frames"])
        clips.append(np.stack([np.asarray(Image.open(root / r["clip_id"] / f"{t:04d}.png").convert("RGB"))
                               for t in range(n)]))
    return [r["clip_id"] for r in rows], np.stack(clips), [r["caption"] for r in rows]


# --------------------------------------------------------------- finetuning


@dataclass
class VideoFTConfig:
    steps: int = 200
    batch_size: int = 32
    n_frames: int = 8
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    eps: float = 1e-6
    warmup_steps: int = 10
    resolution: int = 64
    max_logit_scale: float = 100.0
    average: str = "pooled"
    aug: AugConfig = field(default_factory=AugConfig.disabled)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.aug, dict):
            self.aug = AugConfig(**self.aug)
        self.betas = tuple(self.betas)


def _augment_clip(frames, aug: AugConfig, seed: int, res: int) -> np.ndarray:
    # one seed per clip: every frame gets the same crop, jitter and flip
    return np.stack([augment(f, aug, seed, res) for f in frames])


def video_finetune_run(model: CLIPModel, clips: np.ndarray, captions, cfg: VideoFTConfig, *,
                       metrics_path=None) -> list[dict]:
    """Contrastive finetuning with frame-averaged video embeddings in place of image embeddings."""
    tok = model.tokenizer()
    model.max_logit_scale = cfg.max_logit_scale
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(model, cfg)
    writer = MetricsWriter(metrics_path)
    batches = epoch_batches(len(captions), cfg.batch_size, rng)
    idx_frames = sample_frames(clips.shape[1], cfg.n_frames)
    model.train()
    for step in range(cfg.steps):
        idx = next(batches)
        lr = lr_at(step, cfg.lr, cfg.warmup_steps, cfg.steps)
        for g in opt.param_groups:
            g["lr"] = lr
        seeds = rng.integers(0, 2**31 - 1, size=len(idx))
        frames = np.stack([_augment_clip(clips[i][idx_frames], cfg.aug, int(s), cfg.resolution)
                           for i, s in zip(idx, seeds)])
        b, t = frames.shape[:2]
        pooled = model.visual(normalize_images(frames.reshape(b * t, *frames.shape[2:]))).reshape(b, t, -1)
        vid = average_frame_embeddings(pooled, cfg.average)
        txt = model.encode_text(tok([captions[i] for i in idx]))
        loss = clip_loss(vid, txt, model.logit_scale)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        model.clamp_logit_scale_()
        check_invariants(model, loss)
        writer({
            "step": step,
            "samples_seen": (step + 1) * b,
            "resolution": cfg.resolution,
            "clip_loss": loss.item(),
            "logit_scale": model.logit_scale.item(),
            "lr": lr,
        })
    model.eval()
    return writer.rows
