"""Training-time image augmentation and the progressive-resolution schedule.

Augmentation order is crop -> colour jitter -> horizontal flip, then an
antialiased bilinear resize to the current schedule resolution.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class AugConfig:
    aspect_jitter: tuple[float, float] = (0.75, 1.33)
    crop_scale: tuple[float, float] = (0.08, 1.0)
    brightness_jitter: float = 0.32
    saturation_jitter: float = 0.32
    hflip_prob: float = 0.5

    def __post_init__(self):
        self.aspect_jitter = tuple(self.aspect_jitter)
        self.crop_scale = tuple(self.crop_scale)
        for lo, hi in (self.aspect_jitter, self.crop_scale):
            if lo > hi:
                raise ValueError("range lower bound exceeds upper bound")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")

    @classmethod
    def disabled(cls) -> "AugConfig":
        return cls((1.0, 1.0), (1.0, 1.0), 0.0, 0.0, 0.0)


@dataclass
class ResolutionSchedule:
    stages: list[tuple[int, int]]  # (samples budget, resolution)

    def __post_init__(self):
        self.stages = [(int(b), int(r)) for b, r in self.stages]
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        res = [r for _, r in self.stages]
        if any(b <= 0 for b, _ in self.stages):
            raise ValueError("stage budgets must be positive")
        if any(a >= b for a, b in zip(res, res[1:])):
            raise ValueError("resolutions must be strictly increasing")

    @property
    def total(self) -> int:
        return sum(b for b, _ in self.stages)

    @property
    def final_resolution(self) -> int:
        return self.stages[-1][1]


def resolution_at(schedule: ResolutionSchedule, samples_seen: int) -> int:
    """Resolution of the stage whose half-open budget interval holds ``samples_seen``."""
    if samples_seen < 0:
        raise ValueError("samples_seen must be non-negative")
    ends = np.cumsum([b for b, _ in schedule.stages])
    i = bisect.bisect_right(ends.tolist(), samples_seen)
    return schedule.stages[min(i, len(schedule.stages) - 1)][1]


def resize(image: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Antialiased bilinear resize of an HxWx3 float image."""
    if isinstance(size, int):
        size = (size, size)
    if image.shape[:2] == tuple(size):
        return image
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=True)
    return t[0].permute(1, 2, 0).numpy()


def _crop_box(rng, h, w, scale, ratio):
    if tuple(scale) == (1.0, 1.0) and tuple(ratio) == (1.0, 1.0):
        return 0, 0, h, w  # cropping disabled: keep the full frame whatever its aspect
    area = h * w
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        ar = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * ar)))
        ch = int(round(math.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fallback: largest centred crop within the aspect bounds
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def augment(image: np.ndarray, cfg: AugConfig, rng_seed, out_size: int | None = None, labels=None):
    """Random-resized crop, brightness/saturation jitter and hflip of an HxWx3 image in [0, 1].

    When ``labels`` (an HxW integer map) is given it receives the same crop and
    flip with nearest-neighbour resizing, and ``(image, labels)`` is returned.
    """
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    h, w = image.shape[:2]
    top, left, ch, cw = _crop_box(rng, h, w, cfg.crop_scale, cfg.aspect_jitter)
    x = image[top : top + ch, left : left + cw].astype(np.float32)
    if cfg.brightness_jitter > 0:
        b = cfg.brightness_jitter
        x = x * np.float32(rng.uniform(max(0.0, 1 - b), 1 + b))
    if cfg.saturation_jitter > 0:
        s = cfg.saturation_jitter
        gray = x @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        x = gray[..., None] + np.float32(rng.uniform(max(0.0, 1 - s), 1 + s)) * (x - gray[..., None])
    x = np.clip(x, 0.0, 1.0)
    flip = rng.random() < cfg.hflip_prob
    if flip:
        x = x[:, ::-1]
    size = out_size or (h, w)
    out = np.clip(resize(x, size), 0.0, 1.0)
    if labels is None:
        return out
    lab = np.asarray(labels)[top : top + ch, left : left + cw]
    if flip:
        lab = lab[:, ::-1]
    return out, resize_labels(lab, size)


def resize_labels(labels: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbour resize of an integer label map."""
    if isinstance(size, int):
        size = (size, size)
    h, w = labels.shape
    rows = np.minimum((np.arange(size[0]) + 0.5) * h / size[0], h - 1).astype(int)
    cols = np.minimum((np.arange(size[1]) + 0.5) * w / size[1], w - 1).astype(int)
    return labels[rows[:, None], cols[None, :]]


def augment_batch(images: np.ndarray, cfg: AugConfig, seeds, out_size: int) -> np.ndarray:
    return np.stack([augment(img, cfg, int(s), out_size) for img, s in zip(images, seeds)])
