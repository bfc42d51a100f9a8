"""Spatial alignment: self-distillation to a frozen layer plus mask-logit locality distillation."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugConfig, augment
from .contrastive import MetricsWriter, block_mask, epoch_batches, lr_at, make_optimizer
from .model import CLIPModel, TokenFeatures, add_layerscale, normalize_images, parameter_hash


@dataclass
class MaskLogitFeatures:
    logits: np.ndarray  # [H, W, K]
    query_grid: tuple[int, int]

    def __post_init__(self):
        g0, g1 = self.query_grid
        if self.logits.shape[-1] != g0 * g1:
            raise ValueError("channel count must equal the number of query points")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("mask logits must be finite")


@dataclass
class SpatialAlignConfig:
    teacher_layer: int = 3
    mask_ratio: float = 0.75
    mask_block: tuple[int, int] = (2, 2)
    droppath: float = 0.4
    layerscale_init: float = 0.1
    loc_temperature: float = 20.0
    weight_core: float = 1.0
    weight_loc: float = 1.0
    query_grid: int = 8
    margin: float = 10.0
    steps: int = 300
    batch_size: int = 32
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    eps: float = 1e-6
    warmup_steps: int = 0
    resolution: int = 32
    aug: AugConfig = field(default_factory=lambda: AugConfig((0.75, 1.33), (1.0, 1.0), 0.32, 0.32, 0.5))
    cache_dir: str | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.aug, dict):
            self.aug = AugConfig(**self.aug)
        self.mask_block = tuple(self.mask_block)
        self.betas = tuple(self.betas)
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in [0, 1)")
        if self.loc_temperature < 0:
            raise ValueError("temperature must be non-negative")


def _patch(x):
    return x.patch_tokens if isinstance(x, TokenFeatures) else x


def core_align_loss(student_last, teacher) -> torch.Tensor:
    """1 - mean token cosine similarity between student and frozen teacher tokens."""
    s, t = _patch(student_last), _patch(teacher)
    if s.shape != t.shape:
        raise ValueError(f"student tokens {tuple(s.shape)} vs teacher tokens {tuple(t.shape)}")
    return 1.0 - F.cosine_similarity(s, t.detach(), dim=-1, eps=1e-8).mean()


def pairwise_cossim(feats, eps: float = 1e-8) -> torch.Tensor:
    """[..., n, n] cosine similarity between tokens; zero-norm tokens are guarded by ``eps``."""
    x = torch.as_tensor(_patch(feats))
    x = x / x.norm(dim=-1, keepdim=True).clamp(min=eps)
    return x @ x.transpose(-2, -1)


def temperature_transform(x, t: float):
    """exp(t * (x - 1)): maps cosine similarities in [-1, 1] into (0, 1]."""
    return torch.exp(t * (torch.as_tensor(x) - 1.0))


def locality_loss(student_feats, teacher_tokens, t: float) -> torch.Tensor:
    """Mean squared gap between student pairwise similarity and the sharpened teacher similarity.

    ``teacher_tokens`` are mask-logit features on the student token grid, shaped
    [..., n_tok, K]. A :class:`MaskLogitFeatures` is first area-resampled to the
    student grid, which requires ``student_feats`` to be a TokenFeatures.
    """
    s = _patch(student_feats)
    if isinstance(teacher_tokens, MaskLogitFeatures):
        if not isinstance(student_feats, TokenFeatures):
            raise TypeError("resampling mask logits needs the student token grid")
        teacher_tokens = resample_mask_logits(teacher_tokens, student_feats.grid)
    teacher_tokens = torch.as_tensor(teacher_tokens, dtype=s.dtype)
    if teacher_tokens.shape[-2] != s.shape[-2]:
        raise ValueError("teacher and student token grids differ")
    target = temperature_transform(pairwise_cossim(teacher_tokens), t).detach()
    return ((pairwise_cossim(s) - target) ** 2).mean()


def mask_logit_teacher(segmentation: np.ndarray, g: int, margin: float = 10.0) -> MaskLogitFeatures:
    """Synthetic mask logits: channel k is +margin on the region under query point k, -margin elsewhere.

    Query points sit at the centres of a g x g grid. Negative labels mark
    unlabelled pixels; a point landing on one yields an all-negative channel.
    """
    seg = np.asarray(segmentation)
    h, w = seg.shape
    ys = ((np.arange(g) + 0.5) * h / g).astype(int)
    xs = ((np.arange(g) + 0.5) * w / g).astype(int)
    labels = seg[ys[:, None], xs[None, :]].reshape(-1)
    inside = seg[..., None] == labels[None, None, :]
    inside &= labels[None, None, :] >= 0
    return MaskLogitFeatures(np.where(inside, margin, -margin).astype(np.float32), (g, g))


def resample_mask_logits(features: MaskLogitFeatures, grid) -> np.ndarray:
    """Area-average [H, W, K] logits down to the token grid -> [rows*cols, K]."""
    x = torch.from_numpy(np.ascontiguousarray(features.logits)).permute(2, 0, 1)[None]
    x = F.interpolate(x, size=tuple(grid), mode="area")
    return x[0].permute(1, 2, 0).reshape(-1, x.shape[1]).numpy()


def token_labels(labels: np.ndarray, grid) -> np.ndarray:
    """Majority label inside each patch -> [rows, cols]."""
    rows, cols = grid
    h, w = labels.shape
    ph, pw = h // rows, w // cols
    blocks = labels[: rows * ph, : cols * pw].reshape(rows, ph, cols, pw).transpose(0, 2, 1, 3).reshape(rows, cols, -1)
    out = np.empty((rows, cols), dtype=labels.dtype)
    for r in range(rows):
        for c in range(cols):
            vals, counts = np.unique(blocks[r, c], return_counts=True)
            out[r, c] = vals[np.argmax(counts)]
    return out


@torch.no_grad()
def locality_correlation(model: CLIPModel, images, instances, layer: int | None = None) -> float:
    """Mean Pearson correlation between token cosine similarity and same-region indicators."""
    vis = model.visual
    layer = layer or vis.cfg.depth
    feats = vis.forward_features(normalize_images(images), [layer])[layer]
    sims = pairwise_cossim(feats).numpy()
    iu = np.triu_indices(sims.shape[-1], k=1)
    out = []
    for sim, inst in zip(sims, instances):
        lab = token_labels(np.asarray(inst), feats.grid).reshape(-1)
        same = (lab[:, None] == lab[None, :]).astype(np.float64)[iu]
        if same.std() == 0:
            continue
        out.append(np.corrcoef(sim[iu], same)[0, 1])
    return float(np.mean(out))


class TeacherCache:
    """On-disk cache of teacher targets keyed by (image hash, augmentation seed)."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, image, seed) -> Path:
        h = hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()[:24]
        return self.root / f"{h}_{int(seed)}.npz"

    def get(self, image, seed):
        p = self._path(image, seed)
        if not p.exists():
            return None
        with np.load(p) as z:
            return {k: z[k] for k in z.files}

    def put(self, image, seed, **arrays):
        with open(self._path(image, seed), "wb") as fh:
            np.savez(fh, **arrays)


def spatial_align_run(base: CLIPModel, images: np.ndarray, segmentations: np.ndarray, cfg: SpatialAlignConfig, *,
                      metrics_path=None) -> tuple[CLIPModel, list[dict]]:
    """Finetune a copy of ``base`` with L = w_core * L_core + w_loc * L_loc.

    Both teachers are frozen and see the same augmented (unmasked) image as the
    student; the student sees it with token blocks masked. LayerScale is the
    only parameter added.
    """
    teacher = copy.deepcopy(base).eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    t_hash = parameter_hash(teacher)
    torch.manual_seed(cfg.seed)
    student = add_layerscale(copy.deepcopy(base), cfg.layerscale_init, cfg.droppath)
    vis = student.visual
    if not 1 <= cfg.teacher_layer <= teacher.visual.cfg.depth:
        raise ValueError("teacher_layer outside the teacher's depth")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(student, cfg)
    writer = MetricsWriter(metrics_path)
    cache = TeacherCache(cfg.cache_dir) if cfg.cache_dir else None
    grid = (cfg.resolution // vis.cfg.patch_size,) * 2
    batches = epoch_batches(len(images), cfg.batch_size, rng)
    student.train()
    for step in range(cfg.steps):
        idx = next(batches)
        lr = lr_at(step, cfg.lr, cfg.warmup_steps, cfg.steps)
        for g in opt.param_groups:
            g["lr"] = lr
        seeds = rng.integers(0, 2**31 - 1, size=len(idx))
        imgs, loc_targets = [], []
        for i, s in zip(idx, seeds):
            im, seg = augment(images[i], cfg.aug, int(s), cfg.resolution, labels=segmentations[i])
            imgs.append(im)
            cached = cache.get(images[i], s) if cache else None
            if cached is None:
                mlf = mask_logit_teacher(seg, cfg.query_grid, cfg.margin)
                target = resample_mask_logits(mlf, grid)
                if cache:
                    cache.put(images[i], s, loc=target)
            else:
                target = cached["loc"]
            loc_targets.append(target)
        x = normalize_images(np.stack(imgs))
        mask = np.stack([block_mask(grid, cfg.mask_ratio, cfg.mask_block, rng) for _ in idx]) \
            if cfg.mask_ratio > 0 else None
        with torch.no_grad():
            t_feats = teacher.visual.forward_features(x, [cfg.teacher_layer])[cfg.teacher_layer]
        s_feats = vis.forward_features(x, mask=None if mask is None else torch.from_numpy(mask.reshape(len(idx), -1)))
        s_last = s_feats[vis.cfg.depth]
        l_core = core_align_loss(s_last, t_feats)
        l_loc = locality_loss(s_last, torch.from_numpy(np.stack(loc_targets)), cfg.loc_temperature)
        loss = cfg.weight_core * l_core + cfg.weight_loc * l_loc
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if not torch.isfinite(loss):
            raise RuntimeError("non-finite spatial alignment loss")
        writer({
            "step": step,
            "samples_seen": (step + 1) * len(idx),
            "resolution": cfg.resolution,
            "core_loss": l_core.item(),
            "loc_loss": l_loc.item(),
            "lr": lr,
        })
    student.eval()
    if parameter_hash(teacher) != t_hash:
        raise RuntimeError("teacher parameters changed during spatial alignment")
    return student, writer.rows
