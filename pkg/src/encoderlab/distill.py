"""Contrastive distillation: KL(teacher || student) on image<->text similarity distributions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .contrastive import MetricsWriter, check_invariants, epoch_batches, lr_at, make_optimizer
from .model import CLIPModel, normalize_images, parameter_hash

EPS = 1e-12


@dataclass
class DistillConfig:
    teacher_temp_factor: float = 0.5
    steps: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    eps: float = 1e-6
    warmup_steps: int = 20
    student_ref_scale: float = 100.0
    max_logit_scale: float = 100.0
    resolution: int = 64
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.teacher_temp_factor <= 0:
            raise ValueError("teacher_temp_factor must be positive")
        self.betas = tuple(self.betas)


def teacher_scale(student_scale: float, factor: float = 0.5) -> float:
    """Teacher logit scale for a teacher temperature ``factor`` times the student's."""
    if student_scale <= 0:
        raise ValueError("student_scale must be positive")
    return student_scale / factor


def similarity_distributions(image_embs, text_embs, logit_scale):
    """(P_i2t, P_t2i): row-softmax and column-softmax of ``scale * I T^T``."""
    if image_embs.shape[0] == 0:
        raise ValueError("empty batch")
    if image_embs.shape[0] != text_embs.shape[0]:
        raise ValueError("image and text counts differ")
    s = logit_scale * image_embs @ text_embs.T
    return s.softmax(dim=1), s.softmax(dim=0)


def distill_loss(student_dists, teacher_dists) -> torch.Tensor:
    """Mean per-row KL(teacher || student), averaged over the two directions.

    Student probabilities are clamped at 1e-12 before the log. Teacher
    distributions are treated as constants.
    """
    (s_i2t, s_t2i), (t_i2t, t_t2i) = student_dists, teacher_dists
    if s_i2t.shape != t_i2t.shape or s_t2i.shape != t_t2i.shape:
        raise ValueError("student and teacher distributions differ in shape")

    def kl(t, s, dim):
        t = t.detach()
        terms = torch.where(t > 0, t * (torch.log(t.clamp(min=EPS)) - torch.log(s.clamp(min=EPS))), torch.zeros_like(t))
        return terms.sum(dim=dim).mean()

    return 0.5 * (kl(t_i2t, s_i2t, 1) + kl(t_t2i, s_t2i, 0))


def distill_loss_from_scores(student_scores, teacher_scores) -> torch.Tensor:
    """Same objective as :func:`distill_loss` computed in log space (used for training)."""
    t = teacher_scores.detach()
    i2t = F.kl_div(student_scores.log_softmax(1), t.log_softmax(1), log_target=True, reduction="sum") / t.shape[0]
    t2i = F.kl_div(student_scores.log_softmax(0), t.log_softmax(0), log_target=True, reduction="sum") / t.shape[1]
    return 0.5 * (i2t + t2i)


@torch.no_grad()
def argmax_agreement(student: CLIPModel, teacher: CLIPModel, images, class_texts, resolution: int) -> float:
    """Fraction of images where student and teacher pick the same class text."""
    x = normalize_images(_resize_batch(images, resolution))
    agree = []
    for m in (student, teacher):
        img = m.encode_image(x)
        txt = m.encode_text(m.tokenizer()(class_texts))
        agree.append((img @ txt.T).argmax(dim=1))
    return float((agree[0] == agree[1]).float().mean())


def _resize_batch(images, res):
    from .augment import resize

    imgs = np.asarray(images)
    if imgs.dtype == np.uint8:
        imgs = imgs.astype(np.float32) / 255.0
    if imgs.shape[1] == res:
        return imgs
    return np.stack([resize(im, res) for im in imgs])


def distill_run(student: CLIPModel, teacher: CLIPModel, images, captions, cfg: DistillConfig, *,
                metrics_path=None, eval_fn=None) -> list[dict]:
    """Finetune ``student`` toward ``teacher``'s sharpened similarity distributions (no augmentation)."""
    # the teacher only runs under no_grad, so its parameters are left as the caller set them
    was_training = teacher.training
    teacher.eval()
    t_hash = parameter_hash(teacher)
    student.max_logit_scale = cfg.max_logit_scale
    t_scale = teacher_scale(cfg.student_ref_scale, cfg.teacher_temp_factor)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(student, cfg)
    s_tok, t_tok = student.tokenizer(), teacher.tokenizer()
    writer = MetricsWriter(metrics_path)
    batches = epoch_batches(len(captions), cfg.batch_size, rng)
    student.train()
    for step in range(cfg.steps):
        idx = next(batches)
        lr = lr_at(step, cfg.lr, cfg.warmup_steps, cfg.steps)
        for g in opt.param_groups:
            g["lr"] = lr
        x = normalize_images(_resize_batch(images[idx], cfg.resolution))
        caps = [captions[i] for i in idx]
        with torch.no_grad():
            t_scores = t_scale * teacher.encode_image(x) @ teacher.encode_text(t_tok(caps)).T
        s_scores = student.logit_scale * student.encode_image(x) @ student.encode_text(s_tok(caps)).T
        loss = distill_loss_from_scores(s_scores, t_scores)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        student.clamp_logit_scale_()
        check_invariants(student, loss)
        row = {
            "step": step,
            "samples_seen": (step + 1) * len(idx),
            "resolution": cfg.resolution,
            "distill_loss": loss.item(),
            "logit_scale": student.logit_scale.item(),
            "teacher_logit_scale": t_scale,
            "lr": lr,
        }
        if eval_fn is not None and cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1):
            student.eval()
            row["agreement"] = eval_fn(student)
            student.train()
        writer(row)
    student.eval()
    if parameter_hash(teacher) != t_hash:
        raise RuntimeError("teacher parameters changed during distillation")
    teacher.train(was_training)
    return writer.rows
