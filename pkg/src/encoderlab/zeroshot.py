"""Zero-shot classification and retrieval: prompt ensembles, crop/squash max, DSL reweighting."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import resize
from .model import normalize_images


@dataclass
class PromptBank:
    templates: list[str]

    def __post_init__(self):
        if not self.templates:
            raise ValueError("prompt bank is empty")
        for t in self.templates:
            if t.count("{c}") != 1:
                raise ValueError(f"template needs exactly one {{c}} slot: {t!r}")

    def fill(self, classname: str) -> list[str]:
        return [t.replace("{c}", classname) for t in self.templates]

    @classmethod
    def from_file(cls, path) -> "PromptBank":
        lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
        return cls([ln for ln in lines if ln])

    def to_file(self, path):
        Path(path).write_text("\n".join(self.templates) + "\n")


def shapes_prompt_bank(vocab) -> PromptBank:
    """Every colour/position phrasing around the shape slot."""
    return PromptBank([f"{c} {{c}} {p}" for c in vocab.colors for p in vocab.positions])


@torch.no_grad()
def build_classifier(classnames, bank: PromptBank, model) -> torch.Tensor:
    """[C, clip_dim] class matrix: mean of unit prompt embeddings, renormalised."""
    if not classnames:
        raise ValueError("no class names")
    tok = model.tokenizer()
    rows = []
    for name in classnames:
        embs = model.encode_text(tok(bank.fill(name)))
        rows.append(F.normalize(embs.mean(dim=0), dim=-1))
    return torch.stack(rows)


def classify(image_embs, class_matrix, labels=None):
    """Argmax cosine prediction; returns (predictions, top-1 accuracy or None)."""
    scores = torch.as_tensor(image_embs) @ torch.as_tensor(class_matrix).T
    pred = scores.argmax(dim=-1).cpu().numpy()
    acc = None if labels is None else float(np.mean(pred == np.asarray(labels)))
    return pred, acc


def dsl_reweight(scores, dim: int = 0):
    """``scores * softmax(scores, dim)``."""
    s = torch.as_tensor(scores)
    return s * s.softmax(dim=dim)


def _recall(scores: torch.Tensor, gt: list[set], ks) -> dict[int, float]:
    order = scores.argsort(dim=-1, descending=True, stable=True).cpu().numpy()
    out = {}
    for k in ks:
        hits = [len(gt[i] & set(order[i, :k].tolist())) > 0 for i in range(len(gt))]
        out[k] = float(np.mean(hits))
    return out


def retrieve(image_embs, text_embs, use_dsl: bool = True, ks=(1, 5, 10), text_to_image=None) -> dict:
    """Recall@k for image->text and text->image.

    ``text_to_image`` maps every text row to its image row (identity by default),
    which allows several captions per image.
    """
    img = torch.as_tensor(image_embs)
    txt = torch.as_tensor(text_embs)
    n_img, n_txt = img.shape[0], txt.shape[0]
    t2i = np.arange(n_txt) if text_to_image is None else np.asarray(text_to_image)
    if max(ks) > min(n_img, n_txt):
        raise ValueError(f"k={max(ks)} exceeds gallery size")
    scores = img @ txt.T  # [N_img, N_txt]
    # each gallery item's scores are softmaxed across the queries, so an item
    # that matches many queries is down-weighted; per-row softmax would be monotone
    i2t_scores = dsl_reweight(scores, dim=0) if use_dsl else scores
    t2i_scores = dsl_reweight(scores, dim=1) if use_dsl else scores
    gt_i2t = [set(np.nonzero(t2i == i)[0].tolist()) for i in range(n_img)]
    gt_t2i = [{int(t2i[j])} for j in range(n_txt)]
    out = {}
    for k, v in _recall(i2t_scores, gt_i2t, ks).items():
        out[f"i2t_R@{k}"] = v
    for k, v in _recall(t2i_scores.T, gt_t2i, ks).items():
        out[f"t2i_R@{k}"] = v
    return out


# ------------------------------------------------------------- eval transforms


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    """Resize the short side to ``size`` then take the central square."""
    h, w = image.shape[:2]
    s = size / min(h, w)
    nh, nw = max(size, round(h * s)), max(size, round(w * s))
    x = resize(image, (nh, nw))
    top, left = (nh - size) // 2, (nw - size) // 2
    return x[top : top + size, left : left + size]


def squash(image: np.ndarray, size: int) -> np.ndarray:
    return resize(image, (size, size))


EVAL_TRANSFORMS = {"center_crop": center_crop, "squash": squash}


def _as_float(image):
    image = np.asarray(image)
    return image.astype(np.float32) / 255.0 if image.dtype == np.uint8 else image.astype(np.float32)


@torch.no_grad()
def encode_images(model, images, size: int, mode: str = "squash", batch_size: int = 256) -> torch.Tensor:
    fn = EVAL_TRANSFORMS[mode]
    out = []
    for i in range(0, len(images), batch_size):
        chunk = np.stack([fn(_as_float(im), size) for im in images[i : i + batch_size]])
        out.append(model.encode_image(normalize_images(chunk)))
    return torch.cat(out)


def eval_with_transforms(metric, modes=("center_crop", "squash")) -> tuple[float, dict]:
    """Max of ``metric(mode)`` over the evaluation transforms; returns (best, per-mode scores)."""
    scores = {m: float(metric(m)) for m in modes}
    return max(scores.values()), scores


def zeroshot_accuracy(model, images, labels, classnames, bank: PromptBank, size: int, mode="squash") -> float:
    cls = build_classifier(classnames, bank, model)
    _, acc = classify(encode_images(model, images, size, mode), cls, labels)
    return acc


def strip_border(image: np.ndarray, border_px: int) -> np.ndarray:
    h, w = image.shape[:2]
    if border_px < 0 or 2 * border_px >= min(h, w):
        raise ValueError(f"border {border_px}px leaves nothing of a {h}x{w} image")
    if border_px == 0:
        return image
    return image[border_px : h - border_px, border_px : w - border_px]


# ------------------------------------------------------------- dataset layouts


def write_class_folders(root, images, labels, classnames):
    """Classification layout: ``root/<classname>/<index>.png``."""
    from PIL import Image

    root = Path(root)
    for i, (img, y) in enumerate(zip(images, labels)):
        d = root / classnames[int(y)]
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.asarray(img)).save(d / f"{i:05d}.png")


def read_class_folders(root) -> tuple[np.ndarray, np.ndarray, list[str]]:
    from PIL import Image

    root = Path(root)
    classnames = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for y, name in enumerate(classnames):
        for f in sorted((root / name).glob("*.png")):
            images.append(np.asarray(Image.open(f).convert("RGB")))
            labels.append(y)
    return np.stack(images), np.asarray(labels), classnames


def write_retrieval_tsv(path, image_paths, captions):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["image", "caption"])
        for p, c in zip(image_paths, captions):
            w.writerow([str(p), c])


def read_retrieval_tsv(path) -> tuple[list[str], list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return [r["image"] for r in rows], [r["caption"] for r in rows]


def write_results(path, benchmark: str, results: dict):
    Path(path).write_text(json.dumps({"benchmark": benchmark, **results}, indent=2, sort_keys=True))
