"""Frozen-feature probes, label propagation, layer sweeps and cross-model score normalisation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import TokenFeatures, normalize_images, parameter_hash

PROBE_RESULT_SCHEMA = {
    "type": "object",
    "required": ["model_id", "task", "per_layer", "best_layer", "best", "last", "higher_is_better"],
    "properties": {
        "model_id": {"type": "string"},
        "task": {"type": "string"},
        "per_layer": {"type": "object", "patternProperties": {"^[0-9]+$": {"type": "number"}},
                      "additionalProperties": False, "minProperties": 1},
        "best_layer": {"type": "integer", "minimum": 1},
        "best": {"type": "number"},
        "last": {"type": "number"},
        "higher_is_better": {"type": "boolean"},
    },
}


@dataclass
class ProbeConfig:
    knn_k: int = 10
    epochs: int = 100
    lr: float = 1e-2
    weight_decay: float = 1e-4
    attn_heads: int = 4
    seg_kernel: int = 3
    context_n: int = 7
    topk: int = 5
    prop_temperature: float = 0.1
    pooling: str = "mean"  # mean of patch tokens, or "cls"
    seed: int = 0


@dataclass
class ProbeResult:
    per_layer: dict[int, float]
    task_id: str
    higher_is_better: bool = True
    model_id: str = "model"
    best_layer: int = field(init=False)
    best_score: float = field(init=False)
    last_score: float = field(init=False)

    def __post_init__(self):
        if not self.per_layer:
            raise ValueError("per_layer is empty")
        self.per_layer = {int(k): float(v) for k, v in self.per_layer.items()}
        pick = max if self.higher_is_better else min
        # ties go to the shallower layer
        self.best_layer = pick(sorted(self.per_layer), key=lambda k: self.per_layer[k])
        self.best_score = self.per_layer[self.best_layer]
        self.last_score = self.per_layer[max(self.per_layer)]

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "task": self.task_id,
            "per_layer": {str(k): v for k, v in sorted(self.per_layer.items())},
            "best_layer": self.best_layer,
            "best": self.best_score,
            "last": self.last_score,
            "higher_is_better": self.higher_is_better,
        }

    def save(self, path):
        import jsonschema

        doc = self.to_json()
        jsonschema.validate(doc, PROBE_RESULT_SCHEMA)
        Path(path).write_text(json.dumps(doc, indent=2))

    @classmethod
    def load(cls, path) -> "ProbeResult":
        import jsonschema

        doc = json.loads(Path(path).read_text())
        jsonschema.validate(doc, PROBE_RESULT_SCHEMA)
        return cls(doc["per_layer"], doc["task"], doc["higher_is_better"], doc["model_id"])


# ---------------------------------------------------------------- classifiers


def _np(x) -> np.ndarray:
    if isinstance(x, TokenFeatures):
        x = x.values
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def knn_probe(train_feats, train_labels, test_feats, test_labels, k: int = 10) -> float:
    """Cosine kNN, majority vote (ties go to the smallest label)."""
    xtr, xte = _unit(_np(train_feats).astype(np.float64)), _unit(_np(test_feats).astype(np.float64))
    ytr, yte = np.asarray(train_labels), np.asarray(test_labels)
    if k > len(xtr):
        raise ValueError(f"k={k} exceeds the {len(xtr)} training points")
    sims = xte @ xtr.T
    nn_idx = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    n_cls = int(max(ytr.max(), yte.max())) + 1
    votes = np.stack([np.bincount(ytr[row], minlength=n_cls) for row in nn_idx])
    return float(np.mean(votes.argmax(axis=1) == yte))


def _check_labels(labels):
    if len(np.unique(labels)) < 2:
        raise ValueError("probe needs at least two classes")


def _fit(head: nn.Module, x: torch.Tensor, y: torch.Tensor, cfg: ProbeConfig, n_cls: int):
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    for _ in range(cfg.epochs):
        logits = head(x)
        loss = F.cross_entropy(logits.reshape(-1, n_cls), y.reshape(-1), ignore_index=-1)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return head


def _standardize(train: np.ndarray, *others):
    mu = train.reshape(-1, train.shape[-1]).mean(0)
    sd = train.reshape(-1, train.shape[-1]).std(0) + 1e-6
    return [torch.as_tensor((a - mu) / sd, dtype=torch.float32) for a in (train, *others)]


def linear_probe(features, labels, heldout, cfg: ProbeConfig | None = None) -> float:
    """Full-batch affine classifier on frozen features; ``heldout`` is (features, labels)."""
    cfg = cfg or ProbeConfig()
    ytr = np.asarray(labels)
    _check_labels(ytr)
    xte_np, yte = _np(heldout[0]), np.asarray(heldout[1])
    n_cls = int(max(ytr.max(), yte.max())) + 1
    xtr, xte = _standardize(_np(features).astype(np.float32), xte_np.astype(np.float32))
    torch.manual_seed(cfg.seed)
    head = _fit(nn.Linear(xtr.shape[-1], n_cls), xtr, torch.as_tensor(ytr), cfg, n_cls)
    with torch.no_grad():
        return float(np.mean(head(xte).argmax(-1).numpy() == yte))


class _AttnProbe(nn.Module):
    def __init__(self, dim: int, heads: int, n_cls: int):
        super().__init__()
        self.query = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.mlp = nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.head = nn.Linear(dim, n_cls)

    def forward(self, tokens):
        kv = self.norm(tokens)
        q = self.query.expand(tokens.shape[0], -1, -1)
        x = q + self.attn(q, kv, kv, need_weights=False)[0]
        x = x + self.mlp(x)
        return self.head(x[:, 0])


def attention_probe(token_features, labels, heldout, cfg: ProbeConfig | None = None) -> float:
    """One randomly initialised cross-attention block with a learned query, then a linear classifier."""
    cfg = cfg or ProbeConfig()
    ytr = np.asarray(labels)
    _check_labels(ytr)
    tr, te = _np(token_features).astype(np.float32), _np(heldout[0]).astype(np.float32)
    if tr.shape[-1] != te.shape[-1]:
        raise ValueError("train and heldout token widths differ")
    yte = np.asarray(heldout[1])
    n_cls = int(max(ytr.max(), yte.max())) + 1
    dim = tr.shape[-1]
    if dim % cfg.attn_heads:
        raise ValueError(f"width {dim} not divisible by {cfg.attn_heads} heads")
    xtr, xte = _standardize(tr, te)
    torch.manual_seed(cfg.seed)
    head = _fit(_AttnProbe(dim, cfg.attn_heads, n_cls), xtr, torch.as_tensor(ytr), cfg, n_cls)
    with torch.no_grad():
        return float(np.mean(head(xte).argmax(-1).numpy() == yte))


# --------------------------------------------------------------- segmentation


def confusion_matrix(pred, target, n_classes: int) -> np.ndarray:
    pred, target = np.asarray(pred).reshape(-1), np.asarray(target).reshape(-1)
    keep = target >= 0
    return np.bincount(n_classes * target[keep] + pred[keep], minlength=n_classes**2).reshape(n_classes, n_classes)


def miou(pred, target, n_classes: int) -> float:
    """Mean IoU over classes; a class absent from both prediction and target is left out."""
    cm = confusion_matrix(pred, target, n_classes).astype(np.float64)
    tp = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - tp
    present = union > 0
    if not present.any():
        return 1.0
    return float(np.mean(tp[present] / union[present]))


class _SegHead(nn.Module):
    def __init__(self, dim: int, n_cls: int, kernel: int):
        super().__init__()
        self.linear = nn.Linear(dim, dim)
        self.conv = nn.Conv2d(dim, n_cls, kernel, padding=kernel // 2)

    def forward(self, grid_feats):  # [B, r, c, D] -> [B, r, c, K]
        x = self.linear(grid_feats).permute(0, 3, 1, 2)
        return self.conv(x).permute(0, 2, 3, 1)


def linear_seg_probe(token_features, pixel_labels, heldout, n_classes: int | None = None,
                     cfg: ProbeConfig | None = None) -> float:
    """Linear + conv head on token grids [N, rows, cols, D]; labels already on the token grid.

    Returns the heldout mIoU. Labels < 0 are ignored.
    """
    cfg = cfg or ProbeConfig()
    tr, te = _np(token_features).astype(np.float32), _np(heldout[0]).astype(np.float32)
    ytr, yte = np.asarray(pixel_labels).astype(np.int64), np.asarray(heldout[1]).astype(np.int64)
    if tr.shape[1:3] != ytr.shape[1:3]:
        raise ValueError("labels must be downsampled to the token grid")
    n_classes = n_classes or int(max(ytr.max(), yte.max())) + 1
    xtr, xte = _standardize(tr, te)
    torch.manual_seed(cfg.seed)
    head = _fit(_SegHead(tr.shape[-1], n_classes, cfg.seg_kernel), xtr, torch.as_tensor(ytr), cfg, n_classes)
    with torch.no_grad():
        pred = head(xte).argmax(-1).numpy()
    return miou(pred, yte, n_classes)


# ----------------------------------------------------------------- tracking


def label_propagation(frame_features, initial_mask, context_n: int = 7, topk: int = 5,
                      temperature: float = 0.1) -> list[np.ndarray]:
    """Carry a token-grid label map through a clip by nearest-neighbour patch voting.

    Each token of frame t takes a softmax-weighted vote over its ``topk`` most
    similar patches among the previous ``context_n`` frames (with their
    propagated labels). Returns one [rows, cols] mask per frame.
    """
    if context_n < 1:
        raise ValueError("context_n must be >= 1")
    feats = []
    for f in frame_features:
        a = _np(f.as_grid() if isinstance(f, TokenFeatures) else f).astype(np.float64)
        if a.ndim == 4:
            a = a[0]
        feats.append(a)
    rows, cols, _ = feats[0].shape
    mask0 = np.asarray(initial_mask)
    if mask0.shape != (rows, cols):
        raise ValueError("initial mask must be on the token grid")
    n_lab = int(mask0.max()) + 1
    onehots = [np.eye(n_lab)[mask0.reshape(-1)]]
    masks = [mask0.copy()]
    for t in range(1, len(feats)):
        lo = max(0, t - context_n)
        ctx = _unit(np.concatenate([feats[s].reshape(-1, feats[s].shape[-1]) for s in range(lo, t)]))
        ctx_lab = np.concatenate(onehots[lo:t])
        q = _unit(feats[t].reshape(-1, feats[t].shape[-1]))
        sims = q @ ctx.T
        k = min(topk, sims.shape[1])
        idx = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        top = np.take_along_axis(sims, idx, axis=1) / temperature
        w = np.exp(top - top.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        probs = np.einsum("nk,nkl->nl", w, ctx_lab[idx])
        lab = probs.argmax(axis=1)
        masks.append(lab.reshape(rows, cols))
        onehots.append(np.eye(n_lab)[lab])
    return masks


def jaccard(pred, target) -> float:
    """Region similarity J: mean IoU over foreground objects present in either map (1.0 if none)."""
    pred, target = np.asarray(pred), np.asarray(target)
    ids = [i for i in np.union1d(np.unique(pred), np.unique(target)) if i > 0]
    if not ids:
        return 1.0
    scores = []
    for i in ids:
        p, g = pred == i, target == i
        scores.append(np.logical_and(p, g).sum() / np.logical_or(p, g).sum())
    return float(np.mean(scores))


def tracking_j(frame_features, gt_masks, **kw) -> float:
    """Mean J over frames after the first when propagating ``gt_masks[0]``."""
    pred = label_propagation(frame_features, gt_masks[0], **kw)
    if len(pred) == 1:
        return jaccard(pred[0], gt_masks[0])
    return float(np.mean([jaccard(p, g) for p, g in zip(pred[1:], gt_masks[1:])]))


# --------------------------------------------------------------- layer sweeps

TASKS = ("knn", "linear", "attention", "seg", "tracking")


def _prepare(x):
    if isinstance(x, np.ndarray) and x.ndim == 4 and x.shape[-1] == 3:
        return normalize_images(x)
    return torch.as_tensor(x)


@torch.no_grad()
def extract_layers(encoder, inputs, layers, batch_size: int = 128) -> dict[int, np.ndarray]:
    """Per-layer patch-token grids [N, rows, cols, D] plus the class token when present.

    Works with anything exposing ``forward_features(x, tap_layers)`` that returns
    TokenFeatures or [B, T, D] tensors.
    """
    vis = getattr(encoder, "visual", encoder)
    out: dict[int, list] = {k: [] for k in layers}
    for i in range(0, len(inputs), batch_size):
        feats = vis.forward_features(_prepare(inputs[i : i + batch_size]), list(layers))
        for k in layers:
            f = feats[k]
            if isinstance(f, TokenFeatures):
                out[k].append(f)
            else:
                out[k].append(torch.as_tensor(f))
    res = {}
    for k, chunks in out.items():
        if isinstance(chunks[0], TokenFeatures):
            f0 = chunks[0]
            res[k] = TokenFeatures(torch.cat([c.values for c in chunks]), f0.grid, f0.has_class_token)
        else:
            res[k] = torch.cat(chunks)
    return res


def _pooled(f, pooling: str) -> np.ndarray:
    if isinstance(f, TokenFeatures):
        if pooling == "cls" and f.has_class_token:
            return _np(f.values[:, 0])
        return _np(f.patch_tokens.mean(dim=1))
    a = _np(f)
    return a.mean(axis=1) if a.ndim == 3 else a


def _tokens(f) -> np.ndarray:
    return _np(f.patch_tokens if isinstance(f, TokenFeatures) else f)


def _grid(f) -> np.ndarray:
    if isinstance(f, TokenFeatures):
        return _np(f.as_grid())
    a = _np(f)
    side = int(round(np.sqrt(a.shape[1])))
    return a.reshape(a.shape[0], side, side, a.shape[-1])


def layer_sweep(encoder, task: str, layers, data: dict, cfg: ProbeConfig | None = None,
                model_id: str = "model") -> ProbeResult:
    """Run one probe per tapped layer and report best and last layers.

    ``data`` keys by task:
      knn / linear / attention: train_x, train_y, test_x, test_y
      seg: train_x, train_y, test_x, test_y (label maps on the token grid), n_classes
      tracking: clips (list of [T, ...] frame inputs), masks (list of [T, rows, cols])
    """
    cfg = cfg or ProbeConfig()
    layers = sorted(set(int(k) for k in layers))
    if not layers:
        raise ValueError("no layers to sweep")
    if task not in TASKS:
        raise ValueError(f"unknown probe task {task!r}")
    before = parameter_hash(encoder) if isinstance(encoder, nn.Module) else None
    scores = {}
    if task == "tracking":
        per_clip = [extract_layers(encoder, clip, layers) for clip in data["clips"]]
        for k in layers:
            js = [tracking_j([g for g in _grid(feats[k])], np.asarray(m), context_n=cfg.context_n,
                             topk=cfg.topk, temperature=cfg.prop_temperature)
                  for feats, m in zip(per_clip, data["masks"])]
            scores[k] = float(np.mean(js))
    else:
        tr = extract_layers(encoder, data["train_x"], layers)
        te = extract_layers(encoder, data["test_x"], layers)
        for k in layers:
            if task == "knn":
                scores[k] = knn_probe(_pooled(tr[k], cfg.pooling), data["train_y"], _pooled(te[k], cfg.pooling),
                                      data["test_y"], cfg.knn_k)
            elif task == "linear":
                scores[k] = linear_probe(_pooled(tr[k], cfg.pooling), data["train_y"],
                                         (_pooled(te[k], cfg.pooling), data["test_y"]), cfg)
            elif task == "attention":
                scores[k] = attention_probe(_tokens(tr[k]), data["train_y"], (_tokens(te[k]), data["test_y"]), cfg)
            else:
                scores[k] = linear_seg_probe(_grid(tr[k]), data["train_y"], (_grid(te[k]), data["test_y"]),
                                             data.get("n_classes"), cfg)
    if before is not None and parameter_hash(encoder) != before:
        raise RuntimeError("probe modified encoder parameters")
    return ProbeResult(scores, task, True, model_id)


def normalize_scores(per_model_scores: dict, higher_is_better: bool = True) -> dict:
    """Min-max normalise per-layer scores across every model for one task.

    Lower-is-better scores are negated first, so 1.0 is always the best. When
    every score is equal the result is 0.5 everywhere.
    """
    flat = [v for layers in per_model_scores.values() for v in layers.values()]
    if len(flat) < 2:
        raise ValueError("need at least two scores to normalise")
    sign = 1.0 if higher_is_better else -1.0
    lo, hi = min(sign * v for v in flat), max(sign * v for v in flat)
    if hi == lo:
        return {m: {k: 0.5 for k in layers} for m, layers in per_model_scores.items()}
    return {m: {k: (sign * v - lo) / (hi - lo) for k, v in layers.items()} for m, layers in per_model_scores.items()}


def plot_layer_curves(results: list[ProbeResult], path, normalize: bool = True):
    """Per-layer score curves, one line per model, best layer marked by a vertical line."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    scores = {r.model_id: r.per_layer for r in results}
    if normalize and sum(len(v) for v in scores.values()) >= 2:
        scores = normalize_scores(scores, results[0].higher_is_better)
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for r in results:
        ks = sorted(scores[r.model_id])
        line, = ax.plot(ks, [scores[r.model_id][k] for k in ks], marker="o", label=r.model_id)
        ax.axvline(r.best_layer, color=line.get_color(), ls=":", lw=1)
    ax.set_xlabel("layer")
    ax.set_ylabel("normalized score" if normalize else "score")
    ax.set_title(results[0].task_id)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


__all__ = [
    "PROBE_RESULT_SCHEMA", "ProbeConfig", "ProbeResult", "knn_probe", "linear_probe", "attention_probe",
    "miou", "confusion_matrix", "linear_seg_probe", "label_propagation", "jaccard", "tracking_j",
    "extract_layers", "layer_sweep", "normalize_scores", "plot_layer_curves"
]
