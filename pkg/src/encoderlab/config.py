"""Run configuration: YAML defaults, dotted overrides, hashing and derived seeds."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

DEFAULTS_YAML = """
seed: 0
data:
  n_train: 5000
  n_eval: 300
  n_clips: 600
  n_eval_clips: 200
  frames: 8
  static_fraction: 0.5
  count_weights: [1.0]
  heldout_shift: 0
  attr_dropout: 0.5
model:
  vision:
    width: 64
    depth: 4
    mlp_dim: 256
    heads: 4
    patch_size: 8
    image_size: 32
    clip_dim: 64
    use_class_token: true
    use_rope2d: true
    use_abs_pos: true
    pooling: attention_pool
    pool_heads: 8
  text:
    width: 64
    depth: 2
    mlp_dim: 256
    heads: 4
    context_len: 16
    clip_dim: 64
pretrain:
  steps: 2500
  batch_size: 64
  lr: 2.0e-3
  warmup_steps: 30
  weight_decay: 0.05
  schedule:
    - {samples: 80000, resolution: 24}
    - {samples: 80064, resolution: 32}
  aug:
    aspect_jitter: [0.9, 1.1]
    crop_scale: [0.7, 1.0]
    brightness_jitter: 0.32
    saturation_jitter: 0.32
    hflip_prob: 0.0
  mask_reg:
    batch_fraction: 0.0625
    token_mask_ratio: 0.4
    mask_block: [2, 2]
  max_logit_scale: 100.0
distill:
  teacher_temp_factor: 0.5
  steps: 1000
  batch_size: 64
  lr: 2.0e-3
  warmup_steps: 20
  student_ref_scale: 100.0
  resolution: 32
  student:
    width: 32
    depth: 2
    mlp_dim: 128
    heads: 2
    pool_heads: 4
video_ft:
  steps: 200
  batch_size: 32
  n_frames: 8
  lr: 2.0e-4
  warmup_steps: 10
  resolution: 32
  average: pooled
spatial_align:
  teacher_layer: 3
  mask_ratio: 0.75
  mask_block: [2, 2]
  droppath: 0.0
  layerscale_init: 1.0
  loc_temperature: 20.0
  weight_core: 1.0
  weight_loc: 1.0
  query_grid: 8
  margin: 10.0
  steps: 300
  batch_size: 32
  lr: 1.0e-4
  resolution: 32
probe:
  tasks: [knn, linear, seg, tracking]
  layers: null
  resolution: null
  n_train: 600
  n_test: 300
  n_clips: 16
  knn_k: 10
  epochs: 100
  lr: 1.0e-2
  context_n: 7
  topk: 5
  prop_temperature: 0.1
zeroshot:
  modes: [center_crop, squash]
  use_dsl: true
viz:
  layer: null
  n_images: 4
  blend: true
  scale: 8
"""

DEFAULTS: dict = yaml.safe_load(DEFAULTS_YAML)


def deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(cfg: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value``; the value is parsed as YAML so numbers and lists work."""
    if "=" not in assignment:
        raise ValueError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise KeyError(f"unknown config section {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise KeyError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(raw)
    return cfg


def _coerce(value):
    # YAML 1.1 reads "1e-3" as a string
    if isinstance(value, dict):
        return {k: _coerce(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_coerce(v) for v in value]
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    return value


def _parse_value(raw: str):
    return _coerce(yaml.safe_load(raw))


def load_config(path=None, overrides=(), seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        user = _coerce(yaml.safe_load(Path(path).read_text()) or {})
        if not isinstance(user, dict):
            raise ValueError(f"config {path} must be a mapping")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise KeyError(f"unknown config sections: {sorted(unknown)}")
        cfg = deep_merge(cfg, user)
    for o in overrides:
        set_dotted(cfg, o)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:10]


def derive_seed(root: int, stage: str) -> int:
    """Per-stage seed: first 8 hex digits of sha256("<root>:<stage>")."""
    return int(hashlib.sha256(f"{int(root)}:{stage}".encode()).hexdigest()[:8], 16)
