"""Mini vision / text transformers with per-layer taps, 2D RoPE and attention pooling."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .text import TextBatch

CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    width: int = 64
    depth: int = 4
    mlp_dim: int = 256
    heads: int = 4
    patch_size: int = 8
    image_size: int = 64
    clip_dim: int = 64
    use_class_token: bool = True
    use_rope2d: bool = True
    use_abs_pos: bool = True
    pooling: str = "attention_pool"
    pool_heads: int = 8
    rope_theta: float = 100.0
    layerscale_init: float | None = None
    drop_path: float = 0.0

    def __post_init__(self):
        if self.width % self.heads or self.width % self.pool_heads:
            raise ValueError("width must be divisible by heads and pool_heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        if self.pooling != "attention_pool":
            raise ValueError("vision tower pools with attention_pool")
        if self.use_rope2d and (self.width // self.heads) % 4:
            raise ValueError("2D RoPE needs head_dim divisible by 4")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1] + int(self.use_class_token)


@dataclass
class TextConfig:
    vocab_size: int
    width: int = 64
    depth: int = 2
    mlp_dim: int = 256
    heads: int = 4
    context_len: int = 16
    clip_dim: int = 64
    pooling: str = "eos_token"

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.pooling != "eos_token":
            raise ValueError("text tower pools at the EOS token")


@dataclass
class TokenFeatures:
    values: torch.Tensor  # [B, n_tok, width]
    grid: tuple[int, int]
    has_class_token: bool

    def __post_init__(self):
        expect = self.grid[0] * self.grid[1] + int(self.has_class_token)
        if self.values.shape[1] != expect:
            raise ValueError(f"{self.values.shape[1]} tokens do not match grid {self.grid}")

    @property
    def patch_tokens(self) -> torch.Tensor:
        return self.values[:, int(self.has_class_token):]

    def as_grid(self) -> torch.Tensor:
        """Patch tokens reshaped to [B, rows, cols, width]."""
        b, _, c = self.values.shape
        return self.patch_tokens.reshape(b, *self.grid, c)


# ---------------------------------------------------------------- primitives


def patchify(images: torch.Tensor, patch_size: int, class_token: torch.Tensor | None = None) -> TokenFeatures:
    """Split [B, 3, H, W] images into flattened patches [B, n, 3*p*p]."""
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    x = images.reshape(b, c, rows, patch_size, cols, patch_size)
    x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, rows * cols, c * patch_size * patch_size)
    if class_token is not None:
        x = torch.cat([class_token.reshape(1, 1, -1).expand(b, 1, x.shape[-1]), x], dim=1)
    return TokenFeatures(x, (rows, cols), class_token is not None)


def grid_positions(rows: int, cols: int, device=None) -> torch.Tensor:
    r, c = torch.meshgrid(torch.arange(rows, device=device), torch.arange(cols, device=device), indexing="ij")
    return torch.stack([r.flatten(), c.flatten()], dim=-1)


def _rope_angles(positions: torch.Tensor, head_dim: int, theta: float, dtype) -> torch.Tensor:
    quarter = head_dim // 4
    freqs = theta ** (-torch.arange(quarter, dtype=torch.float64) / quarter)
    pos = positions.to(torch.float64)
    # [n, head_dim/2]: first half of the pairs follow the row, second half the column
    ang = torch.cat([pos[:, :1] * freqs, pos[:, 1:2] * freqs], dim=-1)
    return ang.to(dtype)


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


def apply_rope2d(q, k, positions: torch.Tensor, n_prefix: int = 0, theta: float = 100.0):
    """Rotate channel pairs of ``q``/``k`` ([..., n, head_dim]) by their 2D grid position.

    The first ``n_prefix`` tokens (class token) are left untouched.
    """
    head_dim = q.shape[-1]
    if head_dim % 4:
        raise ValueError("head_dim must be divisible by 4 for 2D RoPE")
    ang = _rope_angles(positions, head_dim, theta, q.dtype)
    cos, sin = ang.cos(), ang.sin()

    def rot(x):
        if n_prefix == 0:
            return _rotate(x, cos, sin)
        return torch.cat([x[..., :n_prefix, :], _rotate(x[..., n_prefix:, :], cos, sin)], dim=-2)

    return rot(q), rot(k)


def resample_pos_table(table: torch.Tensor, old_grid, new_grid) -> torch.Tensor:
    """Bilinearly resample a [rows*cols, C] table onto a new grid (corners aligned)."""
    if tuple(old_grid) == tuple(new_grid):
        return table
    c = table.shape[-1]
    t = table.reshape(1, *old_grid, c).permute(0, 3, 1, 2)
    t = F.interpolate(t, size=tuple(new_grid), mode="bilinear", align_corners=True)
    return t.permute(0, 2, 3, 1).reshape(-1, c)


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = 1.0 - self.p
        mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * mask / keep


class LayerScale(nn.Module):
    def __init__(self, dim: int, init: float):
        super().__init__()
        self.gamma = nn.Parameter(torch.full((dim,), float(init)))

    def forward(self, x):
        return x * self.gamma


class Attention(nn.Module):
    def __init__(self, width: int, heads: int, rope_theta: float | None = None):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.rope_theta = rope_theta

    def forward(self, x, positions=None, n_prefix=0, attn_mask=None):
        b, n, c = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(b, n, 3, h, c // h).permute(2, 0, 3, 1, 4)
        if positions is not None and self.rope_theta is not None:
            q, k = apply_rope2d(q, k, positions, n_prefix, self.rope_theta)
        logits = (q @ k.transpose(-2, -1)) / math.sqrt(c // h)
        if attn_mask is not None:
            logits = logits + attn_mask
        out = logits.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width, heads, mlp_dim, rope_theta=None, layerscale_init=None, drop_path=0.0):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads, rope_theta)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, width))
        self.ls_1 = LayerScale(width, layerscale_init) if layerscale_init is not None else nn.Identity()
        self.ls_2 = LayerScale(width, layerscale_init) if layerscale_init is not None else nn.Identity()
        self.drop_path = DropPath(drop_path)

    def forward(self, x, positions=None, n_prefix=0, attn_mask=None):
        x = x + self.drop_path(self.ls_1(self.attn(self.ln_1(x), positions, n_prefix, attn_mask)))
        x = x + self.drop_path(self.ls_2(self.mlp(self.ln_2(x))))
        return x


class AttentionPool(nn.Module):
    """Single learned query cross-attending over all tokens, then norm and projection."""

    def __init__(self, width: int, heads: int, mlp_dim: int, out_dim: int):
        super().__init__()
        self.heads = heads
        self.query = nn.Parameter(torch.randn(1, 1, width) * 0.02)
        self.ln_kv = nn.LayerNorm(width)
        self.q = nn.Linear(width, width)
        self.kv = nn.Linear(width, 2 * width)
        self.out = nn.Linear(width, width)
        self.ln_mlp = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, width))
        self.ln_post = nn.LayerNorm(width)
        self.proj = nn.Linear(width, out_dim, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n, c = tokens.shape
        h, d = self.heads, c // self.heads
        x = self.ln_kv(tokens)
        q = self.q(self.query).reshape(1, 1, h, d).transpose(1, 2)
        k, v = self.kv(x).reshape(b, n, 2, h, d).permute(2, 0, 3, 1, 4)
        attn = ((q @ k.transpose(-2, -1)) / math.sqrt(d)).softmax(dim=-1)
        o = self.out((attn @ v).transpose(1, 2).reshape(b, 1, c))
        o = o + self.mlp(self.ln_mlp(o))
        return self.proj(self.ln_post(o[:, 0]))


class VisionTransformer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        p, w = cfg.patch_size, cfg.width
        self.patch_embed = nn.Linear(3 * p * p, w)
        self.class_token = nn.Parameter(torch.randn(w) * 0.02) if cfg.use_class_token else None
        self.pos_embed = nn.Parameter(torch.randn(cfg.n_tokens, w) * 0.02) if cfg.use_abs_pos else None
        self.mask_token = nn.Parameter(torch.randn(w) * 0.02)
        self.ln_pre = nn.LayerNorm(w)
        dpr = np.linspace(0, cfg.drop_path, cfg.depth) if cfg.depth > 1 else [cfg.drop_path]
        theta = cfg.rope_theta if cfg.use_rope2d else None
        self.blocks = nn.ModuleList(
            Block(w, cfg.heads, cfg.mlp_dim, theta, cfg.layerscale_init, float(r)) for r in dpr
        )
        self.pool = AttentionPool(w, cfg.pool_heads, cfg.mlp_dim, cfg.clip_dim)

    @property
    def n_prefix(self) -> int:
        return int(self.cfg.use_class_token)

    def embed(self, images: torch.Tensor, mask: torch.Tensor | None = None):
        """Patch embedding, mask-token substitution, class token and absolute positions."""
        raw = patchify(images, self.cfg.patch_size)
        x = self.patch_embed(raw.values)
        if mask is not None:
            m = mask.reshape(x.shape[0], -1, 1).to(x.dtype)
            x = x * (1 - m) + self.mask_token * m
        if self.class_token is not None:
            x = torch.cat([self.class_token.expand(x.shape[0], 1, -1), x], dim=1)
        if self.pos_embed is not None:
            np_ = self.n_prefix
            patch_pos = resample_pos_table(self.pos_embed[np_:], self.cfg.grid, raw.grid)
            x = x + torch.cat([self.pos_embed[:np_], patch_pos], dim=0)
        return self.ln_pre(x), raw.grid

    def forward_features(self, images, tap_layers=None, mask=None) -> dict[int, TokenFeatures]:
        depth = self.cfg.depth
        taps = [depth] if tap_layers is None else list(tap_layers)
        for t in taps:
            if not 1 <= t <= depth:
                raise IndexError(f"tap layer {t} outside [1, {depth}]")
        x, grid = self.embed(images, mask)
        pos = grid_positions(*grid, device=x.device)
        out = {}
        for i, blk in enumerate(self.blocks[: max(taps)], start=1):
            x = blk(x, pos, self.n_prefix)
            if i in taps:
                out[i] = TokenFeatures(x, grid, self.cfg.use_class_token)
        return out

    def forward(self, images, mask=None) -> torch.Tensor:
        """Pooled (pre-normalisation) image embedding."""
        feats = self.forward_features(images, mask=mask)[self.cfg.depth]
        return self.pool(feats.values)


class TextTransformer(nn.Module):
    def __init__(self, cfg: TextConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.width)
        self.pos_embed = nn.Parameter(torch.randn(cfg.context_len, cfg.width) * 0.01)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads, cfg.mlp_dim) for _ in range(cfg.depth))
        self.ln_final = nn.LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, cfg.clip_dim, bias=False)
        causal = torch.full((cfg.context_len, cfg.context_len), float("-inf")).triu(1)
        self.register_buffer("causal_mask", causal, persistent=False)

    def forward(self, token_ids: torch.Tensor, eos_positions: torch.Tensor) -> torch.Tensor:
        if token_ids.shape[1] != self.cfg.context_len:
            raise ValueError("token_ids must match the configured context length")
        if torch.any(eos_positions >= token_ids.shape[1]):
            raise IndexError("eos position beyond the sequence")
        x = self.token_embed(token_ids) + self.pos_embed
        mask = self.causal_mask.to(x.dtype)
        for blk in self.blocks:
            x = blk(x, attn_mask=mask)
        x = x[torch.arange(x.shape[0]), eos_positions]
        return self.proj(self.ln_final(x))


class CLIPModel(nn.Module):
    def __init__(self, vision: EncoderConfig, text: TextConfig, words=(), init_logit_scale: float = 1 / 0.07,
                 max_logit_scale: float = 100.0):
        super().__init__()
        if vision.clip_dim != text.clip_dim:
            raise ValueError("vision and text towers must share clip_dim")
        self.visual = VisionTransformer(vision)
        self.text = TextTransformer(text)
        self.log_logit_scale = nn.Parameter(torch.tensor(math.log(init_logit_scale)))
        self.max_logit_scale = max_logit_scale
        self.words = list(words)

    @property
    def logit_scale(self) -> torch.Tensor:
        return self.log_logit_scale.exp()

    @torch.no_grad()
    def clamp_logit_scale_(self):
        self.log_logit_scale.clamp_(max=math.log(self.max_logit_scale))

    def encode_image(self, images, mask=None) -> torch.Tensor:
        return F.normalize(self.visual(images, mask), dim=-1)

    def encode_text(self, batch: TextBatch) -> torch.Tensor:
        dev = self.log_logit_scale.device
        ids = torch.as_tensor(batch.token_ids, device=dev)
        eos = torch.as_tensor(batch.eos_positions, device=dev)
        return F.normalize(self.text(ids, eos), dim=-1)

    def tokenizer(self):
        from .text import Tokenizer

        return Tokenizer(self.words, self.text.cfg.context_len)

    def config_dict(self) -> dict:
        return {
            "vision": asdict(self.visual.cfg),
            "text": asdict(self.text.cfg),
            "words": self.words,
            "max_logit_scale": self.max_logit_scale,
        }


# ------------------------------------------------------------ functional API


def forward_features(encoder: VisionTransformer, images, tap_layers) -> dict[int, TokenFeatures]:
    return encoder.forward_features(images, tap_layers)


def attention_pool(features: TokenFeatures, pool_head: AttentionPool) -> torch.Tensor:
    if features.values.shape[-1] != pool_head.query.shape[-1]:
        raise ValueError("feature width does not match the pooling head")
    return pool_head(features.values)


def encode_text(text_encoder: TextTransformer, batch: TextBatch) -> torch.Tensor:
    dev = text_encoder.pos_embed.device
    out = text_encoder(torch.as_tensor(batch.token_ids, device=dev), torch.as_tensor(batch.eos_positions, device=dev))
    return F.normalize(out, dim=-1)


def interpolate_pos_embed(encoder: VisionTransformer, new_image_size: int) -> VisionTransformer:
    """Copy of ``encoder`` whose absolute position table lives on the grid for ``new_image_size``."""
    cfg = encoder.cfg
    if new_image_size % cfg.patch_size:
        raise ValueError("new image size must be a multiple of the patch size")
    out = copy.deepcopy(encoder)
    new_cfg = EncoderConfig(**{**asdict(cfg), "image_size": new_image_size})
    out.cfg = new_cfg
    if encoder.pos_embed is not None:
        np_ = encoder.n_prefix
        with torch.no_grad():
            patch = resample_pos_table(encoder.pos_embed[np_:], cfg.grid, new_cfg.grid)
            out.pos_embed = nn.Parameter(torch.cat([encoder.pos_embed[:np_], patch], dim=0).clone())
    return out


def add_layerscale(model: CLIPModel, init: float, drop_path: float = 0.0) -> CLIPModel:
    """Insert LayerScale (and optional drop path) into every vision block, in place."""
    vis = model.visual
    vis.cfg = EncoderConfig(**{**asdict(vis.cfg), "layerscale_init": init, "drop_path": drop_path})
    dpr = np.linspace(0, drop_path, len(vis.blocks)) if len(vis.blocks) > 1 else [drop_path]
    dtype = next(vis.parameters()).dtype
    for blk, r in zip(vis.blocks, dpr):
        blk.ls_1 = LayerScale(vis.cfg.width, init).to(dtype)
        blk.ls_2 = LayerScale(vis.cfg.width, init).to(dtype)
        blk.drop_path = DropPath(float(r))
    return model


def build_model(vision: EncoderConfig, text: TextConfig, words, seed: int = 0, **kw) -> CLIPModel:
    torch.manual_seed(seed)
    return CLIPModel(vision, text, words, **kw)


def normalize_images(images) -> torch.Tensor:
    """uint8 or [0,1] float HWC images -> float32 BCHW tensor normalised with mean/std 0.5."""
    x = torch.as_tensor(np.asarray(images))
    if x.dtype == torch.uint8:
        x = x.float() / 255.0
    x = x.float()
    if x.ndim == 3:
        x = x[None]
    return (x.permute(0, 3, 1, 2) - 0.5) / 0.5


def parameter_hash(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: CLIPModel, meta: dict | None = None) -> Path:
    """Write an ``.npz`` container (config + named arrays) and a plain-text manifest next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": CHECKPOINT_VERSION, "config": model.config_dict(), "meta": meta or {}}
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    manifest = path.with_suffix(".manifest.txt")
    lines = [f"format_version {CHECKPOINT_VERSION}"]
    lines += [f"{name}\t{tuple(t.shape)}\t{t.dtype}" for name, t in model.state_dict().items()]
    manifest.write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path) -> tuple[CLIPModel, dict]:
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        cfg = header["config"]
        model = CLIPModel(
            EncoderConfig(**cfg["vision"]),
            TextConfig(**cfg["text"]),
            cfg["words"],
            max_logit_scale=cfg["max_logit_scale"],
        )
        state = {k: torch.from_numpy(z[k].copy()) for k in z.files if k != "__header__"}
    model.load_state_dict(state)
    return model, header["meta"]
