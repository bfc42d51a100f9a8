"""Feature-map pictures: low-pass blend, 3-component PCA and an LCh colour mapping."""
from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from scipy import ndimage

from .model import TokenFeatures

C_MAX = 100.0


def gaussian_kernel(size: int = 3, sigma: float = 1.0) -> np.ndarray:
    """Normalised 2D Gaussian of odd ``size``."""
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _as_grid(features) -> np.ndarray:
    if isinstance(features, TokenFeatures):
        g = features.as_grid()
        g = g.detach().cpu().numpy() if hasattr(g, "detach") else np.asarray(g)
        return g[0] if g.ndim == 4 else g
    return np.asarray(features)


def lowpass_blend(features, size: int = 3, sigma: float = 1.0) -> np.ndarray:
    """0.5 * x + 0.5 * blur(x) on a [rows, cols, D] token grid.

    Borders are reflect-padded, which also covers grids smaller than the kernel.
    """
    x = _as_grid(features).astype(np.float64)
    k = gaussian_kernel(size, sigma)
    blurred = np.stack([ndimage.convolve(x[..., c], k, mode="reflect") for c in range(x.shape[-1])], axis=-1)
    return 0.5 * x + 0.5 * blurred


def pca3(tokens) -> tuple[np.ndarray, np.ndarray]:
    """Top-3 principal component scores of [n_tok, D] tokens and their explained variances.

    Each component's sign is set so its largest-magnitude score is positive.
    Rank < 3 leaves the missing components as zero columns.
    """
    x = np.asarray(tokens, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    if len(x) < 3:
        raise ValueError("PCA needs at least 3 tokens")
    xc = x - x.mean(axis=0)
    u, s, _ = np.linalg.svd(xc, full_matrices=False)
    scores = u * s
    var = s**2 / max(len(x) - 1, 1)
    tol = max(xc.shape) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    out = np.zeros((len(x), 3))
    ev = np.zeros(3)
    for j in range(min(3, len(s))):
        if s[j] <= tol:
            continue
        col = scores[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            col = -col
        out[:, j] = col
        ev[j] = var[j]
    return out, ev


def lch_to_rgb(components: np.ndarray, shape=None) -> np.ndarray:
    """Map PC1 -> lightness, PC2 -> chroma, PC3 -> hue and convert to sRGB in [0, 1].

    Each component is min-max rescaled over the image: L to [0, 100], C to
    [0, C_MAX], h to [0, 360) degrees. Out-of-gamut colours are clipped.
    A constant component maps to the midpoint of its range.
    """
    from skimage.color import lab2rgb

    comp = np.asarray(components, dtype=np.float64)
    if comp.shape[-1] != 3:
        raise ValueError("expected three components")
    flat = comp.reshape(-1, 3)

    def scale(c, hi):
        lo_, hi_ = c.min(), c.max()
        return np.full_like(c, 0.5 * hi) if hi_ - lo_ < 1e-12 else (c - lo_) / (hi_ - lo_) * hi

    L = scale(flat[:, 0], 100.0)
    C = scale(flat[:, 1], C_MAX)
    h = np.deg2rad(scale(flat[:, 2], 360.0) % 360.0)
    lab = np.stack([L, C * np.cos(h), C * np.sin(h)], axis=-1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # out-of-gamut notices; we clip anyway
        rgb = np.clip(lab2rgb(lab[None])[0], 0.0, 1.0)
    if shape is not None:
        return rgb.reshape(*shape, 3)
    return rgb.reshape(*comp.shape[:-1], 3)


def visualize(features, blend: bool = True) -> np.ndarray:
    """Token grid [rows, cols, D] (or TokenFeatures) -> RGB image [rows, cols, 3]."""
    grid = lowpass_blend(features) if blend else _as_grid(features).astype(np.float64)
    rows, cols, d = grid.shape
    comps, _ = pca3(grid.reshape(-1, d))
    return lch_to_rgb(comps, (rows, cols))


def save_png(rgb: np.ndarray, path, scale: int = 8) -> Path:
    """Nearest-upsampled PNG without timestamps or other varying metadata."""
    from PIL import Image

    img = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path, format="PNG", optimize=False)
    return path
