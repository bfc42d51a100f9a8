from __future__ import annotations

import hashlib

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from encoderlab.model import TokenFeatures
from encoderlab.viz import gaussian_kernel, lch_to_rgb, lowpass_blend, pca3, save_png, visualize


def explicit_kernel():
    # exp(-(dx^2 + dy^2) / 2) over a 3x3 stencil, normalised by hand
    w = {0: 1.0, 1: np.exp(-0.5), 2: np.exp(-1.0)}  # keyed by dx^2 + dy^2
    k = np.array([[w[i * i + j * j] for j in (-1, 0, 1)] for i in (-1, 0, 1)])
    return k / k.sum()


def test_kernel_defaults_match_explicit():
    np.testing.assert_allclose(gaussian_kernel(), explicit_kernel(), atol=1e-15)
    with pytest.raises(ValueError):
        gaussian_kernel(4)


def test_constant_map_unchanged():
    x = np.full((5, 6, 3), 2.5)
    np.testing.assert_allclose(lowpass_blend(x), x, atol=1e-12)


def test_impulse_matches_kernel_oracle():
    x = np.zeros((7, 7, 1))
    x[3, 3, 0] = 1.0
    out = lowpass_blend(x)[..., 0]
    expect = np.zeros((7, 7))
    expect[2:5, 2:5] = 0.5 * explicit_kernel()
    expect[3, 3] += 0.5
    np.testing.assert_allclose(out, expect, atol=1e-7)


def test_small_grid_reflect_pads():
    x = np.arange(2.0).reshape(1, 2, 1)
    out = lowpass_blend(x)
    assert out.shape == x.shape and np.all(np.isfinite(out))


@given(st.floats(-5, 5), st.integers(0, 1000))
def test_blend_is_linear(a, seed):
    x = np.random.default_rng(seed).normal(size=(4, 5, 3))
    np.testing.assert_allclose(lowpass_blend(a * x), a * lowpass_blend(x), atol=1e-10)


def test_blend_accepts_token_features(rng):
    v = torch.tensor(rng.normal(size=(1, 1 + 12, 4)), dtype=torch.float32)
    f = TokenFeatures(v, (3, 4), True)
    out = lowpass_blend(f)
    assert out.shape == (3, 4, 4)  # class token left out
    np.testing.assert_allclose(out, lowpass_blend(v[0, 1:].reshape(3, 4, 4).numpy()), atol=1e-6)


# ------------------------------------------------------------------- PCA


def test_pca_line_is_rank_one(rng):
    t = rng.normal(size=(50, 1)) * np.array([[1.0, -2.0, 0.5, 3.0]]) + 7.0
    comps, ev = pca3(t)
    assert ev[0] / ev.sum() >= 0.999
    assert np.allclose(comps[:, 1:], 0.0) and np.allclose(ev[1:], 0.0)


def test_pca_rotation_keeps_spectrum(rng):
    t = rng.normal(size=(40, 6)) * np.arange(1, 7)
    r = special_ortho_group.rvs(6, random_state=0)
    _, ev1 = pca3(t)
    _, ev2 = pca3(t @ r)
    np.testing.assert_allclose(ev1, ev2, rtol=1e-10)


def test_pca_duplicated_dataset(rng):
    t = rng.normal(size=(20, 5))
    a, _ = pca3(t)
    b, _ = pca3(np.concatenate([t, t]))
    np.testing.assert_allclose(b[:20], a, atol=1e-10)


def test_pca_sign_convention(rng):
    t = rng.normal(size=(30, 4))
    a, _ = pca3(t)
    b, _ = pca3(-t)
    np.testing.assert_allclose(a, b, atol=1e-10)
    for j in range(3):
        assert a[np.argmax(np.abs(a[:, j])), j] > 0


def test_pca_needs_three_tokens():
    with pytest.raises(ValueError):
        pca3(np.zeros((2, 4)))


def test_pca_matches_covariance_eigen(rng):
    t = rng.normal(size=(60, 5)) * np.array([5.0, 3.0, 2.0, 1.0, 0.5])
    _, ev = pca3(t)
    eig = np.sort(np.linalg.eigvalsh(np.cov(t.T)))[::-1][:3]
    np.testing.assert_allclose(ev, eig, rtol=1e-10)


# ----------------------------------------------------------------- colour


@given(st.integers(0, 2**31 - 1))
def test_rgb_in_unit_range(seed):
    comp = np.random.default_rng(seed).normal(size=(10, 3)) * 100
    rgb = lch_to_rgb(comp)
    assert rgb.shape == (10, 3) and rgb.min() >= 0.0 and rgb.max() <= 1.0


def test_identical_tokens_uniform_colour():
    img = visualize(np.ones((4, 4, 6)), blend=False)
    assert np.all(img == img[0, 0])


def test_first_component_drives_lightness():
    comp = np.zeros((5, 3))
    comp[:, 0] = [0.0, 1.0, 2.0, 3.0, 4.0]
    rgb = lch_to_rgb(comp)
    luminance = rgb @ np.array([0.2126, 0.7152, 0.0722])
    assert np.all(np.diff(luminance) > 0)


def three_cluster_grid():
    grid = np.zeros((6, 6, 3))
    grid[:, :2, 0] = 1.0
    grid[:, 2:4, 1] = 1.0
    grid[:, 4:, 2] = 1.0
    return grid


def test_three_clusters_three_colours():
    img = visualize(three_cluster_grid(), blend=False)
    cols = np.unique(np.round(img.reshape(-1, 3), 6), axis=0)
    assert len(cols) == 3
    d = [np.linalg.norm(a - b) for i, a in enumerate(cols) for b in cols[i + 1 :]]
    assert min(d) > 0.1


def test_flip_equivariance(rng):
    g = rng.normal(size=(5, 6, 4))
    np.testing.assert_allclose(visualize(g[:, ::-1]), visualize(g)[:, ::-1], atol=1e-10)


def test_png_bit_identical(tmp_path, rng):
    g = rng.normal(size=(4, 4, 8))
    a = save_png(visualize(g), tmp_path / "a.png")
    b = save_png(visualize(g.copy()), tmp_path / "b.png")
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()  # noqa: E731
    assert digest(a) == digest(b)
    from PIL import Image

    assert Image.open(a).size == (32, 32)
