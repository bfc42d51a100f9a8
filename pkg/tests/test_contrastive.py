from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from encoderlab.contrastive import (
    MaskRegSpec,
    block_mask,
    clamp_logit_scale,
    clip_loss,
    lr_at,
    mask_regularization_loss,
    masked_cosine_loss,
    pretrain_losses,
)
from helpers import ToyCLIP, fd_grad, log_softmax, max_rel_err, unit


def clip_oracle(img, txt, scale):
    s = scale * np.asarray(img) @ np.asarray(txt).T
    n = len(s)
    rows = -np.mean([log_softmax(s, 1)[i, i] for i in range(n)])
    cols = -np.mean([log_softmax(s, 0)[i, i] for i in range(n)])
    return 0.5 * (rows + cols)


def test_clip_loss_orthonormal_pairs_vanish():
    e = torch.eye(2, dtype=torch.float64)
    assert clip_loss(e, e, 100.0).item() < 1e-10


def test_clip_loss_identical_embeddings_is_log_n():
    e = torch.ones(2, 4, dtype=torch.float64) / 2
    assert clip_loss(e, e, 7.0).item() == pytest.approx(math.log(2), abs=1e-12)


def test_clip_loss_matches_oracle(rng):
    img, txt = unit(rng.normal(size=(2, 5))), unit(rng.normal(size=(2, 5)))
    got = clip_loss(torch.tensor(img), torch.tensor(txt), 1.0).item()
    assert got == pytest.approx(clip_oracle(img, txt, 1.0), abs=1e-6)


@given(st.integers(1, 6), st.integers(2, 6), st.floats(0.5, 50), st.integers(0, 10_000))
def test_clip_loss_symmetric_and_nonnegative(n, d, scale, seed):
    r = np.random.default_rng(seed)
    img, txt = torch.tensor(unit(r.normal(size=(n, d)))), torch.tensor(unit(r.normal(size=(n, d))))
    a, b = clip_loss(img, txt, scale).item(), clip_loss(txt, img, scale).item()
    assert a == pytest.approx(b, abs=1e-9)
    assert a >= 0
    assert a == pytest.approx(clip_oracle(img.numpy(), txt.numpy(), scale), abs=1e-8)


def test_clip_loss_errors():
    with pytest.raises(ValueError):
        clip_loss(torch.zeros(0, 3), torch.zeros(0, 3), 1.0)
    with pytest.raises(ValueError):
        clip_loss(torch.zeros(2, 3), torch.zeros(3, 3), 1.0)


@pytest.mark.parametrize("scale,expected", [(50.0, 50.0), (150.0, 100.0), (100.0, 100.0)])
def test_clamp_logit_scale(scale, expected):
    assert clamp_logit_scale(scale) == expected
    assert clamp_logit_scale(torch.tensor(scale)).item() == expected


def test_mask_reg_duplicated_count():
    spec = MaskRegSpec()
    assert spec.n_duplicated(32) == 2
    assert spec.n_duplicated(5) == 1
    with pytest.raises(ValueError):
        MaskRegSpec(token_mask_ratio=1.0)


def test_block_mask_layout(rng):
    m = block_mask((8, 8), 0.4, (2, 2), rng)
    assert m.sum() == 28  # 7 blocks of 4 reach 40% of 64
    # aligned 2x2 blocks only
    assert (m.reshape(4, 2, 4, 2).transpose(0, 2, 1, 3).reshape(16, 4).sum(1) % 4 == 0).all()
    with pytest.raises(ValueError):
        block_mask((2, 2), 0.4, (4, 4), rng)


def test_masked_cosine_loss_zero_when_equal():
    x = torch.randn(2, 4, 3)
    mask = torch.tensor([[1, 0, 1, 0], [0, 1, 1, 1]])
    assert masked_cosine_loss(x, x, mask).item() == pytest.approx(0.0, abs=1e-6)


def test_lr_warmup_and_cosine():
    assert lr_at(0, 1.0, 10, 100) == pytest.approx(0.1)
    assert lr_at(9, 1.0, 10, 100) == pytest.approx(1.0)
    assert lr_at(10, 1.0, 10, 100) == pytest.approx(1.0)
    assert lr_at(100, 1.0, 10, 100) == pytest.approx(0.0, abs=1e-12)
    lrs = [lr_at(s, 1.0, 10, 100) for s in range(10, 100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# ----------------------------------------------------------- gradient suite


def _toy_batch(seed=0):
    torch.manual_seed(seed)
    model = ToyCLIP()
    x = torch.randn(4, 3, 2, 2, dtype=torch.float64)
    ids = torch.tensor([0, 1, 2, 3])
    return model, x, ids


def _params(model):
    return [p for p in model.parameters() if p.requires_grad]


def test_toy_model_is_small():
    model, _, _ = _toy_batch()
    assert sum(p.numel() for p in _params(model)) <= 64


def test_clip_loss_gradient_matches_finite_differences():
    model, x, ids = _toy_batch()

    def f():
        img = torch.nn.functional.normalize(model.visual.pool(model.visual.forward_features(x)[1].values), dim=-1)
        return clip_loss(img, model.encode_text(ids), model.logit_scale)

    params = _params(model)
    analytic = torch.autograd.grad(f(), params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]
    assert max_rel_err(analytic, fd_grad(f, params)) < 1e-4


def test_mask_reg_gradient_matches_finite_differences():
    model, x, _ = _toy_batch(1)
    spec = MaskRegSpec(batch_fraction=0.5, token_mask_ratio=0.5, mask_block=(1, 1))

    # the target branch is stop-gradient, so differentiate with it held fixed
    with torch.no_grad():
        target = model.visual.forward_features(x)[1].patch_tokens.clone()

    def f():
        loss, _ = mask_regularization_loss(model, x, spec, np.random.default_rng(3), unmasked_tokens=target)
        return loss

    params = [model.visual.embed.weight, model.visual.embed.bias, model.visual.mask_token,
              model.visual.mix.weight, model.visual.mix.bias]
    analytic = torch.autograd.grad(f(), params)
    assert f().item() > 0
    assert max_rel_err(analytic, fd_grad(f, params)) < 1e-4


def test_clip_and_mask_gradients_are_disjoint():
    model, x, ids = _toy_batch(2)
    spec = MaskRegSpec(batch_fraction=0.5, token_mask_ratio=0.5, mask_block=(1, 1))
    parts = pretrain_losses(model, x, ids, spec, np.random.default_rng(0))
    unmasked, masked = parts["unmasked_tokens"], parts["masked_tokens"]
    g_clip_masked = torch.autograd.grad(parts["clip_loss"], masked, retain_graph=True, allow_unused=True)[0]
    g_mask_unmasked = torch.autograd.grad(parts["mask_loss"], unmasked, retain_graph=True, allow_unused=True)[0]
    for g in (g_clip_masked, g_mask_unmasked):
        assert g is None or torch.count_nonzero(g) == 0
    # the masked branch does receive gradient from its own loss
    assert torch.count_nonzero(torch.autograd.grad(parts["mask_loss"], masked, retain_graph=True)[0]) > 0
