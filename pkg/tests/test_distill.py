from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from encoderlab.distill import distill_loss, distill_loss_from_scores, similarity_distributions, teacher_scale
from helpers import unit


def kl_oracle(t, s):
    t, s = np.asarray(t, dtype=np.float64), np.asarray(s, dtype=np.float64)
    return float(np.sum(np.where(t > 0, t * np.log(t / s), 0.0)))


def test_singleton_distribution():
    e = torch.tensor([[1.0, 0.0]])
    p, q = similarity_distributions(e, e, 10.0)
    assert p.tolist() == [[1.0]] and q.tolist() == [[1.0]]


def test_identical_embeddings_uniform():
    e = torch.ones(3, 2) / math.sqrt(2)
    p, q = similarity_distributions(e, e, 5.0)
    assert torch.allclose(p, torch.full((3, 3), 1 / 3)) and torch.allclose(q, torch.full((3, 3), 1 / 3))


def test_distributions_match_softmax_oracle(rng):
    img, txt = unit(rng.normal(size=(2, 3))), unit(rng.normal(size=(2, 3)))
    s = img @ txt.T
    p, q = similarity_distributions(torch.tensor(img), torch.tensor(txt), 1.0)
    rows = np.exp(s) / np.exp(s).sum(1, keepdims=True)
    cols = np.exp(s) / np.exp(s).sum(0, keepdims=True)
    assert np.allclose(p.numpy(), rows, atol=1e-7) and np.allclose(q.numpy(), cols, atol=1e-7)
    assert np.allclose(p.sum(1).numpy(), 1, atol=1e-6) and np.allclose(q.sum(0).numpy(), 1, atol=1e-6)


def test_distill_loss_identity_and_closed_form():
    t = torch.tensor([[0.3, 0.7], [0.6, 0.4]], dtype=torch.float64)
    assert distill_loss((t, t), (t, t)).item() == pytest.approx(0.0, abs=1e-12)
    teacher = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    student = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    # same pair in both directions -> average is ln 2
    assert distill_loss((student, student.T), (teacher, teacher.T)).item() == pytest.approx(math.log(2), abs=1e-12)


def test_distill_loss_matches_oracle(rng):
    def dists():
        x = rng.random((3, 3)) + 0.05
        return torch.tensor(x / x.sum(1, keepdims=True)), torch.tensor(x / x.sum(0, keepdims=True))

    s, t = dists(), dists()
    want = 0.5 * (np.mean([kl_oracle(t[0][i], s[0][i]) for i in range(3)])
                  + np.mean([kl_oracle(t[1][:, j], s[1][:, j]) for j in range(3)]))
    assert distill_loss(s, t).item() == pytest.approx(want, abs=1e-7)


def test_zero_student_probability_is_clamped():
    t = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    s = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    v = distill_loss((s, s.T), (t, t.T)).item()
    assert math.isfinite(v) and v > 5


# scales stay where no student probability drops under the 1e-12 clamp
@given(st.integers(1, 5), st.floats(0.5, 10), st.floats(0.5, 10), st.integers(0, 1000))
def test_log_space_loss_agrees(n, s_scale, t_scale, seed):
    r = np.random.default_rng(seed)
    img, txt = torch.tensor(unit(r.normal(size=(n, 4)))), torch.tensor(unit(r.normal(size=(n, 4))))
    ti, tt = torch.tensor(unit(r.normal(size=(n, 4)))), torch.tensor(unit(r.normal(size=(n, 4))))
    a = distill_loss(similarity_distributions(img, txt, s_scale), similarity_distributions(ti, tt, t_scale))
    b = distill_loss_from_scores(s_scale * img @ txt.T, t_scale * ti @ tt.T)
    assert a.item() == pytest.approx(b.item(), abs=1e-9)
    assert a.item() >= -1e-12


def test_teacher_scale():
    assert teacher_scale(100.0) == 200.0
    assert teacher_scale(1.0) == 2.0
    assert teacher_scale(100.0, factor=1.0) == 100.0
    with pytest.raises(ValueError):
        teacher_scale(0.0)


@given(st.integers(0, 1000))
def test_sharper_teacher_has_lower_entropy(seed):
    r = np.random.default_rng(seed)
    s = torch.tensor(r.normal(size=(4, 4)))
    ent = lambda p: -(p * p.log()).sum(1)  # noqa: E731
    assert (ent((2 * s).softmax(1)) < ent(s.softmax(1))).all()


def test_teacher_is_constant():
    s = torch.randn(3, 3, dtype=torch.float64, requires_grad=True)
    t = torch.randn(3, 3, dtype=torch.float64, requires_grad=True)
    distill_loss_from_scores(s, t).backward()
    assert t.grad is None and s.grad is not None
