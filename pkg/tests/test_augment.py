from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from encoderlab.augment import AugConfig, ResolutionSchedule, augment, resize, resize_labels, resolution_at

PAPER_SCHEDULE = ResolutionSchedule([(10, 98), (8, 154), (4, 224), (2, 336)])


def _img(seed=0, h=20, w=24):
    return np.random.default_rng(seed).random((h, w, 3)).astype(np.float32)


def test_disabled_is_resized_original():
    img = _img()
    out = augment(img, AugConfig.disabled(), 3, out_size=12)
    np.testing.assert_array_equal(out, np.clip(resize(img, 12), 0, 1))
    np.testing.assert_array_equal(augment(img, AugConfig.disabled(), 3), img)


def test_flip_twice_is_identity():
    img = _img()
    cfg = AugConfig((1, 1), (1, 1), 0.0, 0.0, 1.0)
    once = augment(img, cfg, 0)
    np.testing.assert_array_equal(once, img[:, ::-1])
    np.testing.assert_array_equal(augment(once, cfg, 1), img)


def test_seed_determinism():
    img = _img()
    cfg = AugConfig()
    a, b = augment(img, cfg, 42, out_size=16), augment(img, cfg, 42, out_size=16)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, augment(img, cfg, 43, out_size=16))


@given(st.integers(0, 2**31 - 1))
def test_output_range_and_shape(seed):
    img = _img(seed % 7)
    cfg = AugConfig(brightness_jitter=0.9, saturation_jitter=0.9)
    out = augment(img, cfg, seed, out_size=10)
    assert out.shape == (10, 10, 3) and out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_uint8_input_and_labels_follow_crop():
    img = (np.random.default_rng(0).random((16, 16, 3)) * 255).astype(np.uint8)
    labels = np.zeros((16, 16), dtype=np.int64)
    labels[:, :8] = 1
    cfg = AugConfig((1, 1), (1, 1), 0.0, 0.0, 1.0)
    out, lab = augment(img, cfg, 0, out_size=8, labels=labels)
    assert out.shape == (8, 8, 3) and lab.shape == (8, 8)
    assert np.all(lab[:, 4:] == 1) and np.all(lab[:, :4] == 0)


def test_empty_image_rejected():
    with pytest.raises(ValueError):
        augment(np.zeros((0, 0, 3)), AugConfig(), 0)


def test_config_validation():
    with pytest.raises(ValueError):
        AugConfig(crop_scale=(0.9, 0.5))
    with pytest.raises(ValueError):
        AugConfig(hflip_prob=1.5)


def test_resize_labels_nearest():
    lab = np.arange(16).reshape(4, 4)
    np.testing.assert_array_equal(resize_labels(lab, 2), [[5, 7], [13, 15]])
    np.testing.assert_array_equal(resize_labels(lab, 4), lab)


# --------------------------------------------------------------- schedule


def test_schedule_paper_budgets():
    assert resolution_at(PAPER_SCHEDULE, 0) == 98
    assert resolution_at(PAPER_SCHEDULE, 9) == 98
    assert resolution_at(PAPER_SCHEDULE, 10) == 154  # half-open boundary
    assert resolution_at(PAPER_SCHEDULE, 22) == 336
    assert resolution_at(PAPER_SCHEDULE, 10_000) == 336
    assert PAPER_SCHEDULE.total == 24


@given(st.lists(st.integers(0, 40), min_size=2, max_size=2))
def test_schedule_monotone(pair):
    a, b = sorted(pair)
    assert resolution_at(PAPER_SCHEDULE, a) <= resolution_at(PAPER_SCHEDULE, b)


def test_schedule_validation():
    with pytest.raises(ValueError):
        ResolutionSchedule([(5, 64), (5, 32)])
    with pytest.raises(ValueError):
        ResolutionSchedule([(0, 32)])
    with pytest.raises(ValueError):
        resolution_at(PAPER_SCHEDULE, -1)
