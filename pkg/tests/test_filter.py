import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from signet import synth
from signet.core import SignatureImage, normalize_to_canvas
from signet.errors import DataError, InvalidInput
from signet.filter_cnn import (
    FilterModel, LabeledRegionSet, augment, filter_candidates, predict_signature, train_filter,
)


def test_prediction_deterministic(toy_filter):
    img = toy_filter.data.items[0][0]
    assert predict_signature(toy_filter.model, img) == predict_signature(toy_filter.model, img)


def test_training_positive_scores_high(toy_filter):
    positives = [img for img, y in toy_filter.data.items if y == 1]
    assert all(predict_signature(toy_filter.model, img) > 0.9 for img in positives)


def test_wrong_shape_rejected():
    with pytest.raises(InvalidInput):
        predict_signature(FilterModel(), np.ones((128, 128)))


def test_threshold_one_keeps_nothing(toy_filter):
    imgs = [img for img, _ in toy_filter.data.items]
    assert filter_candidates(toy_filter.model, imgs, 1.0) == []


def test_threshold_zero_keeps_positive_scores(toy_filter):
    imgs = [img for img, _ in toy_filter.data.items]
    scores = toy_filter.model.scores(imgs)
    kept = filter_candidates(toy_filter.model, imgs, 0.0)
    assert kept == [img for img, s in zip(imgs, scores) if s > 0]


def test_mixed_toy_set_at_half(toy_filter):
    imgs = [img for img, _ in toy_filter.data.items]
    kept = filter_candidates(toy_filter.model, imgs, 0.5)
    assert kept == [img for img, y in toy_filter.data.items if y == 1]


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (256, 256), elements=st.floats(0, 1, width=32)),
       st.floats(0, 1), st.floats(0, 1))
def test_scores_bounded_and_antitone(toy_filter, px, a, b):
    img = SignatureImage(px)
    s = predict_signature(toy_filter.model, img)
    assert 0.0 <= s <= 1.0
    lo, hi = sorted((a, b))
    imgs = [img] + [im for im, _ in toy_filter.data.items]
    high = filter_candidates(toy_filter.model, imgs, hi)
    low = filter_candidates(toy_filter.model, imgs, lo)
    assert all(any(h is l for l in low) for h in high)


def test_augment_seeded():
    img = synth.signature_image(3, np.random.default_rng(0))
    assert np.array_equal(augment(img, 42).pixels, augment(img, 42).pixels)
    assert not np.array_equal(augment(img, 42).pixels, augment(img, 43).pixels)


def test_augment_white_stays_white():
    white = normalize_to_canvas(np.ones((256, 256)))
    for seed in range(10):
        assert np.all(augment(white, seed).pixels == 1.0)


def _marker_centres(px):
    from scipy import ndimage
    lab, n = ndimage.label(px < 0.5)
    return np.array(ndimage.center_of_mass(px < 0.5, lab, range(1, n + 1)))


@pytest.mark.parametrize("seed", range(12))
def test_augment_crop_is_a_subwindow(seed):
    # two markers well inside any 80% window; no rotation so only the crop acts
    px = np.ones((256, 256), dtype=np.float32)
    px[126:130, 126:130] = 0.0
    px[96:100, 156:160] = 0.0
    out = augment(normalize_to_canvas(px), seed, max_rotation=0.0).pixels
    c = _marker_centres(out)
    assert len(c) == 2
    src = np.array([[97.5, 157.5], [127.5, 127.5]])  # label order is scan order
    # a sub-window refit to the canvas magnifies by 1 .. 1/0.8
    scale = np.linalg.norm(c[0] - c[1]) / np.linalg.norm(src[0] - src[1])
    assert 1.0 - 0.03 <= scale <= 1.25 + 0.03
    # same translation-free direction, so no flip or rotation crept in
    d_out, d_in = (c[1] - c[0]), (src[1] - src[0])
    assert np.dot(d_out, d_in) / (np.linalg.norm(d_out) * np.linalg.norm(d_in)) > 0.999


@pytest.mark.parametrize("seed", range(12))
def test_augment_rotation_within_ten_degrees(seed):
    px = np.ones((256, 256), dtype=np.float32)
    px[127:129, 28:228] = 0.0
    out = augment(normalize_to_canvas(px), seed, min_keep=1.0).pixels
    ys, xs = np.nonzero(out < 0.5)
    cov = np.cov(np.vstack([xs, ys]))
    w, v = np.linalg.eigh(cov)
    major = v[:, np.argmax(w)]
    angle = math.degrees(math.atan2(abs(major[1]), abs(major[0])))
    assert angle <= 10.5


def test_single_class_train_rejected():
    img = normalize_to_canvas(np.ones((10, 10)))
    with pytest.raises(DataError):
        train_filter(LabeledRegionSet([(img, 1), (img, 1)]), 1)


def test_epoch_zero_loss_near_ln2(toy_filter):
    assert abs(toy_filter.history[0]["loss"] - math.log(2)) <= 0.15 * math.log(2)


def test_smoothed_loss_non_increasing():
    # without augmentation the training objective is fixed across epochs
    data = synth.toy_filter_set(10, seed=0)
    _, hist = train_filter(data, 100, rng_seed=0, augmentation=False)
    losses = np.array([h["loss"] for h in hist])
    smooth = losses.reshape(-1, 10).mean(axis=1)
    assert np.all(np.diff(smooth) <= 1e-9)
