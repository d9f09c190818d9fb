"""Frozen extractor: determinism, differentiability, sensitivity."""

import numpy as np
import pytest

from fedvisrec import autodiff as ad
from fedvisrec import dataio, vision
from fedvisrec.errors import DimensionMismatch

SEED = 42

# Measured pairwise constant for seed 42 over the pinned 12-image corpus;
# guards against accidental weight mutation.
PINNED_PAIRWISE_CONSTANT = 0.1996537959734448


@pytest.fixture(scope="module")
def extractor():
    return vision.Extractor(seed=SEED, output_dim=64, image_size=16)


def _image(item_id):
    asset = dataio.synth_item_image(seed=5, item_id=item_id, size=16)
    return vision.image_to_chw(asset.normalized)


def test_same_seed_same_image_bit_identical(extractor):
    x = _image(0)
    a = vision.extract_array(extractor, x)
    b = vision.extract_array(vision.Extractor(seed=SEED, output_dim=64, image_size=16), x)
    assert a.tobytes() == b.tobytes()


def test_zero_image_zero_feature(extractor):
    # Zero biases and a zero-preserving activation make this exact.
    zero = np.zeros((3, 16, 16))
    assert np.all(vision.extract_array(extractor, zero) == 0.0)


def test_gradient_wrt_image_matches_finite_differences(extractor):
    x = _image(1)

    def f(t):
        return ad.sum_all(ad.square(vision.extract(extractor, t)))

    assert ad.finite_diff_check(f, x, h=1e-5) < 1e-4


def test_weights_get_no_gradient(extractor):
    g = ad.Graph()
    img = g.leaf(_image(2))
    loss = ad.sum_all(ad.square(vision.extract(extractor, img)))
    grads = ad.backward(g, loss)
    # The image is the only leaf: weights enter as constants, so weight
    # gradients are structurally absent.
    assert set(grads.keys()) == {img}


def test_weights_are_frozen(extractor):
    with pytest.raises(ValueError):
        extractor.conv1[0, 0, 0, 0] = 99.0


def test_sensitivity_zero_at_zero_delta(extractor):
    assert vision.feature_jacobian_sensitivity(extractor, _image(3), np.zeros((3, 16, 16))) == 0.0


def test_sensitivity_matches_jacobian_column(extractor):
    x = _image(4)
    h = 1e-6
    delta = np.zeros((3, 16, 16))
    delta[1, 7, 7] = h
    ratio = vision.feature_jacobian_sensitivity(extractor, x, delta)
    plus, minus = x.copy(), x.copy()
    plus[1, 7, 7] += h
    minus[1, 7, 7] -= h
    column = (vision.extract_array(extractor, plus) -
              vision.extract_array(extractor, minus)) / (2 * h)
    assert abs(ratio - np.linalg.norm(column)) < 1e-3


def test_sensitivity_positive_at_attack_scale(extractor):
    rng = np.random.default_rng(7)
    delta = rng.uniform(-1, 1, size=(3, 16, 16)) * (4.0 / 127.5)
    assert vision.feature_jacobian_sensitivity(extractor, _image(5), delta) > 0.0


def test_pairwise_constant_regression(extractor):
    images = [_image(i) for i in range(12)]
    feats = [vision.extract_array(extractor, x) for x in images]
    measured = 0.0
    for i in range(12):
        for j in range(i):
            measured = max(measured, np.linalg.norm(feats[i] - feats[j]) /
                           np.linalg.norm(images[i] - images[j]))
    assert measured == pytest.approx(PINNED_PAIRWISE_CONSTANT, rel=1e-9)


def test_batch_matches_single(extractor):
    xs = np.stack([_image(i) for i in range(3)])
    batch = vision.extract_array(extractor, xs)
    for i in range(3):
        assert np.allclose(batch[i], vision.extract_array(extractor, xs[i]), atol=1e-12)


def test_dimension_checks(extractor):
    with pytest.raises(DimensionMismatch):
        vision.extract_array(extractor, np.zeros((3, 8, 8)))
    with pytest.raises(DimensionMismatch):
        vision.Extractor(seed=1, image_size=4)
