"""Frozen visual feature extractor.

A seeded random convnet standing in for a large pretrained backbone: two
3x3 stride-2 conv layers (8 then 16 channels, zero biases), leaky
activation, global average pooling, and a frozen linear projection to the
feature dimension.  Weights are generated once from the seed and never
trained; gradients flow to the input image only.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch
from .seeding import rng_for

LEAKY_SLOPE = 0.1
MIN_IMAGE_SIZE = 7  # two valid 3x3 stride-2 convs need at least 7 pixels


class Extractor:
    """Deterministic, differentiable-in-the-input, never trained."""

    def __init__(self, seed, output_dim=64, image_size=16):
        if image_size < MIN_IMAGE_SIZE:
            raise DimensionMismatch(f"image size {image_size} below {MIN_IMAGE_SIZE}")
        self.seed = seed
        self.output_dim = output_dim
        self.image_size = image_size
        rng = rng_for(seed, "extractor")
        self.conv1 = rng.normal(0.0, np.sqrt(2.0 / 27.0), size=(8, 3, 3, 3))
        self.conv2 = rng.normal(0.0, np.sqrt(2.0 / 72.0), size=(16, 8, 3, 3))
        self.proj = rng.normal(0.0, 0.25, size=(output_dim, 16))
        for w in (self.conv1, self.conv2, self.proj):
            w.setflags(write=False)


def image_to_chw(normalized_hwc):
    """(H, W, 3) [-1, 1] float image -> (3, H, W) array for the extractor."""
    return np.ascontiguousarray(np.transpose(normalized_hwc, (2, 0, 1)))


def chw_to_hwc(chw):
    return np.ascontiguousarray(np.transpose(chw, (1, 2, 0)))


def extract_batch(extractor, images):
    """Features for a (N, 3, H, W) tensor; differentiable wrt the images."""
    if images.data.ndim != 4 or images.data.shape[1] != 3:
        raise DimensionMismatch(f"expected (N, 3, H, W), got {images.data.shape}")
    if images.data.shape[2] != extractor.image_size or images.data.shape[3] != extractor.image_size:
        raise DimensionMismatch(
            f"extractor built for {extractor.image_size}px, got {images.data.shape[2:]}")
    h = ad.leaky_relu(ad.conv2d(images, ad.constant(extractor.conv1), stride=2), LEAKY_SLOPE)
    h = ad.leaky_relu(ad.conv2d(h, ad.constant(extractor.conv2), stride=2), LEAKY_SLOPE)
    pooled = ad.global_avg_pool(h)                       # (N, 16)
    return ad.matmul(pooled, ad.constant(extractor.proj.T))  # (N, output_dim)


def extract(extractor, image):
    """Feature vector for one (3, H, W) image tensor."""
    if image.data.ndim != 3:
        raise DimensionMismatch(f"expected (3, H, W), got {image.data.shape}")
    batch = ad.reshape(image, (1,) + image.data.shape)
    return ad.reshape(extract_batch(extractor, batch), (extractor.output_dim,))


def extract_array(extractor, chw_array):
    """Plain-numpy feature for a (3, H, W) or (N, 3, H, W) array (no tape)."""
    arr = np.asarray(chw_array, dtype=np.float64)
    if arr.ndim == 3:
        return extract(extractor, ad.constant(arr)).data
    return extract_batch(extractor, ad.constant(arr)).data


def feature_jacobian_sensitivity(extractor, image_chw, delta):
    """||phi(clip(x + d)) - phi(x)|| / ||d||, defined as 0 at d = 0."""
    delta = np.asarray(delta, dtype=np.float64)
    dnorm = float(np.linalg.norm(delta))
    if dnorm == 0.0:
        return 0.0
    base = extract_array(extractor, image_chw)
    moved = extract_array(extractor, np.clip(image_chw + delta, -1.0, 1.0))
    return float(np.linalg.norm(moved - base)) / dnorm
