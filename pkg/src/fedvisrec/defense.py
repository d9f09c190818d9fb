"""Guided-diffusion purification and adversarial-image detection.

Every uploaded image is forward-diffused along a linear noise schedule
(submerging any bounded perturbation under Gaussian noise), then denoised
by a small noise-prediction convnet trained on the clean catalog.  Each
reverse step's mean is shifted toward the stored diffused counterpart of
the input, which keeps the output faithful to the original semantics.

Detection compares extractor features of an image and its purified twin:
clean images survive purification with high cosine similarity, images
carrying crafted perturbations do not.  The threshold is calibrated as the
minimum similarity observed over a clean corpus.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import vision
from .dataio import quantize_to_asset
from .errors import EmptyCorpus, InvalidScheduleBounds, StepOutOfRange
from .optim import adam_init, adam_step
from .seeding import rng_for

log = logging.getLogger(__name__)

DEFAULT_STEPS = 1000
BETA_ONE = 1e-4
BETA_T = 2e-2
DEFAULT_GUIDANCE = 1000.0
DENOISER_CHANNELS = 16


@dataclass
class NoiseSchedule:
    """Linear beta schedule with derived alpha products.

    Arrays are indexed by step-1 (step t runs 1..steps).  The stored
    ``one_minus_alpha_bar`` is exactly ``1 - alpha_bar`` so the pair sums
    to 1 in floating point.
    """

    steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    one_minus_alpha_bar: np.ndarray

    def beta(self, t):
        self._check(t)
        return self.betas[t - 1]

    def bar(self, t):
        self._check(t)
        return self.alpha_bar[t - 1], self.one_minus_alpha_bar[t - 1]

    def _check(self, t):
        if not 1 <= t <= self.steps:
            raise StepOutOfRange(f"step {t} outside 1..{self.steps}")


def build_schedule(steps=DEFAULT_STEPS, beta1=BETA_ONE, beta_t=BETA_T):
    """beta_t = beta1 + (t-1)/(T-1) * (betaT - beta1), endpoints exact."""
    if steps < 2:
        raise InvalidScheduleBounds("need at least 2 diffusion steps")
    if not 0.0 < beta1 < beta_t < 1.0:
        raise InvalidScheduleBounds(f"require 0 < {beta1} < {beta_t} < 1")
    t = np.arange(steps, dtype=np.float64)
    betas = beta1 + t / (steps - 1) * (beta_t - beta1)
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    return NoiseSchedule(steps=steps, betas=betas, alphas=alphas,
                         alpha_bar=alpha_bar,
                         one_minus_alpha_bar=1.0 - alpha_bar)


def q_sample(x0, t, zeta, schedule):
    """Closed-form diffusion to step t: sqrt(ab)*x0 + sqrt(1-ab)*zeta."""
    ab, rest = schedule.bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(rest) * zeta


def sinusoidal_embedding(t, dim):
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = float(t) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


@dataclass
class Denoiser:
    """Three-conv noise predictor with a sinusoidal step embedding."""

    weights: dict
    channels: int = DENOISER_CHANNELS
    image_size: int = 16

    @classmethod
    def fresh(cls, seed, channels=DENOISER_CHANNELS, image_size=16):
        rng = rng_for(seed, "denoiser-init")
        weights = {
            "conv_in": rng.normal(0, np.sqrt(2.0 / 27.0), size=(channels, 3, 3, 3)),
            "b_in": np.zeros(channels),
            "conv_mid": rng.normal(0, np.sqrt(2.0 / (channels * 9.0)),
                                   size=(channels, channels, 3, 3)),
            "b_mid": np.zeros(channels),
            # Near-zero output head: the untrained net predicts ~no noise.
            "conv_out": rng.normal(0, 0.01, size=(3, channels, 3, 3)),
            "b_out": np.zeros(3),
        }
        return cls(weights=weights, channels=channels, image_size=image_size)


def denoiser_forward(denoiser, x, t_values, params=None):
    """Predicted noise for (N, 3, H, W) input at per-sample steps.

    ``params`` defaults to constants (inference); pass tape leaves to train.
    """
    if params is None:
        params = {k: ad.constant(v) for k, v in denoiser.weights.items()}
    n = x.data.shape[0]
    temb = np.stack([sinusoidal_embedding(t, denoiser.channels) for t in t_values])
    h = ad.conv2d(x, params["conv_in"], params["b_in"], stride=1, padding=1)
    h = ad.leaky_relu(ad.add_channel_rows(h, ad.constant(temb)), 0.1)
    h = ad.leaky_relu(ad.conv2d(h, params["conv_mid"], params["b_mid"],
                                stride=1, padding=1), 0.1)
    return ad.conv2d(h, params["conv_out"], params["b_out"], stride=1, padding=1)


def train_denoiser(images, schedule, steps, seed, lr=1e-3, batch_size=8,
                   channels=DENOISER_CHANNELS):
    """Standard noise-prediction fit on the clean corpus.

    ``images`` are (3, H, W) arrays in [-1, 1].  Returns the denoiser and
    the per-step loss history.
    """
    if not images:
        raise EmptyCorpus("no images to train on")
    stack = np.stack(images)
    size = stack.shape[2]
    denoiser = Denoiser.fresh(seed, channels=channels, image_size=size)
    states = {k: adam_init(v, lr=lr) for k, v in denoiser.weights.items()}
    rng = rng_for(seed, "denoiser-train")
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(stack), size=min(batch_size, len(stack)))
        t_values = rng.integers(1, schedule.steps + 1, size=len(idx))
        zeta = rng.standard_normal((len(idx),) + stack.shape[1:])
        noisy = np.stack([q_sample(stack[i], int(t), z, schedule)
                          for i, t, z in zip(idx, t_values, zeta)])
        graph = ad.Graph()
        params = {k: graph.leaf(v, name=k) for k, v in denoiser.weights.items()}
        pred = denoiser_forward(denoiser, ad.constant(noisy), t_values, params)
        loss = ad.mean_all(ad.square(ad.sub(pred, ad.constant(zeta))))
        losses.append(loss.item())
        grads = ad.backward(graph, loss)
        for k in denoiser.weights:
            denoiser.weights[k], states[k] = adam_step(
                denoiser.weights[k], grads[params[k]], states[k])
    return denoiser, losses


def reverse_mean(denoiser, x_t, t, schedule):
    """mu = (x_t - beta/sqrt(1-ab) * eps(x_t, t)) / sqrt(alpha)."""
    ab, rest = schedule.bar(t)
    single = x_t.ndim == 3
    batch = x_t[None] if single else x_t
    eps = denoiser_forward(denoiser, ad.constant(batch), [t] * batch.shape[0]).data
    mu = (batch - schedule.beta(t) / np.sqrt(rest) * eps) / np.sqrt(schedule.alphas[t - 1])
    return mu[0] if single else mu


def guidance_shift(x_hat_t, guide_x_t, t, guidance, schedule):
    """Mean shift pulling the sample toward the diffused counterpart.

    The guidance density peaks where the two coincide, so the shift is the
    negative variance-scaled gradient of the mean squared error:
    (2 * lambda * Sigma_t / N) * (x_t - x_hat_t).
    """
    coeff = 2.0 * guidance * schedule.beta(t) / x_hat_t[0].size if x_hat_t.ndim == 4 \
        else 2.0 * guidance * schedule.beta(t) / x_hat_t.size
    return coeff * (guide_x_t - x_hat_t)


def guided_step(denoiser, x_hat_t, guide_x_t, t, guidance, schedule, noise):
    """One reverse step: sample from N(mu + shift, beta_t I)."""
    mu = reverse_mean(denoiser, x_hat_t, t, schedule)
    shift = guidance_shift(x_hat_t, guide_x_t, t, guidance, schedule)
    return mu + shift + np.sqrt(schedule.beta(t)) * noise


@dataclass
class PurifyTrace:
    seed: int
    xs: list = field(default_factory=list)      # x_1 .. x_T
    zetas: list = field(default_factory=list)   # the diffusion noises used


def _diffusion_noise(seed, image_tag, t, shape):
    return rng_for(seed, "purify-diffuse", image_tag, t).standard_normal(shape)


def _reverse_noise(seed, image_tag, t, shape):
    return rng_for(seed, "purify-reverse", image_tag, t).standard_normal(shape)


def purify(x0, denoiser, schedule, guidance, seed, image_tag=0, return_trace=False):
    """Diffuse with a stored trace, then run the guided reverse chain.

    ``x0`` is a (3, H, W) array in [-1, 1]; the output is clipped back to
    that range.  All randomness derives from (seed, image_tag), so the
    result is bit-reproducible.
    """
    out = purify_batch(x0[None], denoiser, schedule, guidance, seed,
                       image_tags=[image_tag], return_traces=return_trace)
    if return_trace:
        return out[0][0], out[1][0]
    return out[0]


def purify_batch(x0s, denoiser, schedule, guidance, seed, image_tags=None,
                 chunk=128, return_traces=False):
    """Vectorized purification; each image keeps its own noise streams."""
    n = x0s.shape[0]
    if image_tags is None:
        image_tags = list(range(n))
    outputs = np.empty_like(x0s)
    traces = [PurifyTrace(seed=seed) for _ in range(n)] if return_traces else None
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        block = x0s[lo:hi]
        tags = image_tags[lo:hi]
        shape = block.shape[1:]
        x_hat = None
        # Reverse pass; the diffused counterpart x_t is recomputed from x0
        # at each step (the trace is independent draws, not a path).
        for t in range(schedule.steps, 0, -1):
            zetas = np.stack([_diffusion_noise(seed, tag, t, shape) for tag in tags])
            x_t = np.stack([q_sample(block[i], t, zetas[i], schedule)
                            for i in range(len(tags))])
            if x_hat is None:
                x_hat = x_t.copy()
            noise = np.stack([_reverse_noise(seed, tag, t, shape) for tag in tags])
            x_hat = guided_step(denoiser, x_hat, x_t, t, guidance, schedule, noise)
            if return_traces:
                for i in range(len(tags)):
                    traces[lo + i].xs.append(x_t[i])
                    traces[lo + i].zetas.append(zetas[i])
        outputs[lo:hi] = np.clip(x_hat, -1.0, 1.0)
    if return_traces:
        for tr in traces:
            tr.xs.reverse()
            tr.zetas.reverse()
        return outputs, traces
    return outputs


@dataclass
class DetectorCalibration:
    rho: float
    similarities: list
    corpus_size: int


def feature_similarity(extractor, x0, x_purified):
    """Cosine similarity of extractor features; 0-norm vectors flag as -1."""
    a = vision.extract_array(extractor, x0)
    b = vision.extract_array(extractor, x_purified)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        log.warning("zero feature vector during detection; forcing adversarial verdict")
        return -1.0
    return float(np.dot(a, b) / (na * nb))


def _asset_to_chw(asset):
    return vision.image_to_chw(asset.normalized)


def calibrate_rho(denoiser, schedule, clean_assets, extractor, guidance, seed):
    """rho = minimum similarity between clean images and their purified twins."""
    if not clean_assets:
        raise EmptyCorpus("calibration corpus is empty")
    x0s = np.stack([_asset_to_chw(a) for a in clean_assets])
    purified = purify_batch(x0s, denoiser, schedule, guidance, seed,
                            image_tags=[f"calib-{i}" for i in range(len(clean_assets))])
    sims = []
    for i in range(len(clean_assets)):
        quant = quantize_to_asset(vision.chw_to_hwc(purified[i]), -1, "calib", 0)
        sims.append(feature_similarity(extractor, x0s[i], _asset_to_chw(quant)))
    return DetectorCalibration(rho=float(min(sims)), similarities=sims,
                               corpus_size=len(sims))


def detect(asset, denoiser, schedule, extractor, rho, guidance, seed, image_tag=0):
    """(verdict, similarity): adversarial iff similarity < rho."""
    x0 = _asset_to_chw(asset)
    purified = purify(x0, denoiser, schedule, guidance, seed, image_tag=image_tag)
    quant = quantize_to_asset(vision.chw_to_hwc(purified), asset.item_id,
                              "detector", asset.uploaded_epoch)
    sim = feature_similarity(extractor, x0, _asset_to_chw(quant))
    return ("adversarial" if sim < rho else "clean"), sim


def _rng_tag(tag, *parts):
    # distinct string tags keep purify streams of different roles independent
    return f"{tag}-" + "-".join(str(p) for p in parts)


class DefenseRuntime:
    """Server-side hook: purify every upload, log a detection verdict."""

    def __init__(self, denoiser, schedule, extractor, rho, guidance, seed):
        self.denoiser = denoiser
        self.schedule = schedule
        self.extractor = extractor
        self.rho = rho
        self.guidance = guidance
        self.seed = seed

    def _finish(self, asset, x0, purified, epoch):
        clean = quantize_to_asset(vision.chw_to_hwc(purified), asset.item_id,
                                  asset.provider_id, epoch,
                                  adversarial=asset.ground_truth_adversarial)
        sim = feature_similarity(self.extractor, x0, _asset_to_chw(clean))
        verdict = "adversarial" if sim < self.rho else "clean"
        return clean, (epoch, asset.item_id, sim, self.rho, verdict)

    def screen(self, asset, epoch):
        x0 = _asset_to_chw(asset)
        purified = purify(x0, self.denoiser, self.schedule, self.guidance,
                          self.seed, image_tag=_rng_tag("screen", epoch,
                                                        asset.item_id))
        return self._finish(asset, x0, purified, epoch)

    def screen_batch(self, assets, epoch):
        x0s = np.stack([_asset_to_chw(a) for a in assets])
        tags = [_rng_tag("screen", epoch, a.item_id) for a in assets]
        purified = purify_batch(x0s, self.denoiser, self.schedule,
                                self.guidance, self.seed, image_tags=tags)
        return [self._finish(a, x0s[i], purified[i], epoch)
                for i, a in enumerate(assets)]
