"""Diffusion math oracles: schedule, moments, inversion, guidance, detection."""

import numpy as np
import pytest

from fedvisrec import dataio, defense, vision
from fedvisrec.errors import EmptyCorpus, InvalidScheduleBounds, StepOutOfRange
from fedvisrec.seeding import rng_for


@pytest.fixture(scope="module")
def schedule():
    return defense.build_schedule(steps=100)


@pytest.fixture(scope="module")
def corpus():
    return [dataio.synth_item_image(seed=21, item_id=i, size=16) for i in range(24)]


@pytest.fixture(scope="module")
def denoiser(schedule, corpus):
    images = [vision.image_to_chw(a.normalized) for a in corpus]
    den, losses = defense.train_denoiser(images, schedule, steps=300, seed=77)
    den._losses = losses
    return den


@pytest.fixture(scope="module")
def extractor():
    return vision.Extractor(seed=42, output_dim=64, image_size=16)


def test_schedule_endpoints_exact():
    for steps in (2, 100, 1000):
        sched = defense.build_schedule(steps=steps)
        assert sched.betas[0] == 1e-4
        assert sched.betas[-1] == 2e-2


def test_schedule_midpoint_linear():
    sched = defense.build_schedule(steps=101)  # odd T: midpoint at t=51
    assert sched.beta(51) == pytest.approx(0.01005, abs=1e-15)


def test_schedule_alpha_bar_monotone_and_first_value(schedule):
    assert schedule.alpha_bar[0] == 1.0 - 1e-4
    assert np.all(np.diff(schedule.alpha_bar) < 0)
    assert np.all((schedule.alpha_bar > 0) & (schedule.alpha_bar < 1))


def test_schedule_pair_sums_to_one_exactly(schedule):
    assert np.all(schedule.alpha_bar + schedule.one_minus_alpha_bar == 1.0)


def test_schedule_validation():
    with pytest.raises(InvalidScheduleBounds):
        defense.build_schedule(steps=1)
    with pytest.raises(InvalidScheduleBounds):
        defense.build_schedule(beta1=0.02, beta_t=0.0001)


def test_q_sample_noiseless_branch(schedule):
    x0 = np.full((3, 4, 4), 0.5)
    out = defense.q_sample(x0, 10, np.zeros_like(x0), schedule)
    assert np.allclose(out, np.sqrt(schedule.alpha_bar[9]) * x0, atol=1e-15)


def test_q_sample_full_corruption_limit():
    sched = defense.build_schedule(steps=1000)
    x0 = np.full((3, 4, 4), 0.9)
    zeta = rng_for(1, "z").standard_normal(x0.shape)
    out = defense.q_sample(x0, 1000, zeta, sched)
    # alpha_bar at T is ~4e-5: the sample is almost exactly the noise.
    assert np.allclose(out, zeta, atol=0.05)


def test_q_sample_step_bounds(schedule):
    with pytest.raises(StepOutOfRange):
        defense.q_sample(np.zeros((3, 2, 2)), 0, np.zeros((3, 2, 2)), schedule)
    with pytest.raises(StepOutOfRange):
        defense.q_sample(np.zeros((3, 2, 2)), 101, np.zeros((3, 2, 2)), schedule)


def test_q_sample_monte_carlo_moments(schedule):
    # Scalar case at t=40 over 10,000 seeds: mean and variance must match
    # the closed form within 3 standard errors.
    t = 40
    x0 = np.array([0.7])
    draws = np.array([
        defense.q_sample(x0, t, rng_for(9, "mc", i).standard_normal(1), schedule)[0]
        for i in range(10_000)])
    ab, rest = schedule.bar(t)
    se_mean = np.sqrt(rest / 10_000)
    assert abs(draws.mean() - np.sqrt(ab) * 0.7) < 3 * se_mean
    se_var = rest * np.sqrt(2.0 / (10_000 - 1))
    assert abs(draws.var(ddof=1) - rest) < 3 * se_var


def test_adversarial_decomposition_identity(schedule):
    # q(x0 + d) - q(x0) == sqrt(alpha_bar_t) * d for every t, to 1e-12.
    rng = rng_for(3, "decomp")
    x0 = rng.uniform(-1, 1, size=(3, 16, 16))
    delta = rng.uniform(-1, 1, size=x0.shape) * (4.0 / 127.5)
    for t in range(1, schedule.steps + 1):
        zeta = rng.standard_normal(x0.shape)
        gap = defense.q_sample(x0 + delta, t, zeta, schedule) - \
            defense.q_sample(x0, t, zeta, schedule)
        assert np.max(np.abs(gap - np.sqrt(schedule.alpha_bar[t - 1]) * delta)) < 1e-12


def test_untrained_denoiser_noise_mse_near_one(schedule):
    den = defense.Denoiser.fresh(seed=5)
    rng = rng_for(5, "mse")
    errs = []
    for _ in range(50):
        zeta = rng.standard_normal((1, 3, 16, 16))
        pred = defense.denoiser_forward(den, __import__(
            "fedvisrec.autodiff", fromlist=["constant"]).constant(zeta),
            [schedule.steps]).data
        errs.append(np.mean((zeta - pred) ** 2))
    # A near-zero predictor scores the per-coordinate variance of the noise.
    assert 0.85 < np.mean(errs) < 1.15


def test_denoiser_training_descends(denoiser):
    losses = denoiser._losses
    assert losses[-1] <= losses[0]


def test_denoiser_training_deterministic(schedule, corpus):
    images = [vision.image_to_chw(a.normalized) for a in corpus[:6]]
    a, _ = defense.train_denoiser(images, schedule, steps=8, seed=3)
    b, _ = defense.train_denoiser(images, schedule, steps=8, seed=3)
    for k in a.weights:
        assert a.weights[k].tobytes() == b.weights[k].tobytes()


def test_reverse_mean_formula_collapse(schedule):
    den = defense.Denoiser.fresh(seed=6)
    for k in den.weights:
        den.weights[k] = np.zeros_like(den.weights[k])
    x = rng_for(6, "rm").standard_normal((3, 16, 16))
    mu = defense.reverse_mean(den, x, 5, schedule)
    assert np.allclose(mu, x / np.sqrt(schedule.alphas[4]), atol=1e-12)


def test_reverse_mean_inverts_first_step(schedule):
    # If the net returned the true noise, one step from t=1 recovers x0.
    x0 = rng_for(7, "inv").uniform(-1, 1, size=(3, 16, 16))
    zeta = rng_for(8, "inv").standard_normal(x0.shape)
    x1 = defense.q_sample(x0, 1, zeta, schedule)
    beta1 = schedule.beta(1)
    mu = (x1 - beta1 / np.sqrt(schedule.one_minus_alpha_bar[0]) * zeta) / \
        np.sqrt(schedule.alphas[0])
    assert np.max(np.abs(mu - x0)) < 1e-10


def test_reverse_mean_finite_on_wide_inputs(schedule, denoiser):
    x = np.linspace(-3, 3, 768).reshape(3, 16, 16)
    assert np.all(np.isfinite(defense.reverse_mean(denoiser, x, 50, schedule)))


def test_guided_step_zero_lambda_is_unguided(schedule, denoiser):
    rng = rng_for(11, "g0")
    x_hat = rng.standard_normal((3, 16, 16))
    guide = rng.standard_normal((3, 16, 16))
    noise = rng.standard_normal((3, 16, 16))
    a = defense.guided_step(denoiser, x_hat, guide, 30, 0.0, schedule, noise)
    mu = defense.reverse_mean(denoiser, x_hat, 30, schedule)
    b = mu + np.sqrt(schedule.beta(30)) * noise
    assert np.array_equal(a, b)


def test_guided_shift_zero_at_coincidence(schedule):
    x = rng_for(12, "gs").standard_normal((3, 16, 16))
    shift = defense.guidance_shift(x, x, 10, 1000.0, schedule)
    assert np.all(shift == 0.0)


def test_guided_mean_contraction(schedule, denoiser):
    # For every step with 2*lambda*Sigma/N < 1 the guided mean lands
    # strictly closer to the guidance target than the unguided mean.
    rng = rng_for(13, "contract")
    guide = rng.uniform(-1, 1, size=(3, 16, 16))
    offsets = rng.standard_normal((3, 16, 16))
    lam = 1000.0
    n = guide.size
    for t in range(1, schedule.steps + 1):
        coeff = 2.0 * lam * schedule.beta(t) / n
        assert coeff < 1.0
        x_hat = guide + offsets  # well-separated from the target
        mu = defense.reverse_mean(denoiser, x_hat, t, schedule)
        shifted = mu + defense.guidance_shift(x_hat, guide, t, lam, schedule)
        assert np.linalg.norm(shifted - guide) < np.linalg.norm(mu - guide)


def test_purify_output_range_and_determinism(schedule, denoiser, corpus):
    x0 = vision.image_to_chw(corpus[0].normalized)
    a = defense.purify(x0, denoiser, schedule, 1000.0, seed=50)
    b = defense.purify(x0, denoiser, schedule, 1000.0, seed=50)
    assert a.tobytes() == b.tobytes()
    assert np.all(a >= -1.0) and np.all(a <= 1.0)
    quant = dataio.quantize_to_asset(vision.chw_to_hwc(a), 0, "x", 0)
    assert quant.pixels.min() >= 0 and quant.pixels.max() <= 255


def test_purify_trace_shape(schedule, denoiser, corpus):
    x0 = vision.image_to_chw(corpus[1].normalized)
    _, trace = defense.purify(x0, denoiser, schedule, 1000.0, seed=51,
                              return_trace=True)
    assert len(trace.xs) == schedule.steps
    assert len(trace.zetas) == schedule.steps
    # x_t reproducible from the stored noise.
    for t in (1, 37, schedule.steps):
        assert np.allclose(trace.xs[t - 1],
                           defense.q_sample(x0, t, trace.zetas[t - 1], schedule),
                           atol=1e-12)


def test_purify_batch_matches_seeding(schedule, denoiser, corpus):
    xs = np.stack([vision.image_to_chw(a.normalized) for a in corpus[:4]])
    out = defense.purify_batch(xs, denoiser, schedule, 1000.0, seed=52)
    single = defense.purify(xs[2], denoiser, schedule, 1000.0, seed=52, image_tag=2)
    assert np.allclose(out[2], single, atol=1e-9)


def test_calibration_and_detection(schedule, denoiser, extractor, corpus):
    calib = defense.calibrate_rho(denoiser, schedule, corpus[:12], extractor,
                                  1000.0, seed=60)
    assert calib.rho == min(calib.similarities)
    assert calib.corpus_size == 12
    # No calibration image scores below the corpus minimum, by construction.
    assert all(s >= calib.rho for s in calib.similarities)

    verdict, sim = defense.detect(corpus[0], denoiser, schedule, extractor,
                                  rho=calib.rho, guidance=1000.0, seed=61)
    assert verdict in ("clean", "adversarial")
    assert -1.0 <= sim <= 1.0

    single = defense.calibrate_rho(denoiser, schedule, corpus[:1], extractor,
                                   1000.0, seed=62)
    assert single.rho == single.similarities[0]

    with pytest.raises(EmptyCorpus):
        defense.calibrate_rho(denoiser, schedule, [], extractor, 1000.0, seed=0)


def test_detect_orthogonal_and_identical_features(extractor, schedule, denoiser):
    # cosine of identical vectors is 1 -> clean for any rho <= 1.
    a = np.ones(4)
    assert float(np.dot(a, a) / (np.linalg.norm(a) ** 2)) == 1.0
    # zero-feature input forces the adversarial verdict.
    zero_asset = dataio.ImageAsset(item_id=0,
                                   pixels=np.full((16, 16, 3), 127))
    # pixel 127 maps to ~-0.0039, nearly zero input; build an exactly-zero
    # feature by zeroing the image instead:
    sim = defense.feature_similarity(extractor, np.zeros((3, 16, 16)),
                                     np.zeros((3, 16, 16)))
    assert sim == -1.0  # flagged, cosine undefined


def test_purified_catalog_blur_spread_shrinks(schedule, denoiser, corpus):
    from fedvisrec import metrics
    xs = np.stack([vision.image_to_chw(a.normalized) for a in corpus])
    purified = defense.purify_batch(xs, denoiser, schedule, 1000.0, seed=63)
    quants = [dataio.quantize_to_asset(vision.chw_to_hwc(p), i, "x", 0)
              for i, p in enumerate(purified)]
    before = metrics.catalog_blur_stddev(corpus)
    after = metrics.catalog_blur_stddev(quants)
    assert after <= before
