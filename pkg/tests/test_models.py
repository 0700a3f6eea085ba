import math

import numpy as np
import pytest

from fedcvae.models import (
    CganParams,
    ClassDistribution,
    CvaeParams,
    LinearParams,
    cgan_losses,
    classifier_predict_proba,
    cross_entropy_grads,
    cvae_encode,
    cvae_loss,
    cvae_loss_and_grads,
    cvae_loss_terms,
    generate_embeddings,
    generator_grads,
    kl_to_standard_normal,
)
from fedcvae.numerics import Layer, MlpStack, NumericError, Purpose, RngStream, ShapeError

from helpers import cgan_grad_error, cvae_grad_error, fd_per_sample, linear_grad_error, rel_err


def small_cvae(d=4, K=2, seed=0):
    return CvaeParams.init(d, K, RngStream(seed, 1), RngStream(seed, 2), latent=3, h1=7, h2=5)


# --- CVAE ------------------------------------------------------------------------

def test_cvae_default_dims():
    p = CvaeParams.init(768, 11, RngStream(0, 1), RngStream(0, 2))
    assert p.encoder.widths == [779, 128, 64, 64]
    assert p.decoder.widths == [43, 64, 128, 768]
    assert p.param_count() == (779 * 128 + 128 + 128 * 64 + 64 + 64 * 64 + 64
                               + 43 * 64 + 64 + 64 * 128 + 128 + 128 * 768 + 768)


def test_encode_zero_noise_gives_mu():
    p = small_cvae()
    x = np.random.default_rng(0).normal(size=(3, 4))
    z, mu, _ = cvae_encode(p, x, [0, 1, 1], None)
    assert np.array_equal(z, mu)


def test_encode_deterministic_per_stream():
    p = small_cvae()
    x = np.ones((2, 4))
    a = cvae_encode(p, x, [0, 1], RngStream(3, purpose=Purpose.LATENT))[0]
    b = cvae_encode(p, x, [0, 1], RngStream(3, purpose=Purpose.LATENT))[0]
    assert np.array_equal(a, b)


def test_logvar_clamped():
    p = small_cvae()
    last = p.encoder.layers[-1]
    last.b[3:] = -1e4  # logvar head
    last.W[3:] = 0.0
    _, _, logvar = cvae_encode(p, np.ones((1, 4)), [0], None)
    assert np.all(logvar == -20.0)
    last.b[3:] = 1e4
    _, _, logvar = cvae_encode(p, np.ones((1, 4)), [0], None)
    assert np.all(logvar == 20.0)


def test_encode_label_out_of_range():
    with pytest.raises(ValueError):
        cvae_encode(small_cvae(), np.ones((1, 4)), [2], None)


def test_kl_examples():
    assert kl_to_standard_normal([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert kl_to_standard_normal([1.0], [0.0]) == pytest.approx(0.5)
    assert kl_to_standard_normal([0.0], [math.log(2)]) == pytest.approx(0.5 * (2 - 1 - math.log(2)))
    assert kl_to_standard_normal([0.0], [math.log(2)]) == pytest.approx(0.15343, abs=1e-5)


def test_kl_nonnegative_random():
    r = np.random.default_rng(0)
    for _ in range(200):
        assert kl_to_standard_normal(r.normal(size=4) * 3, r.normal(size=4) * 3) >= 0.0


def test_loss_terms_examples():
    x = np.zeros((1, 4))
    zero = np.zeros((1, 3))
    assert cvae_loss_terms(x, x, zero, zero)[0] == 0.0
    assert cvae_loss_terms(x, x + 1.0, zero, zero)[0] == pytest.approx(1.0)
    mu = np.ones((1, 3))
    assert cvae_loss_terms(x, x + 1.0, mu, zero, beta=0.0)[0] == pytest.approx(1.0)


def test_loss_names_offending_term():
    with pytest.raises(NumericError, match="MSE"):
        cvae_loss_terms(np.zeros((1, 2)), np.full((1, 2), np.inf), np.zeros((1, 1)), np.zeros((1, 1)))
    with pytest.raises(NumericError, match="KL"):
        cvae_loss_terms(np.zeros((1, 2)), np.zeros((1, 2)), np.full((1, 1), np.inf), np.zeros((1, 1)))


def test_perfect_autoencoder_loss_zero():
    # encoder outputs mu=0, logvar=0; decoder copies x from... a constant, so use x = decoder bias
    p = small_cvae(d=2)
    for layer in p.encoder.layers:
        layer.W[:] = 0.0
        layer.b[:] = 0.0
    for layer in p.decoder.layers:
        layer.W[:] = 0.0
        layer.b[:] = 0.0
    p.decoder.layers[-1].b[:] = [0.5, -1.5]
    loss, per = cvae_loss(p, np.array([[0.5, -1.5]]), [1], RngStream(0))
    assert loss == 0.0 and per[0] == 0.0


def test_batch_mode_is_mean_of_per_sample():
    p = small_cvae()
    x = np.random.default_rng(1).normal(size=(3, 4))
    _, _, per = cvae_loss_and_grads(p, x, [0, 1, 0], RngStream(2), per_sample=True)
    _, _, mean = cvae_loss_and_grads(p, x, [0, 1, 0], RngStream(2), per_sample=False)
    for a, b in zip(per, mean):
        assert np.allclose(a.mean(axis=0), b, rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_cvae_per_sample_grads_fd(seed):
    assert cvae_grad_error(seed) < 1e-4


def test_cvae_factored_matches_per_sample():
    p = small_cvae()
    x = np.random.default_rng(1).normal(size=(3, 4))
    _, _, per = cvae_loss_and_grads(p, x, [0, 1, 0], RngStream(2), per_sample=True)
    _, _, fac = cvae_loss_and_grads(p, x, [0, 1, 0], RngStream(2), per_sample="factored")
    mats = [m for f in fac for m in f.materialize()]
    for a, b in zip(per, mats):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-15)


# --- CGAN ------------------------------------------------------------------------

def test_cgan_default_dims_and_ratio():
    cvae = CvaeParams.init(768, 11, RngStream(0, 1), RngStream(0, 2))
    cgan = CganParams.init(768, 11, RngStream(0, 1), RngStream(0, 2))
    assert cgan.generator.widths == [111, 256, 512, 768]
    assert cgan.discriminator.widths == [779, 512, 256, 1]
    assert cvae.param_count() == 222464
    assert cgan.param_count() == 1085185
    assert 4 <= cgan.param_count() / cvae.param_count() <= 6


def _zero_disc_cgan(d=3, K=2):
    p = CganParams.init(d, K, RngStream(0, 1), RngStream(0, 2), z_dim=4, g_hidden=(5, 5), f_hidden=(5, 5))
    for layer in p.discriminator.layers:
        layer.W[:] = 0.0
        layer.b[:] = 0.0
    return p


def test_cgan_logit_zero_gives_ln2():
    p = _zero_disc_cgan()
    disc, gen = cgan_losses(p, np.ones((4, 3)), [0, 1, 0, 1], RngStream(1))
    assert np.allclose(disc, math.log(2))
    assert gen == pytest.approx(math.log(2))


def test_cgan_saturated_discriminator_losses_near_zero():
    p = _zero_disc_cgan()
    # real rows carry a large first feature; fakes from this generator do not
    last = p.discriminator.layers[-1]
    p.discriminator.layers[0].W[0, 0] = 1.0
    p.discriminator.layers[1].W[0, 0] = 1.0
    last.W[0, 0] = 1e6
    last.b[0] = -1e5
    for layer in p.generator.layers:
        layer.W[:] = 0.0
        layer.b[:] = 0.0
    disc, _ = cgan_losses(p, np.full((3, 3), 10.0), [0, 1, 0], RngStream(2))
    assert np.all(disc < 1e-12)


def test_cgan_losses_per_sample_layout():
    p = _zero_disc_cgan()
    disc, _ = cgan_losses(p, np.ones((3, 3)), [0, 1, 1], RngStream(1), n_fake=5)
    assert disc.shape == (8,)


@pytest.mark.parametrize("seed", range(5))
def test_cgan_disc_per_sample_grads_fd(seed):
    assert cgan_grad_error(seed) < 1e-4


def test_generator_grads_fd():
    p = CganParams.init(3, 2, RngStream(0, 1), RngStream(0, 2), z_dim=4, g_hidden=(5, 6), f_hidden=(6, 4))
    y = np.array([0, 1, 1])

    def loss():
        return np.array([generator_grads(p, y, RngStream(4))[0]])

    _, grads = generator_grads(p, y, RngStream(4))
    numeric = [g[0] for g in fd_per_sample(loss, p.generator.params())]
    assert rel_err(grads, numeric) < 1e-6


# --- generation ----------------------------------------------------------------------

def test_class_distribution_validation():
    with pytest.raises(ValueError):
        ClassDistribution(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        ClassDistribution(np.array([-0.1, 1.1]))
    assert ClassDistribution.local_empirical([0, 0, 1, 2], 4).probs.tolist() == [0.5, 0.25, 0.25, 0.0]


def test_generate_label_counts_uniform():
    dec = MlpStack.init([3 + 2, 4, 5], RngStream(0))
    ds = generate_embeddings(dec, 100, ClassDistribution.uniform(2), RngStream(1, purpose=Purpose.GENERATE))
    counts = np.bincount(ds.y, minlength=2)
    assert ds.X.shape == (100, 5)
    assert 30 <= counts[0] <= 70 and 30 <= counts[1] <= 70


def test_generate_zero_decoder_returns_bias():
    dec = MlpStack([Layer(np.zeros((4, 5)), np.zeros(4)), Layer(np.zeros((2, 4)), np.array([1.5, -2.0]), "identity")])
    ds = generate_embeddings(dec, 7, ClassDistribution.uniform(2), RngStream(0))
    assert np.all(ds.X == np.array([1.5, -2.0]))


def test_generate_deterministic_and_width_check():
    dec = MlpStack.init([5, 4, 3], RngStream(0))
    a = generate_embeddings(dec, 20, ClassDistribution.uniform(2), RngStream(9))
    b = generate_embeddings(dec, 20, ClassDistribution.uniform(2), RngStream(9))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    with pytest.raises(ShapeError):
        generate_embeddings(dec, 5, ClassDistribution.uniform(5), RngStream(0))


def test_generated_frequencies_converge():
    dec = MlpStack.init([6, 3], RngStream(0))
    dist = ClassDistribution(np.array([0.1, 0.3, 0.6]))
    ds = generate_embeddings(dec, 50_000, dist, RngStream(2))
    assert np.allclose(np.bincount(ds.y) / 50_000, dist.probs, atol=0.01)


# --- linear classifier --------------------------------------------------------------

def test_predict_proba_examples():
    assert np.allclose(classifier_predict_proba(LinearParams.zeros(3, 2), np.ones(2)), 1 / 3)
    p = LinearParams(np.zeros((2, 2)), np.array([10.0, 0.0]))
    assert classifier_predict_proba(p, np.ones(2))[0] == pytest.approx(1 / (1 + math.exp(-10)), rel=1e-12)
    assert classifier_predict_proba(p, np.ones(2))[0] == pytest.approx(0.99995, abs=1e-5)


def test_predict_proba_shift_invariance_and_argmax():
    r = np.random.default_rng(0)
    p = LinearParams(r.normal(size=(4, 3)), r.normal(size=4))
    x = r.normal(size=(10, 3))
    shifted = LinearParams(p.W, p.b + 5.0)
    pr = classifier_predict_proba(p, x)
    assert np.allclose(pr, classifier_predict_proba(shifted, x))
    assert np.allclose(pr.sum(axis=1), 1.0, atol=1e-9)
    assert np.array_equal(pr.argmax(axis=1), p.logits(x).argmax(axis=1))


@pytest.mark.parametrize("seed", range(5))
def test_linear_per_sample_grads_fd(seed):
    assert linear_grad_error(seed) < 1e-4


def test_linear_mean_grad_is_mean_of_per_sample():
    r = np.random.default_rng(3)
    p = LinearParams(r.normal(size=(3, 4)), r.normal(size=3))
    x, y = r.normal(size=(5, 4)), r.integers(0, 3, 5)
    _, _, per = cross_entropy_grads(p, x, y, per_sample=True)
    _, _, mean = cross_entropy_grads(p, x, y)
    for a, b in zip(per, mean):
        assert np.allclose(a.mean(axis=0), b, rtol=1e-12)
