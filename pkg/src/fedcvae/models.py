"""Conditional VAE, conditional GAN and linear classifier on embeddings.

Gradients are computed by hand through :class:`MlpStack`. Every
``*_grads`` function can return either per-sample gradients (leading sample
axis, needed for DP clipping) or batch-level gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EmbeddingDataset
from .numerics import (
    Layer,
    LayerFactors,
    MlpStack,
    NumericError,
    RngStream,
    ShapeError,
    gaussian_sample,
    log_softmax,
    onehot,
    softmax,
)

LOGVAR_MIN, LOGVAR_MAX = -20.0, 20.0
LOGIT_CLAMP = 30.0


def _check_labels(y, K):
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= K):
        raise ValueError(f"label out of range [0, {K})")
    return y


# ---------------------------------------------------------------------------
# CVAE


@dataclass
class CvaeParams:
    encoder: MlpStack
    decoder: MlpStack
    d: int
    K: int
    latent: int = 32
    h1: int = 128
    h2: int = 64

    def __post_init__(self):
        if self.encoder.widths != [self.d + self.K, self.h1, self.h2, 2 * self.latent]:
            raise ShapeError(f"encoder widths {self.encoder.widths} do not match dims")
        if self.decoder.widths != [self.latent + self.K, self.h2, self.h1, self.d]:
            raise ShapeError(f"decoder widths {self.decoder.widths} do not match dims")

    @classmethod
    def init(cls, d: int, K: int, enc_rng: RngStream, dec_rng: RngStream,
             latent: int = 32, h1: int = 128, h2: int = 64) -> "CvaeParams":
        enc = MlpStack.init([d + K, h1, h2, 2 * latent], enc_rng)
        dec = MlpStack.init([latent + K, h2, h1, d], dec_rng)
        return cls(enc, dec, d, K, latent, h1, h2)

    def param_count(self) -> int:
        return self.encoder.param_count() + self.decoder.param_count()

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.decoder.params()

    def set_params(self, arrays) -> None:
        k = 2 * len(self.encoder.layers)
        self.encoder.set_params(arrays[:k])
        self.decoder.set_params(arrays[k:])

    def copy(self) -> "CvaeParams":
        return CvaeParams(self.encoder.copy(), self.decoder.copy(), self.d, self.K,
                          self.latent, self.h1, self.h2)

    @property
    def shared(self) -> MlpStack:
        return self.decoder


def cvae_encode(p: CvaeParams, x, y, rng: RngStream | None):
    """Encode and reparameterize: ``z = mu + exp(logvar / 2) * eps``.

    ``rng=None`` means eps = 0, so z equals mu. logvar is clamped to
    [-20, 20] before use.
    """
    y = _check_labels(y, p.K)
    h = p.encoder(np.hstack([np.asarray(x, dtype=np.float64), onehot(y, p.K)]))
    mu = h[:, :p.latent]
    logvar = np.clip(h[:, p.latent:], LOGVAR_MIN, LOGVAR_MAX)
    eps = np.zeros_like(mu) if rng is None else gaussian_sample(rng, mu.shape)
    return mu + np.exp(0.5 * logvar) * eps, mu, logvar


def kl_to_standard_normal(mu, logvar) -> float:
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * np.sum(mu ** 2 + np.exp(logvar) - 1.0 - logvar))


def _kl_rows(mu, logvar):
    # expm1(lv) - lv instead of exp(lv) - 1 - lv keeps exact zeros at lv = 0
    return 0.5 * np.sum(mu ** 2 + (np.expm1(logvar) - logvar), axis=1)


def cvae_loss_terms(x, x_hat, mu, logvar, beta: float = 1.0) -> np.ndarray:
    """Per-sample ``MSE(x_hat, x) + beta * KL``; MSE is averaged over embedding dims."""
    mse = np.mean((np.asarray(x_hat) - np.asarray(x)) ** 2, axis=1)
    if not np.all(np.isfinite(mse)):
        raise NumericError("non-finite reconstruction (MSE) term")
    kl = _kl_rows(np.asarray(mu), np.asarray(logvar))
    if not np.all(np.isfinite(kl)):
        raise NumericError("non-finite KL term")
    return mse + beta * kl


def cvae_loss(p: CvaeParams, x, y, rng: RngStream | None, beta: float = 1.0):
    loss, per_sample, _ = cvae_loss_and_grads(p, x, y, rng, beta=beta, need_grads=False)
    return loss, per_sample


def cvae_loss_and_grads(p: CvaeParams, x, y, rng: RngStream | None, beta: float = 1.0,
                        per_sample: bool = True, need_grads: bool = True):
    """Loss, per-sample losses and gradients w.r.t. ``p.params()`` (encoder then decoder).

    With ``per_sample`` each gradient has a leading sample axis and holds the
    gradient of that sample's own loss; ``"factored"`` gives one
    :class:`LayerFactors` per layer instead; ``False`` gives the gradient of
    the batch mean.
    """
    x = np.asarray(x, dtype=np.float64)
    y = _check_labels(y, p.K)
    n = x.shape[0]
    if n < 1:
        raise ValueError("empty batch")
    if x.shape[1] != p.d:
        raise ShapeError(f"embedding width {x.shape[1]} != {p.d}")
    Y = onehot(y, p.K)
    enc_cache = p.encoder.forward(np.hstack([x, Y]))
    h = enc_cache.output
    mu = h[:, :p.latent]
    raw_lv = h[:, p.latent:]
    logvar = np.clip(raw_lv, LOGVAR_MIN, LOGVAR_MAX)
    eps = np.zeros_like(mu) if rng is None else gaussian_sample(rng, mu.shape)
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    dec_cache = p.decoder.forward(np.hstack([z, Y]))
    x_hat = dec_cache.output
    losses = cvae_loss_terms(x, x_hat, mu, logvar, beta)
    if not need_grads:
        return float(losses.mean()), losses, None

    g_xhat = 2.0 * (x_hat - x) / p.d
    dec_grads, g_dec_in = p.decoder.backward(dec_cache, g_xhat, per_sample=per_sample)
    g_z = g_dec_in[:, :p.latent]
    g_mu = g_z + beta * mu
    g_lv = g_z * eps * 0.5 * std + beta * 0.5 * np.expm1(logvar)
    g_lv = g_lv * ((raw_lv > LOGVAR_MIN) & (raw_lv < LOGVAR_MAX))
    enc_grads, _ = p.encoder.backward(enc_cache, np.hstack([g_mu, g_lv]), per_sample=per_sample)
    grads = enc_grads + dec_grads
    if per_sample is False:
        grads = [g / n for g in grads]
    return float(losses.mean()), losses, grads


# ---------------------------------------------------------------------------
# CGAN


@dataclass
class CganParams:
    generator: MlpStack
    discriminator: MlpStack
    d: int
    K: int
    z_dim: int = 100
    g_hidden: tuple = (256, 512)
    f_hidden: tuple = (512, 256)

    def __post_init__(self):
        self.g_hidden = tuple(self.g_hidden)
        self.f_hidden = tuple(self.f_hidden)
        if self.generator.widths != [self.z_dim + self.K, *self.g_hidden, self.d]:
            raise ShapeError(f"generator widths {self.generator.widths} do not match dims")
        if self.discriminator.widths != [self.d + self.K, *self.f_hidden, 1]:
            raise ShapeError(f"discriminator widths {self.discriminator.widths} do not match dims")

    @classmethod
    def init(cls, d: int, K: int, gen_rng: RngStream, disc_rng: RngStream, z_dim: int = 100,
             g_hidden=(256, 512), f_hidden=(512, 256)) -> "CganParams":
        gen = MlpStack.init([z_dim + K, *g_hidden, d], gen_rng)
        disc = MlpStack.init([d + K, *f_hidden, 1], disc_rng)
        return cls(gen, disc, d, K, z_dim, g_hidden, f_hidden)

    def param_count(self) -> int:
        return self.generator.param_count() + self.discriminator.param_count()

    def copy(self) -> "CganParams":
        return CganParams(self.generator.copy(), self.discriminator.copy(), self.d, self.K,
                          self.z_dim, self.g_hidden, self.f_hidden)

    @property
    def shared(self) -> MlpStack:
        return self.generator


def _softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def cgan_generate(p: CganParams, y, rng: RngStream) -> np.ndarray:
    y = _check_labels(y, p.K)
    z = gaussian_sample(rng, (y.size, p.z_dim))
    return p.generator(np.hstack([z, onehot(y, p.K)]))


def cgan_losses(p: CganParams, real_x, real_y, rng: RngStream, n_fake: int | None = None):
    """Discriminator BCE per sample (real rows then fake rows) and generator loss.

    Logits are clamped to +-30 before the losses, so a saturated
    discriminator gives losses near, not exactly at, zero.
    """
    real_x = np.asarray(real_x, dtype=np.float64)
    real_y = _check_labels(real_y, p.K)
    n_fake = real_y.size if n_fake is None else n_fake
    if real_y.size < 1 or n_fake < 1:
        raise ValueError("empty batch")
    fake_y = rng.categorical(np.full(p.K, 1.0 / p.K), n_fake)
    fake_x = cgan_generate(p, fake_y, rng)
    l_real = np.clip(p.discriminator(np.hstack([real_x, onehot(real_y, p.K)]))[:, 0], -LOGIT_CLAMP, LOGIT_CLAMP)
    l_fake = np.clip(p.discriminator(np.hstack([fake_x, onehot(fake_y, p.K)]))[:, 0], -LOGIT_CLAMP, LOGIT_CLAMP)
    disc = np.concatenate([_softplus(-l_real), _softplus(l_fake)])
    gen = float(np.mean(_softplus(-l_fake)))
    if not (np.all(np.isfinite(disc)) and np.isfinite(gen)):
        raise NumericError("non-finite GAN loss")
    return disc, gen


def disc_bce_grads(disc: MlpStack, x, y, target: float, K: int, per_sample: bool = True):
    """BCE-with-logits losses and discriminator gradients (per sample, or summed)."""
    cache = disc.forward(np.hstack([np.asarray(x, dtype=np.float64), onehot(y, K)]))
    logit = cache.output[:, 0]
    loss = _softplus(-logit) if target == 1.0 else _softplus(logit)
    g = (_sigmoid(logit) - target)[:, None]
    grads, _ = disc.backward(cache, g, per_sample=per_sample)
    return loss, grads


def generator_grads(p: CganParams, y, rng: RngStream):
    """Non-saturating generator loss ``mean(-log D(G(z|y)|y))`` and its batch-mean gradient."""
    y = _check_labels(y, p.K)
    n = y.size
    Y = onehot(y, p.K)
    z = gaussian_sample(rng, (n, p.z_dim))
    g_cache = p.generator.forward(np.hstack([z, Y]))
    d_cache = p.discriminator.forward(np.hstack([g_cache.output, Y]))
    logit = d_cache.output[:, 0]
    loss = float(np.mean(_softplus(-logit)))
    up = ((_sigmoid(logit) - 1.0) / n)[:, None]
    _, g_in = p.discriminator.backward(d_cache, up, per_sample=False)
    grads, _ = p.generator.backward(g_cache, g_in[:, :p.d], per_sample=False)
    return loss, grads


# ---------------------------------------------------------------------------
# class distributions and generation


@dataclass
class ClassDistribution:
    probs: np.ndarray
    kind: str = "explicit"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.kind not in ("uniform", "local_empirical", "explicit"):
            raise ValueError(f"unknown class distribution kind {self.kind!r}")
        if self.probs.ndim != 1 or (self.probs < 0).any() or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("class distribution must be non-negative and sum to 1")

    @property
    def K(self) -> int:
        return self.probs.size

    @classmethod
    def uniform(cls, K: int) -> "ClassDistribution":
        return cls(np.full(K, 1.0 / K), "uniform")

    @classmethod
    def local_empirical(cls, y, K: int) -> "ClassDistribution":
        counts = np.bincount(np.asarray(y, dtype=np.int64), minlength=K).astype(np.float64)
        return cls(counts / counts.sum(), "local_empirical")


def generate_embeddings(decoder: MlpStack, N: int, dist: ClassDistribution, rng: RngStream,
                        extractor_id: str = "synthetic") -> EmbeddingDataset:
    """Sample labels from ``dist``, latents from N(0, I), and decode them."""
    if N < 1:
        raise ValueError("N must be at least 1")
    K = dist.K
    latent = decoder.in_dim - K
    if latent < 1:
        raise ShapeError(f"decoder input width {decoder.in_dim} leaves no room for {K} classes")
    y = rng.categorical(dist.probs, N)
    z = gaussian_sample(rng, (N, latent))
    X = decoder(np.hstack([z, onehot(y, K)]))
    return EmbeddingDataset(X, y, K, extractor_id, "generated")


# ---------------------------------------------------------------------------
# linear classifier


@dataclass
class LinearParams:
    W: np.ndarray  # (K, d)
    b: np.ndarray  # (K,)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"W {self.W.shape} and b {self.b.shape} disagree")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise NumericError("non-finite classifier weights")

    @classmethod
    def zeros(cls, K: int, d: int) -> "LinearParams":
        return cls(np.zeros((K, d)), np.zeros(K))

    @classmethod
    def init(cls, K: int, d: int, rng: RngStream) -> "LinearParams":
        layer = MlpStack.init([d, K], rng).layers[0]
        return cls(layer.W, layer.b)

    @property
    def K(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.W, self.b]

    def set_params(self, arrays) -> None:
        W, b = arrays
        if W.shape != self.W.shape or b.shape != self.b.shape:
            raise ShapeError("classifier parameter shapes changed")
        self.W = np.array(W, dtype=np.float64)
        self.b = np.array(b, dtype=np.float64)

    def copy(self) -> "LinearParams":
        return LinearParams(self.W.copy(), self.b.copy())

    def as_stack(self) -> MlpStack:
        return MlpStack([Layer(self.W, self.b, "identity")])

    def param_count(self) -> int:
        return self.W.size + self.b.size

    def logits(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.d:
            raise ShapeError(f"input width {x.shape[1]} != {self.d}")
        return x @ self.W.T + self.b


def classifier_predict_proba(p: LinearParams, x) -> np.ndarray:
    """Softmax probabilities; a single vector in gives a single vector out."""
    x = np.asarray(x, dtype=np.float64)
    probs = softmax(p.logits(x))
    return probs[0] if x.ndim == 1 else probs


def cross_entropy_grads(p: LinearParams, x, y, per_sample: bool = False):
    """Mean cross-entropy and its gradient (or per-sample gradients of each sample's loss)."""
    x = np.asarray(x, dtype=np.float64)
    y = _check_labels(y, p.K)
    n = x.shape[0]
    logp = log_softmax(p.logits(x))
    losses = -logp[np.arange(n), y]
    delta = np.exp(logp) - onehot(y, p.K)
    if per_sample == "factored":
        return float(losses.mean()), losses, [LayerFactors(delta, x)]
    if per_sample:
        return float(losses.mean()), losses, [np.einsum("nk,nd->nkd", delta, x), delta]
    return float(losses.mean()), losses, [delta.T @ x / n, delta.mean(axis=0)]
