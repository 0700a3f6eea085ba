"""Shared oracles for the test-suite: finite differences and small random models."""
import numpy as np

from fedcvae.models import CganParams, CvaeParams, LinearParams, cross_entropy_grads, cvae_loss_and_grads, disc_bce_grads
from fedcvae.numerics import Purpose, RngStream

H = 1e-5


def fd_per_sample(losses_fn, params):
    """Central differences of a per-sample loss vector w.r.t. every parameter entry.

    Returns one array per parameter with a leading sample axis.
    """
    out = []
    for p in params:
        g = None
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            keep = p[i]
            p[i] = keep + H
            up = losses_fn()
            p[i] = keep - H
            down = losses_fn()
            p[i] = keep
            col = (up - down) / (2 * H)
            if g is None:
                g = np.zeros((col.size,) + p.shape)
            g[(slice(None),) + i] = col
        out.append(g)
    return out


def rel_err(analytic, numeric) -> float:
    """Relative error of a whole gradient (all tensors flattened together)."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    b = np.concatenate([np.ravel(x) for x in numeric])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


def _instance(seed):
    r = np.random.default_rng(seed)
    d = int(r.integers(2, 9))
    n = int(r.integers(1, 5))
    K = int(r.integers(2, 4))
    x = r.normal(size=(n, d))
    y = r.integers(0, K, size=n)
    return d, n, K, x, y


def cvae_grad_error(seed: int) -> float:
    d, n, K, x, y = _instance(seed)
    p = CvaeParams.init(d, K, RngStream(seed, 1), RngStream(seed, 2), latent=3, h1=7, h2=5)

    def losses():
        return cvae_loss_and_grads(p, x, y, RngStream(seed, 3, 0, Purpose.LATENT), need_grads=False)[1]

    _, _, grads = cvae_loss_and_grads(p, x, y, RngStream(seed, 3, 0, Purpose.LATENT), per_sample=True)
    return rel_err(grads, fd_per_sample(losses, p.params()))


def cgan_grad_error(seed: int) -> float:
    d, n, K, x, y = _instance(seed)
    p = CganParams.init(d, K, RngStream(seed, 1), RngStream(seed, 2), z_dim=4, g_hidden=(6, 5), f_hidden=(7, 5))
    errs = []
    for target in (1.0, 0.0):
        def losses():
            return disc_bce_grads(p.discriminator, x, y, target, K, per_sample=False)[0]

        _, grads = disc_bce_grads(p.discriminator, x, y, target, K, per_sample=True)
        errs.append(rel_err(grads, fd_per_sample(losses, p.discriminator.params())))
    return max(errs)


def linear_grad_error(seed: int) -> float:
    d, n, K, x, y = _instance(seed)
    p = LinearParams.init(K, d, RngStream(seed, 1))

    def losses():
        return cross_entropy_grads(p, x, y)[1]

    _, _, grads = cross_entropy_grads(p, x, y, per_sample=True)
    return rel_err(grads, fd_per_sample(losses, p.params()))
