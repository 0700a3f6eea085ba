"""DP-SGD mechanics and a Renyi-DP accountant for the Poisson-subsampled Gaussian."""
from __future__ import annotations

import logging
import math
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import LayerFactors, RngStream, gaussian_sample

log = logging.getLogger(__name__)

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (128, 256)


class InfinitePrivacyLoss(ValueError):
    """Raised when a zero noise multiplier makes the privacy loss unbounded."""


class CalibrationError(RuntimeError):
    pass


class PrivacyBudgetExceeded(RuntimeError):
    def __init__(self, message: str, spent: "PrivacySpent"):
        super().__init__(message)
        self.spent = spent


@dataclass
class DpConfig:
    epsilon_target: float = 1.0
    delta: float = 1e-4
    clip_norm: float = 1.5
    noise_multiplier: float = 1.0
    sample_rate: float = 0.01
    planned_steps: int = 1

    def __post_init__(self):
        if not self.epsilon_target > 0:
            raise ValueError("epsilon_target must be positive")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise multiplier must be non-negative")
        if not 0.0 < self.sample_rate <= 1.0:
            raise ValueError("sample rate must lie in (0, 1]")
        if self.planned_steps < 1:
            raise ValueError("planned_steps must be at least 1")


def check_delta(delta: float, n_min: int) -> bool:
    """Warn when delta is not below 1/n for the smallest client. Returns True if it is fine."""
    if n_min > 0 and delta >= 1.0 / n_min:
        log.warning("delta=%g is not below 1/n=%g for the smallest client (n=%d); "
                    "the guarantee is weak", delta, 1.0 / n_min, n_min)
        return False
    return True


# ---------------------------------------------------------------------------
# clipping and noise

# Called as hook(event, payload) from the DP gradient path. Tests use it to
# check that nothing unclipped reaches the optimizer.
_audit_hooks: list[Callable] = []


def add_audit_hook(fn: Callable) -> None:
    _audit_hooks.append(fn)


def remove_audit_hook(fn: Callable) -> None:
    _audit_hooks.remove(fn)


def _emit(event: str, payload) -> None:
    for fn in list(_audit_hooks):
        fn(event, payload)


def per_sample_norms(grads: Sequence[np.ndarray]) -> np.ndarray:
    """L2 norm of each sample's gradient, flattened jointly over all parameters."""
    n = grads[0].shape[0]
    sq = np.zeros(n)
    for g in grads:
        sq += np.sum(g.reshape(n, -1) ** 2, axis=1)
    return np.sqrt(sq)


def clip_per_sample(grads: Sequence[np.ndarray], C: float) -> list[np.ndarray]:
    """Scale each sample's gradient by ``min(1, C / norm)``.

    ``grads`` is a list of per-parameter arrays whose leading axis indexes
    samples.
    """
    if not C > 0:
        raise ValueError("clip norm must be positive")
    norms = per_sample_norms(grads)
    scale = np.minimum(1.0, C / np.maximum(norms, 1e-300))
    # a gradient sitting a hair above C after scaling gets nudged back inside
    post = norms * scale
    scale = np.where(post > C, scale * (C / np.maximum(post, C)), scale)
    clipped = [g * scale.reshape((-1,) + (1,) * (g.ndim - 1)) for g in grads]
    _emit("clipped", per_sample_norms(clipped))
    return clipped


def noisy_aggregate(clipped: Sequence[np.ndarray], C: float, sigma: float, rng: RngStream,
                    normalizer: float | None = None) -> list[np.ndarray]:
    """``(sum_i g_i + N(0, sigma^2 C^2 I)) / normalizer``; normalizer defaults to the batch size."""
    n = clipped[0].shape[0]
    if n < 1:
        raise ValueError("need at least one gradient")
    denom = float(n if normalizer is None else normalizer)
    out = _add_noise([g.sum(axis=0) for g in clipped], C, sigma, rng, denom)
    _emit("noised", out)
    return out


def _add_noise(totals: list[np.ndarray], C: float, sigma: float, rng: RngStream, denom: float) -> list[np.ndarray]:
    # one flat draw per step, split over parameters in order
    if sigma > 0:
        noise = gaussian_sample(rng, sum(t.size for t in totals))
        off = 0
        for i, t in enumerate(totals):
            totals[i] = t + sigma * C * noise[off:off + t.size].reshape(t.shape)
            off += t.size
    return [t / denom for t in totals]


def private_gradient(per_sample: Sequence[np.ndarray], C: float, sigma: float, rng: RngStream,
                     normalizer: float | None = None) -> list[np.ndarray]:
    return noisy_aggregate(clip_per_sample(per_sample, C), C, sigma, rng, normalizer)


def private_gradient_factored(factors: Sequence[LayerFactors], C: float, sigma: float, rng: RngStream,
                              normalizer: float | None = None) -> list[np.ndarray]:
    """Same result as :func:`private_gradient` on the materialized per-sample
    gradients of ``factors``, without building them.

    Both paths draw the noise the same way, so given the same stream they
    agree up to rounding.
    """
    if not C > 0:
        raise ValueError("clip norm must be positive")
    n = factors[0].delta.shape[0]
    if n < 1:
        raise ValueError("need at least one gradient")
    norms = np.sqrt(sum(f.sq_norms() for f in factors))
    scale = np.minimum(1.0, C / np.maximum(norms, 1e-300))
    post = norms * scale
    scale = np.where(post > C, scale * (C / np.maximum(post, C)), scale)
    _emit("clipped", norms * scale)
    denom = float(n if normalizer is None else normalizer)
    out = _add_noise([t for f in factors for t in f.weighted_sum(scale)], C, sigma, rng, denom)
    _emit("noised", out)
    return out


# ---------------------------------------------------------------------------
# RDP accounting


def _log_expm1(x: float) -> float:
    if x > 30.0:
        return x + math.log1p(-math.exp(-x))
    return math.log(math.expm1(x))


@lru_cache(maxsize=65536)
def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """RDP of one step of the Poisson-subsampled Gaussian mechanism at integer order ``alpha``.

    Uses ``A = sum_k C(a,k) (1-q)^(a-k) q^k exp(k(k-1) / (2 sigma^2))`` and
    ``rdp = log(A) / (a - 1)``. Since the binomial weights sum to one, ``A - 1``
    is a sum of positive terms ``C(a,k) (1-q)^(a-k) q^k expm1(...)`` over
    ``k >= 2``; summing those in log space avoids cancellation at small q.
    """
    alpha = int(alpha)
    if alpha < 2:
        raise ValueError("order must be an integer >= 2")
    if not 0.0 <= q <= 1.0:
        raise ValueError("sampling rate must lie in [0, 1]")
    if sigma < 0:
        raise ValueError("noise multiplier must be non-negative")
    if q == 0.0:
        return 0.0
    if sigma == 0.0:
        raise InfinitePrivacyLoss("sigma = 0 gives unbounded privacy loss")
    if q == 1.0:
        return alpha / (2.0 * sigma ** 2)
    log_q, log_1mq = math.log(q), math.log1p(-q)
    terms = []
    for k in range(2, alpha + 1):
        log_binom = math.lgamma(alpha + 1) - math.lgamma(k + 1) - math.lgamma(alpha - k + 1)
        terms.append(log_binom + (alpha - k) * log_1mq + k * log_q
                     + _log_expm1(k * (k - 1) / (2.0 * sigma ** 2)))
    top = max(terms)
    log_a_minus_1 = top + math.log(sum(math.exp(t - top) for t in terms))
    if log_a_minus_1 > 30.0:
        log_a = log_a_minus_1 + math.log1p(math.exp(-log_a_minus_1))
    else:
        log_a = math.log1p(math.exp(log_a_minus_1))
    return log_a / (alpha - 1)


def compute_rdp(q: float, sigma: float, steps: int, orders: Sequence[int] = DEFAULT_ORDERS) -> np.ndarray:
    """RDP after ``steps`` compositions (additive in steps)."""
    return steps * np.array([rdp_subsampled_gaussian(q, sigma, a) for a in orders])


def rdp_to_dp(orders: Sequence[int], rdp: Sequence[float], delta: float) -> tuple[float, int]:
    """Convert RDP curve to (epsilon, best order) with ``eps = min rdp + log(1/delta)/(a-1)``."""
    orders = np.asarray(orders, dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    if orders.size == 0:
        raise ValueError("empty order grid")
    if orders.shape != rdp.shape:
        raise ValueError("orders and rdp values differ in length")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    eps = rdp + math.log(1.0 / delta) / (orders - 1.0)
    i = int(np.nanargmin(eps))
    return max(0.0, float(eps[i])), int(orders[i])


def epsilon_for(sigma: float, q: float, steps: int, delta: float,
                orders: Sequence[int] = DEFAULT_ORDERS) -> float:
    return rdp_to_dp(orders, compute_rdp(q, sigma, steps, orders), delta)[0]


def calibrate_noise(epsilon_target: float, delta: float, q: float, steps: int,
                    orders: Sequence[int] = DEFAULT_ORDERS, lo: float = 0.1, hi: float = 100.0,
                    tol: float = 1e-3) -> float:
    """Smallest noise multiplier in ``[lo, hi]`` whose composed epsilon stays within the target.

    Bisects (geometrically) until the bracket is far tighter than ``tol``, so
    the returned sigma meets the target while ``sigma * (1 - tol)`` does not.
    """
    if not epsilon_target > 0:
        raise ValueError("epsilon target must be positive")

    def eps(s):
        return epsilon_for(s, q, steps, delta, orders)

    if eps(lo) <= epsilon_target:
        return lo
    e_hi = eps(hi)
    if e_hi > epsilon_target:
        raise CalibrationError(
            f"target epsilon={epsilon_target} unreachable with sigma <= {hi}: "
            f"eps({hi})={e_hi:.4g} at q={q}, steps={steps}, delta={delta}")
    # bracket down to a relative width well below tol
    while hi / lo - 1.0 > min(tol, 1e-3) * 1e-4:
        mid = math.sqrt(lo * hi)
        if eps(mid) <= epsilon_target:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class PrivacySpent:
    orders: tuple
    rdp_values: np.ndarray
    steps_taken: int
    epsilon: float
    delta: float
    best_order: int

    def as_dict(self) -> dict:
        return {"steps": self.steps_taken, "epsilon": self.epsilon, "delta": self.delta,
                "best_order": self.best_order}


@dataclass
class PrivacyAccountant:
    """Running RDP total for one client's DP-SGD at fixed ``(q, sigma)``."""

    sample_rate: float
    noise_multiplier: float
    delta: float = 1e-4
    orders: tuple = DEFAULT_ORDERS
    steps: int = 0
    _per_step: np.ndarray = field(default=None, repr=False)
    _extra: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.orders = tuple(int(a) for a in self.orders)
        self._per_step = np.array([rdp_subsampled_gaussian(self.sample_rate, self.noise_multiplier, a)
                                   for a in self.orders])
        self._extra = np.zeros(len(self.orders))

    def step(self, count: int = 1) -> None:
        self.steps += count

    @property
    def rdp(self) -> np.ndarray:
        return self.steps * self._per_step + self._extra

    def epsilon(self, delta: float | None = None) -> float:
        return rdp_to_dp(self.orders, self.rdp, self.delta if delta is None else delta)[0]

    def epsilon_after(self, extra_steps: int) -> float:
        return rdp_to_dp(self.orders, self.rdp + extra_steps * self._per_step, self.delta)[0]

    def spent(self) -> PrivacySpent:
        eps, order = rdp_to_dp(self.orders, self.rdp, self.delta)
        return PrivacySpent(self.orders, self.rdp.copy(), self.steps, eps, self.delta, order)

    def compose(self, other: "PrivacyAccountant") -> "PrivacyAccountant":
        """Sequential composition with another accountant on the same order grid."""
        if other.orders != self.orders:
            raise ValueError("accountants use different order grids")
        out = PrivacyAccountant(self.sample_rate, self.noise_multiplier, self.delta, self.orders, self.steps)
        out._extra = self._extra + other.rdp
        return out
