"""Classification metrics, embedding fidelity and report aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream, gaussian_sample


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if truth.size == 0:
        raise ValueError("empty label vectors")
    return float(np.mean(pred == truth))


def balanced_accuracy(pred, truth, K: int | None = None) -> float:
    """Mean per-class recall over the classes present in ``truth``."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if truth.size == 0:
        raise ValueError("empty truth")
    K = int(truth.max()) + 1 if K is None else K
    support = np.bincount(truth, minlength=K)
    hits = np.bincount(truth[pred == truth], minlength=K)
    present = support > 0
    return float(np.mean(hits[present] / support[present]))


# ---------------------------------------------------------------------------
# Wasserstein


def _quantile_grid(n: int, m: int):
    """Interval widths and quantile indices for two empirical inverse CDFs.

    Both inverse CDFs are piecewise constant with jumps at multiples of 1/n
    and 1/m; between merged breakpoints each picks a fixed order statistic.
    """
    cuts = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    cuts[-1] = 1.0
    left = np.concatenate([[0.0], cuts[:-1]])
    mid = 0.5 * (left + cuts)
    return cuts - left, np.minimum((mid * n).astype(np.int64), n - 1), np.minimum((mid * m).astype(np.int64), m - 1)


def wasserstein_1d(a, b) -> float:
    """W1 between two empirical distributions on the line."""
    return float(_w1_columns(np.asarray(a, dtype=np.float64).reshape(-1, 1),
                             np.asarray(b, dtype=np.float64).reshape(-1, 1))[0])


def _w1_columns(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    n, m = A.shape[0], B.shape[0]
    if n == 0 or m == 0:
        raise ValueError("empty sample")
    As = np.sort(A, axis=0)
    Bs = np.sort(B, axis=0)
    if n == m:
        return np.mean(np.abs(As - Bs), axis=0)
    w, ia, ib = _quantile_grid(n, m)
    return w @ np.abs(As[ia] - Bs[ib])


def _as_matrix(ds):
    return ds.X if hasattr(ds, "X") else np.atleast_2d(np.asarray(ds, dtype=np.float64))


def wasserstein_avg(real, synth) -> float:
    """Per-dimension 1-D W1 between marginals, averaged over dimensions.

    Accepts datasets or plain ``(n, d)`` arrays.
    """
    A, B = _as_matrix(real), _as_matrix(synth)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    return float(np.mean(_w1_columns(A, B)))


def sliced_wasserstein(real, synth, n_projections: int = 64, rng: RngStream | None = None) -> float:
    """Mean W1 over random unit directions (seeded)."""
    A, B = _as_matrix(real), _as_matrix(synth)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    rng = rng or RngStream(0)
    dirs = gaussian_sample(rng, (A.shape[1], n_projections))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    return float(np.mean(_w1_columns(A @ dirs, B @ dirs)))


# ---------------------------------------------------------------------------
# parameter counting


def param_count(model) -> int:
    """Total trainable parameters of a stack, a CVAE/CGAN pair or a linear classifier."""
    if hasattr(model, "param_count"):
        return int(model.param_count())
    if isinstance(model, (list, tuple)):
        return sum(param_count(m) for m in model)
    raise TypeError(f"cannot count parameters of {type(model).__name__}")


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    per_seed: dict  # seed -> list of per-client values
    mean: float
    std: float
    seeds: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "seeds": list(self.seeds),
                "per_seed": {str(k): list(v) for k, v in self.per_seed.items()}}

    def cell(self, scale: float = 100.0, digits: int = 2) -> str:
        return f"{self.mean * scale:.{digits}f} ± {self.std * scale:.{digits}f}"


def aggregate_report(values) -> MetricReport:
    """Mean over clients within each seed, then mean and population std across seeds.

    ``values`` maps seed -> per-client values (a bare list or number counts
    as a single seed 0).
    """
    if not isinstance(values, dict):
        values = {0: values}
    if not values:
        raise ValueError("no values to aggregate")
    per_seed = {}
    for seed in sorted(values):
        v = np.atleast_1d(np.asarray(values[seed], dtype=np.float64))
        if v.size == 0:
            raise ValueError(f"seed {seed} has no values")
        per_seed[seed] = [float(x) for x in v]
    # sorted client values keep the float sums independent of client order
    seed_means = np.array([np.mean(np.sort(per_seed[s])) for s in per_seed])
    return MetricReport(per_seed, float(np.mean(seed_means)), float(np.std(seed_means)), list(per_seed))
