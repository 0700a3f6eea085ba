"""Per-client linear classifiers and local/global probability interpolation."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import EmbeddingDataset
from .evaluation import balanced_accuracy
from .models import LinearParams, classifier_predict_proba, cross_entropy_grads
from .numerics import OptimizerState, Purpose, RngStream

log = logging.getLogger(__name__)

LAMBDA_GRID = tuple(i / 10 for i in range(11))


@dataclass
class TrainSpec:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


def train_linear(train: EmbeddingDataset, spec: TrainSpec, rng: RngStream | None = None,
                 init: LinearParams | None = None) -> LinearParams:
    """Softmax regression by minibatch Adam (or SGD) from a zero start.

    Batches come from a fresh permutation each epoch; when ``batch_size``
    covers the whole set the batch is the set itself, in order.
    """
    if train.n < 1:
        raise ValueError("empty training set")
    if np.count_nonzero(train.class_counts()) < 2:
        log.warning("training set holds a single class; the classifier is degenerate")
    rng = rng or RngStream(spec.seed, purpose=Purpose.DOWNSTREAM)
    p = init.copy() if init is not None else LinearParams.zeros(train.K, train.d)
    opt = OptimizerState(spec.optimizer, spec.learning_rate)
    n = train.n
    for _ in range(spec.epochs):
        if spec.batch_size >= n:
            batches = [np.arange(n)]
        else:
            perm = rng.permutation(n)
            batches = [perm[i:i + spec.batch_size] for i in range(0, n, spec.batch_size)]
        for idx in batches:
            _, _, grads = cross_entropy_grads(p, train.X[idx], train.y[idx])
            p.set_params(opt.apply(p.params(), grads))
    return p


@dataclass
class InterpolatedClassifier:
    local: LinearParams
    global_: LinearParams
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.local.W.shape != self.global_.W.shape:
            raise ValueError("local and global classifiers disagree on (K, d)")


def interpolate_proba(c: InterpolatedClassifier, x) -> np.ndarray:
    p_local = classifier_predict_proba(c.local, x)
    p_global = classifier_predict_proba(c.global_, x)
    if c.lam == 1.0:
        return p_local
    if c.lam == 0.0:
        return p_global
    return c.lam * p_local + (1.0 - c.lam) * p_global


def predict(c: InterpolatedClassifier, x) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class on ties
    return np.argmax(interpolate_proba(c, x), axis=-1)


def predict_from_proba(probs) -> np.ndarray:
    return np.argmax(np.asarray(probs), axis=-1)


def lambda_scores(local: LinearParams, global_: LinearParams, val: EmbeddingDataset) -> list[float]:
    p_local = classifier_predict_proba(local, val.X)
    p_global = classifier_predict_proba(global_, val.X)
    scores = []
    for lam in LAMBDA_GRID:
        probs = p_local if lam == 1.0 else p_global if lam == 0.0 else lam * p_local + (1 - lam) * p_global
        scores.append(balanced_accuracy(predict_from_proba(probs), val.y, val.K))
    return scores


def select_lambda(local: LinearParams, global_: LinearParams, val: EmbeddingDataset) -> tuple[float, float]:
    """Grid-search lambda on validation balanced accuracy. Returns ``(lambda, score)``.

    Ties go to the larger lambda.
    """
    if val.n < 1:
        raise ValueError("empty validation set")
    scores = lambda_scores(local, global_, val)
    best = max(range(len(LAMBDA_GRID)), key=lambda i: (scores[i], LAMBDA_GRID[i]))
    return LAMBDA_GRID[best], scores[best]
