"""Embedding datasets: file formats, synthetic blobs, partitioning and splits."""
from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import RngStream

log = logging.getLogger(__name__)

FEMB_MAGIC = b"FEMB"
FEMB_VERSION = 1


class FormatError(ValueError):
    """Malformed dataset file. ``offset`` is the byte (or line) where parsing failed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ValidationError(ValueError):
    pass


@dataclass
class EmbeddingDataset:
    X: np.ndarray
    y: np.ndarray
    K: int
    extractor_id: str = "unknown"
    source: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise ValidationError(f"embeddings must be 2-D, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ValidationError(f"{self.X.shape[0]} embeddings but {self.y.shape[0]} labels")
        if self.K < 1:
            raise ValidationError("K must be positive")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.K):
            raise ValidationError(f"labels must lie in [0, {self.K})")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "EmbeddingDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return EmbeddingDataset(self.X[idx], self.y[idx], self.K, self.extractor_id, self.source)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.K)

    @property
    def meta(self) -> dict:
        return {"extractor_id": self.extractor_id, "source": self.source, "K": self.K}


# ---------------------------------------------------------------------------
# file formats


def save_femb(ds: EmbeddingDataset, path) -> None:
    name = ds.extractor_id.encode("utf-8")
    if len(name) > 0xFFFF:
        raise ValidationError("extractor id too long for the FEMB header")
    header = FEMB_MAGIC + struct.pack("<IIIIH", FEMB_VERSION, ds.n, ds.d, ds.K, len(name)) + name
    body = ds.X.astype("<f4").tobytes() + ds.y.astype("<u4").tobytes()
    Path(path).write_bytes(header + body)


def _parse_femb(buf: bytes, source: str) -> EmbeddingDataset:
    if len(buf) < 4 or buf[:4] != FEMB_MAGIC:
        raise FormatError("bad magic, expected b'FEMB'", 0)
    if len(buf) < 22:
        raise FormatError("truncated header", len(buf))
    version, n, d, K, name_len = struct.unpack_from("<IIIIH", buf, 4)
    if version != FEMB_VERSION:
        raise FormatError(f"unsupported FEMB version {version}", 4)
    off = 22
    if len(buf) < off + name_len:
        raise FormatError("truncated extractor id", len(buf))
    try:
        name = buf[off:off + name_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("extractor id is not utf-8", off) from exc
    off += name_len
    need = off + 4 * n * d + 4 * n
    if len(buf) < need:
        raise FormatError(f"truncated body: need {need} bytes, have {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after labels", need)
    X = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += 4 * n * d
    y = np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(np.int64)
    if n and y.max() >= K:
        bad = int(np.argmax(y >= K))
        raise ValidationError(f"label {int(y[bad])} at row {bad} is not below K={K}")
    return EmbeddingDataset(X.astype(np.float64), y, K, name, source)


def save_csv(ds: EmbeddingDataset, path) -> None:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["label"] + [f"f{j}" for j in range(ds.d)])
    X32 = ds.X.astype(np.float32)
    for label, row in zip(ds.y, X32):
        # str() of a float32 is the shortest string that round-trips to it
        w.writerow([int(label)] + [str(v) for v in row])
    Path(path).write_text(out.getvalue(), encoding="utf-8")


def _parse_csv(text: str, source: str, K: int | None, extractor_id: str) -> EmbeddingDataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError("empty CSV", 0)
    header = rows[0]
    d = len(header) - 1
    if header[0] != "label" or d < 1 or header[1:] != [f"f{j}" for j in range(d)]:
        raise FormatError("header must be label,f0,...,f{d-1}", 0)
    labels, feats = [], []
    for line, row in enumerate(rows[1:], start=1):
        if not row:
            continue
        if len(row) != d + 1:
            raise FormatError(f"row has {len(row)} fields, expected {d + 1}", line)
        try:
            labels.append(int(row[0]))
            feats.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise FormatError(f"unparseable number: {exc}", line) from exc
    if not labels:
        raise FormatError("no data rows", 1)
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0:
        raise ValidationError("negative label")
    K = int(y.max()) + 1 if K is None else K
    if y.max() >= K:
        raise ValidationError(f"label {int(y.max())} is not below K={K}")
    X = np.asarray(feats, dtype=np.float32).astype(np.float64)
    return EmbeddingDataset(X, y, K, extractor_id, source)


def load_dataset(path, format: str | None = None, K: int | None = None,
                 extractor_id: str = "unknown") -> EmbeddingDataset:
    """Load an embedding dataset from a FEMB or CSV file.

    ``format`` defaults to the file suffix. CSV files carry no K, so it is
    taken from ``K`` if given, else from the largest label.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "femb":
        return _parse_femb(path.read_bytes(), str(path))
    if fmt == "csv":
        return _parse_csv(path.read_text(encoding="utf-8"), str(path), K, extractor_id)
    raise FormatError(f"unknown dataset format {fmt!r}", 0)


def save_dataset(ds: EmbeddingDataset, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "femb":
        save_femb(ds, path)
    elif fmt == "csv":
        save_csv(ds, path)
    else:
        raise FormatError(f"unknown dataset format {fmt!r}", 0)


# ---------------------------------------------------------------------------
# synthetic data


def synth_blobs(K: int, d: int, n_per_class: int, separation: float, rng: RngStream,
                extractor_id: str = "blobs") -> EmbeddingDataset:
    """Gaussian blobs N(mu_c, I) whose means are pairwise ``separation`` apart.

    Means are ``separation / sqrt(2)`` times orthonormal directions (a random
    rotation of the first K basis vectors), so every pair sits at exactly
    ``separation``. Needs ``K <= d``.
    """
    if K < 2 or d < 2:
        raise ValueError("need K >= 2 and d >= 2")
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    if K > d:
        raise ValueError("orthogonal class means need K <= d")
    A = rng.normal((d, K))
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))  # fix the sign ambiguity of QR
    means = (separation / np.sqrt(2.0)) * Q.T  # (K, d)
    X = np.repeat(means, n_per_class, axis=0) + rng.normal((K * n_per_class, d))
    y = np.repeat(np.arange(K), n_per_class)
    return EmbeddingDataset(X, y, K, extractor_id, f"blobs(K={K},d={d},n={n_per_class},s={separation})")


# ---------------------------------------------------------------------------
# partitions and splits


@dataclass
class PartitionPlan:
    assignment: np.ndarray  # client id for every sample
    M: int

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        counts = self.counts
        if (counts == 0).any():
            raise ValidationError("partition leaves a client empty")

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.M)

    def indices(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == m)

    def client_indices(self) -> list[np.ndarray]:
        return [self.indices(m) for m in range(self.M)]


def partition_iid(ds: EmbeddingDataset, M: int, rng: RngStream) -> PartitionPlan:
    if M < 1 or M > ds.n:
        raise ValueError(f"cannot split {ds.n} samples across {M} clients")
    perm = rng.permutation(ds.n)
    assignment = np.empty(ds.n, dtype=np.int64)
    for m, chunk in enumerate(np.array_split(perm, M)):
        assignment[chunk] = m
    return PartitionPlan(assignment, M)


def partition_dirichlet(ds: EmbeddingDataset, M: int, alpha: float, rng: RngStream,
                        max_retries: int = 100, min_size: int = 1) -> PartitionPlan:
    """Label-skewed split: class c goes to clients with proportions ~ Dir(alpha).

    If a draw leaves some client with fewer than ``min_size`` samples the whole
    allocation is redrawn, up to ``max_retries`` times; after that, single
    samples are moved from the largest client until everyone has ``min_size``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if min_size < 1:
        raise ValueError("min_size must be at least 1")
    if M < 1 or M * min_size > ds.n:
        raise ValueError(f"cannot split {ds.n} samples across {M} clients of at least {min_size}")
    gen = rng.numpy_generator()
    by_class = [np.flatnonzero(ds.y == c) for c in range(ds.K)]
    assignment = np.empty(ds.n, dtype=np.int64)
    for _ in range(max_retries + 1):
        for idx in by_class:
            if idx.size == 0:
                continue
            p = gen.dirichlet(np.full(M, alpha))
            counts = gen.multinomial(idx.size, p)
            owners = np.repeat(np.arange(M), counts)
            assignment[gen.permutation(idx)] = owners
        if (np.bincount(assignment, minlength=M) >= min_size).all():
            return PartitionPlan(assignment, M)
    log.warning("dirichlet partition still has clients below %d samples after %d retries; moving samples",
                min_size, max_retries)
    counts = np.bincount(assignment, minlength=M)
    for m in np.flatnonzero(counts < min_size):
        while counts[m] < min_size:
            donor = int(np.argmax(counts))
            victim = np.flatnonzero(assignment == donor)[0]
            assignment[victim] = m
            counts[donor] -= 1
            counts[m] += 1
    return PartitionPlan(assignment, M)


@dataclass
class SplitSpec:
    ratios: tuple = (0.6, 0.2, 0.2)
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        if len(self.ratios) != 3 or min(self.ratios) <= 0 or abs(sum(self.ratios) - 1.0) > 1e-12:
            raise ValueError(f"split ratios must be three positive numbers summing to 1, got {self.ratios}")


def _split_sizes(n: int, ratios) -> tuple[int, int, int]:
    n_val = int(np.floor(ratios[1] * n + 1e-9))
    n_test = int(np.floor(ratios[2] * n + 1e-9))
    return n - n_val - n_test, n_val, n_test


def min_split_size(spec: SplitSpec) -> int:
    """Smallest client size whose train, val and test splits are all non-empty (5 for 60:20:20)."""
    n = 3
    while min(_split_sizes(n, spec.ratios)) < 1:
        n += 1
    return n


def split_indices(y: np.ndarray, spec: SplitSpec, rng: RngStream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index triple (train, val, test) over ``range(len(y))``.

    Sizes are floor(ratio * n) for val and test, the remainder goes to train.
    The stratified variant fills val and test class by class in proportion,
    handing leftover slots to the classes with the largest fractional share.
    """
    y = np.asarray(y, dtype=np.int64)
    n = y.size
    n_train, n_val, n_test = _split_sizes(n, spec.ratios)
    stratified = spec.stratified
    if stratified:
        counts = np.bincount(y)
        present = counts[counts > 0]
        if n < 5 or present.min() < 3:
            log.warning("a class has fewer than 3 samples; falling back to an unstratified split")
            stratified = False
    if not stratified:
        perm = rng.permutation(n)
        return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                np.sort(perm[n_train + n_val:]))

    classes = np.flatnonzero(np.bincount(y) > 0)
    pools = {c: np.flatnonzero(y == c)[rng.permutation(int((y == c).sum()))] for c in classes}
    sizes = np.array([pools[c].size for c in classes], dtype=np.float64)

    def allocate(total: int, available: np.ndarray) -> np.ndarray:
        share = total * sizes / n
        if available.sum() < total:
            raise ValueError("not enough samples for a stratified split")
        take = np.minimum(np.floor(share).astype(np.int64), available)
        order = np.lexsort((classes, -(share - np.floor(share))))
        i = 0
        while take.sum() < total:
            c = order[i % len(order)]
            if take[c] < available[c]:
                take[c] += 1
            i += 1
        return take

    avail = sizes.astype(np.int64)
    val_take = allocate(n_val, avail - 1)  # keep one per class for train
    test_take = allocate(n_test, avail - val_take - 1)
    train, val, test = [], [], []
    for k, c in enumerate(classes):
        pool = pools[c]
        val.append(pool[:val_take[k]])
        test.append(pool[val_take[k]:val_take[k] + test_take[k]])
        train.append(pool[val_take[k] + test_take[k]:])
    return tuple(np.sort(np.concatenate(part)) for part in (train, val, test))


def split_train_val_test(ds: EmbeddingDataset, spec: SplitSpec, rng: RngStream | None = None):
    if rng is None:
        rng = RngStream(spec.seed)
    return tuple(ds.subset(idx) for idx in split_indices(ds.y, spec, rng))


def label_distribution(y: np.ndarray, K: int) -> np.ndarray:
    counts = np.bincount(np.asarray(y, dtype=np.int64), minlength=K).astype(np.float64)
    return counts / counts.sum()


def heterogeneity(ds: EmbeddingDataset, plan: PartitionPlan) -> float:
    """Mean total-variation distance between client label mixes and the global mix."""
    glob = label_distribution(ds.y, ds.K)
    tv = [0.5 * np.abs(label_distribution(ds.y[idx], ds.K) - glob).sum() for idx in plan.client_indices()]
    return float(np.mean(tv))
