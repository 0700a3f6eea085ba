"""Round-based federation: local (DP-)SGD on clients, weighted averaging on the server.

Only the shared part of a model ever leaves a client: the CVAE decoder, the
CGAN generator, or the whole linear classifier for the classifier baselines.
Every random draw is keyed on ``(seed, client, round, purpose)`` so results
do not depend on the order or parallelism in which clients run.
"""
from __future__ import annotations

import hashlib
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .data import EmbeddingDataset, FormatError
from .models import (
    CganParams,
    CvaeParams,
    LinearParams,
    cgan_generate,
    cross_entropy_grads,
    cvae_loss_and_grads,
    disc_bce_grads,
    generator_grads,
)
from .numerics import LayerFactors, MlpStack, OptimizerState, Purpose, RngStream, SERVER_ID, ShapeError
from .privacy import (
    DEFAULT_ORDERS,
    DpConfig,
    PrivacyAccountant,
    PrivacyBudgetExceeded,
    calibrate_noise,
    private_gradient_factored,
)

log = logging.getLogger(__name__)

MODEL_KINDS = ("cvae", "cgan", "linear")
SHARED_PREFIX = {"cvae": "decoder", "cgan": "generator", "linear": "classifier"}
PRIVATE_PREFIXES = ("encoder", "discriminator")


@dataclass
class DpSpec:
    """What the user asks for; turned into a per-client :class:`DpConfig` by calibration."""

    epsilon: float = 1.0
    delta: float = 1e-4
    clip_norm: float = 1.5
    noise_multiplier: float | None = None  # None: calibrate to epsilon


@dataclass
class ModelDims:
    latent: int = 32
    h1: int = 128
    h2: int = 64
    z_dim: int = 100
    g_hidden: tuple = (256, 512)
    f_hidden: tuple = (512, 256)


@dataclass
class RoundConfig:
    rounds: int = 50
    local_epochs: int = 5
    batch_size: int = 16
    learning_rate: float = 1e-3
    dp: DpSpec | None = None
    model_kind: str = "cvae"
    beta: float = 1.0
    prox_mu: float = 0.0
    dims: ModelDims = field(default_factory=ModelDims)
    budget_policy: str = "fail"  # or "warn"

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1:
            raise ValueError("rounds and local_epochs must be at least 1")
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.budget_policy not in ("fail", "warn"):
            raise ValueError("budget_policy must be 'fail' or 'warn'")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be non-negative")


# ---------------------------------------------------------------------------
# wire message


@dataclass(frozen=True)
class SharedWeights:
    """The only thing a client sends or receives: named tensors of the shared model part."""

    kind: str
    tensors: Mapping[str, np.ndarray]

    def __post_init__(self):
        for name in self.tensors:
            if name.split(".")[0] in PRIVATE_PREFIXES:
                raise ValueError(f"private tensor {name!r} may not be transmitted")
            if not name.startswith(SHARED_PREFIX[self.kind] + "."):
                raise ValueError(f"tensor {name!r} is not part of the shared {self.kind} model")

    def arrays(self) -> list[np.ndarray]:
        return [self.tensors[k] for k in self.tensors]

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def stack_to_tensors(prefix: str, stack: MlpStack) -> dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(stack.layers):
        out[f"{prefix}.{i}.W"] = layer.W.copy()
        out[f"{prefix}.{i}.b"] = layer.b.copy()
    return out


def shared_payload(kind: str, model) -> SharedWeights:
    if kind == "linear":
        return SharedWeights(kind, {"classifier.W": model.W.copy(), "classifier.b": model.b.copy()})
    return SharedWeights(kind, stack_to_tensors(SHARED_PREFIX[kind], model.shared))


def load_shared(model, payload: SharedWeights) -> None:
    if payload.kind == "linear":
        model.set_params(payload.arrays())
    else:
        model.shared.set_params(payload.arrays())


# ---------------------------------------------------------------------------
# state


@dataclass
class ClientState:
    client_id: int
    train: EmbeddingDataset
    val: EmbeddingDataset | None
    test: EmbeddingDataset | None
    model: object  # CvaeParams | CganParams | LinearParams
    seed: int = 0
    accountant: PrivacyAccountant | None = None
    dp: DpConfig | None = None
    prox_anchor: LinearParams | None = None
    epoch_losses: list = field(default_factory=list)

    @property
    def n_train(self) -> int:
        return self.train.n


@dataclass
class ServerState:
    shared: SharedWeights
    round: int = 0
    weights: np.ndarray | None = None


def aggregation_weights(n_train) -> np.ndarray:
    n = np.asarray(n_train, dtype=np.float64)
    if n.size == 0 or (n < 1).any():
        raise ValueError("every client needs at least one training sample")
    return n / n.sum()


def aggregate_shared(payloads: list[SharedWeights], n_train) -> SharedWeights:
    """``theta = sum_m w_m theta_m`` with ``w_m = n_m / sum n``; summed in list order."""
    if not payloads:
        raise ValueError("nothing to aggregate")
    w = aggregation_weights(n_train)
    if len(w) != len(payloads):
        raise ValueError("one training-set size per payload is required")
    first = payloads[0]
    for p in payloads[1:]:
        if p.kind != first.kind or list(p.tensors) != list(first.tensors):
            raise ShapeError("payloads carry different tensors")
        for k in first.tensors:
            if p.tensors[k].shape != first.tensors[k].shape:
                raise ShapeError(f"tensor {k} has shape {p.tensors[k].shape}, expected {first.tensors[k].shape}")
    if len(payloads) == 1:
        return SharedWeights(first.kind, {k: v.copy() for k, v in first.tensors.items()})
    out = {}
    for k in first.tensors:
        acc = w[0] * payloads[0].tensors[k]
        for wm, p in zip(w[1:], payloads[1:]):
            acc = acc + wm * p.tensors[k]
        out[k] = acc
    return SharedWeights(first.kind, out)


# ---------------------------------------------------------------------------
# client setup


def init_global_model(kind: str, d: int, K: int, seed: int, dims: ModelDims | None = None):
    """Model whose shared part every client starts from (server streams)."""
    dims = dims or ModelDims()
    return _init_model(kind, d, K, seed, SERVER_ID, dims)


def _init_model(kind, d, K, seed, client_id, dims):
    server = RngStream(seed, SERVER_ID, 0, Purpose.INIT)
    own = RngStream(seed, client_id, 0, Purpose.INIT)
    if kind == "cvae":
        return CvaeParams.init(d, K, own, server, dims.latent, dims.h1, dims.h2)
    if kind == "cgan":
        return CganParams.init(d, K, server, own, dims.z_dim, dims.g_hidden, dims.f_hidden)
    if kind == "linear":
        return LinearParams.zeros(K, d)
    raise ValueError(f"unknown model kind {kind!r}")


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def sample_rate(n: int, batch_size: int) -> float:
    return min(1.0, batch_size / n)


def resolve_dp(spec: DpSpec, n_train: int, cfg: RoundConfig) -> DpConfig:
    q = sample_rate(n_train, cfg.batch_size)
    steps = cfg.rounds * cfg.local_epochs * steps_per_epoch(n_train, cfg.batch_size)
    sigma = spec.noise_multiplier
    if sigma is None:
        sigma = calibrate_noise(spec.epsilon, spec.delta, q, steps)
    return DpConfig(spec.epsilon, spec.delta, spec.clip_norm, sigma, q, steps)


def make_client(client_id: int, train: EmbeddingDataset, val, test, cfg: RoundConfig, seed: int,
                d: int | None = None) -> ClientState:
    d = train.d if d is None else d
    model = _init_model(cfg.model_kind, d, train.K, seed, client_id, cfg.dims)
    client = ClientState(client_id, train, val, test, model, seed)
    if cfg.dp is not None:
        client.dp = resolve_dp(cfg.dp, train.n, cfg)
        client.accountant = PrivacyAccountant(client.dp.sample_rate, client.dp.noise_multiplier,
                                              client.dp.delta, DEFAULT_ORDERS)
    return client


# ---------------------------------------------------------------------------
# local training


def _poisson_batches(n: int, q: float, count: int, rng: RngStream):
    for _ in range(count):
        yield np.flatnonzero(rng.uniform(n) < q)


def _check_budget(client: ClientState, cfg: RoundConfig) -> None:
    acc = client.accountant
    eps = acc.epsilon()
    if eps > client.dp.epsilon_target + 1e-9:
        msg = (f"client {client.client_id}: privacy budget exceeded "
               f"(epsilon={eps:.4f} > {client.dp.epsilon_target} after {acc.steps} steps)")
        if cfg.budget_policy == "fail":
            raise PrivacyBudgetExceeded(msg, acc.spent())
        log.warning(msg)


def _step_cvae(client, idx, cfg, opt, streams):
    p: CvaeParams = client.model
    x, y = client.train.X[idx], client.train.y[idx]
    dp = client.dp
    mode = "factored" if dp is not None else False
    loss, _, grads = cvae_loss_and_grads(p, x, y, streams["latent"], beta=cfg.beta, per_sample=mode)
    if dp is not None:
        grads = private_gradient_factored(grads, dp.clip_norm, dp.noise_multiplier, streams["noise"],
                                          normalizer=dp.sample_rate * client.n_train)
    p.set_params(opt.apply(p.params(), grads))
    return loss


def _step_cgan(client, idx, cfg, opt, streams):
    p: CganParams = client.model
    dp = client.dp
    K = p.K
    x, y = client.train.X[idx], client.train.y[idx]
    # a fixed number of fakes per step, so the count carries no information about the data
    n_fake = max(1, int(round(sample_rate(client.n_train, cfg.batch_size) * client.n_train)))
    fake_y = streams["gan"].categorical(np.full(K, 1.0 / K), n_fake)
    fake_x = cgan_generate(p, fake_y, streams["gan"])
    mode = "factored" if dp is not None else False
    l_real, g_real = disc_bce_grads(p.discriminator, x, y, 1.0, K, per_sample=mode)
    l_fake, g_fake = disc_bce_grads(p.discriminator, fake_x, fake_y, 0.0, K, per_sample=mode)
    if dp is not None:
        joined = [LayerFactors.concat(pair) for pair in zip(g_real, g_fake)]
        d_grads = private_gradient_factored(joined, dp.clip_norm, dp.noise_multiplier, streams["noise"],
                                            normalizer=2.0 * n_fake)
    else:
        d_grads = [(a + b) / (len(y) + n_fake) for a, b in zip(g_real, g_fake)]
    p.discriminator.set_params(opt["disc"].apply(p.discriminator.params(), d_grads))
    # generator update only reads the (already private) discriminator
    gen_y = streams["gan"].categorical(np.full(K, 1.0 / K), n_fake)
    _, g_grads = generator_grads(p, gen_y, streams["gan"])
    p.generator.set_params(opt["gen"].apply(p.generator.params(), g_grads))
    return float((l_real.sum() + l_fake.sum()) / (len(y) + n_fake))


def _step_linear(client, idx, cfg, opt, streams):
    p: LinearParams = client.model
    x, y = client.train.X[idx], client.train.y[idx]
    dp = client.dp
    loss, _, grads = cross_entropy_grads(p, x, y, per_sample="factored" if dp is not None else False)
    if dp is not None:
        grads = private_gradient_factored(grads, dp.clip_norm, dp.noise_multiplier, streams["noise"],
                                          normalizer=dp.sample_rate * client.n_train)
    new = opt.apply(p.params(), grads)
    if cfg.prox_mu > 0 and client.prox_anchor is not None:
        # implicit (proximal) step on (mu/2)|w - w_global|^2: stable for any lr * mu
        a = cfg.learning_rate * cfg.prox_mu
        new = [(w + a * g) / (1.0 + a) for w, g in zip(new, client.prox_anchor.params())]
    p.set_params(new)
    return loss


_STEPS = {"cvae": _step_cvae, "cgan": _step_cgan, "linear": _step_linear}


def local_train(client: ClientState, global_weights: SharedWeights, cfg: RoundConfig, round_: int = 0,
                epochs: int | None = None):
    """Overwrite the shared part with the global copy, run local epochs, return the shared part.

    Returns ``(payload, accountant, mean_loss)``. Batches are Poisson samples
    with rate ``batch_size / n``; ``ceil(n / batch_size)`` draws make an
    epoch. Empty draws are skipped and not charged to the accountant.
    """
    kind = cfg.model_kind
    if global_weights.kind != kind:
        raise ValueError(f"received {global_weights.kind} weights for a {kind} client")
    load_shared(client.model, global_weights)
    if kind == "linear" and cfg.prox_mu > 0:
        client.prox_anchor = client.model.copy()
    epochs = cfg.local_epochs if epochs is None else epochs
    cid, seed = client.client_id, client.seed
    streams = {
        "batch": RngStream(seed, cid, round_, Purpose.BATCH),
        "noise": RngStream(seed, cid, round_, Purpose.NOISE),
        "latent": RngStream(seed, cid, round_, Purpose.LATENT),
        "gan": RngStream(seed, cid, round_, Purpose.GAN_LATENT),
    }
    # plain SGD keeps no state across steps, so a fresh optimizer per round is exact
    if kind == "cgan":
        opt = {"disc": OptimizerState("sgd", cfg.learning_rate), "gen": OptimizerState("sgd", cfg.learning_rate)}
    else:
        opt = OptimizerState("sgd", cfg.learning_rate)
    n = client.n_train
    q = sample_rate(n, cfg.batch_size)
    step = _STEPS[kind]
    losses = []
    client.epoch_losses = []
    for _ in range(epochs):
        epoch = []
        for idx in _poisson_batches(n, q, steps_per_epoch(n, cfg.batch_size), streams["batch"]):
            if idx.size == 0:
                continue
            epoch.append(step(client, idx, cfg, opt, streams))
            if client.dp is not None:
                client.accountant.step()
                _check_budget(client, cfg)
        losses.extend(epoch)
        client.epoch_losses.append(float(np.mean(epoch)) if epoch else float("nan"))
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return shared_payload(kind, client.model), client.accountant, mean_loss


# ---------------------------------------------------------------------------
# the federation loop


@dataclass
class RoundLog:
    round: int
    client_id: int
    loss: float
    epsilon: float | None

    def as_dict(self) -> dict:
        return {"round": self.round, "client_id": self.client_id, "loss": self.loss, "epsilon": self.epsilon}


def run_federated_training(clients: list[ClientState], cfg: RoundConfig, seed: int = 0, workers: int = 1,
                           on_round: Callable | None = None):
    """Broadcast, train every client, aggregate; ``cfg.rounds`` times.

    Returns ``(server, logs)``. ``on_round(round, server)`` is called after
    each aggregation (used to track fidelity over rounds).
    """
    if not clients:
        raise ValueError("need at least one client")
    clients = sorted(clients, key=lambda c: c.client_id)
    d, K = clients[0].train.d, clients[0].train.K
    server = ServerState(shared_payload(cfg.model_kind, init_global_model(cfg.model_kind, d, K, seed, cfg.dims)))
    server.weights = aggregation_weights([c.n_train for c in clients])
    logs: list[RoundLog] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(cfg.rounds):
            def work(c, t=t):
                return local_train(c, server.shared, cfg, round_=t)

            results = list(pool.map(work, clients)) if pool else [work(c) for c in clients]
            server.shared = aggregate_shared([r[0] for r in results], [c.n_train for c in clients])
            server.round = t + 1
            for c, (_, acc, loss) in zip(clients, results):
                logs.append(RoundLog(t + 1, c.client_id, loss, acc.epsilon() if acc is not None else None))
            if on_round is not None:
                on_round(t + 1, server)
    finally:
        if pool:
            pool.shutdown()
    return server, logs


def shared_stack(shared: SharedWeights, template_model) -> MlpStack:
    """Shared weights (decoder or generator) as a standalone stack shaped like the template's."""
    stack = template_model.shared.copy()
    stack.set_params(shared.arrays())
    return stack


def global_stack(server: ServerState, template_model) -> MlpStack:
    """The aggregated shared stack after the server's latest round."""
    return shared_stack(server.shared, template_model)


# ---------------------------------------------------------------------------
# classifier baselines

BASELINES = ("fedavg", "fedprox", "fedlambda")


def baseline_update(kind: str, client: ClientState, global_weights: SharedWeights, cfg: RoundConfig,
                    round_: int = 0) -> SharedWeights:
    """One round of a federated linear-classifier baseline on ``client``.

    fedavg and fedlambda run plain local SGD on cross-entropy (fedlambda's
    local classifier and interpolation live in the downstream module);
    fedprox adds the proximal pull toward the received weights.
    """
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}")
    if cfg.model_kind != "linear":
        raise ValueError("baselines train linear classifiers")
    mu = cfg.prox_mu if kind == "fedprox" else 0.0
    round_cfg = cfg if mu == cfg.prox_mu else replace(cfg, prox_mu=mu)
    payload, _, _ = local_train(client, global_weights, round_cfg, round_=round_)
    return payload


def linear_from_payload(payload: SharedWeights) -> LinearParams:
    return LinearParams(payload.tensors["classifier.W"], payload.tensors["classifier.b"])


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"FCKP"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], round_: int, config_hash: str) -> None:
    """Container: magic, u32 version, u32 round, u16-prefixed config hash, u32 count, then tensors.

    Each tensor is a u16-prefixed utf-8 name, u32 ndim, u32 dims and float32
    little-endian data.
    """
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, round_)]
    h = config_hash.encode("utf-8")
    chunks.append(struct.pack("<H", len(h)) + h)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        b = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(b)) + b)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Returns ``(tensors, round, config_hash)``; tensors come back as float64."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    try:
        version, round_ = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 4)
        off = 12
        (hl,) = struct.unpack_from("<H", buf, off)
        off += 2
        config_hash = buf[off:off + hl].decode("utf-8")
        off += hl
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nl].decode("utf-8")
            off += nl
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 4 * size > len(buf):
                raise FormatError(f"truncated tensor {name!r}", off)
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 4 * size
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}", len(buf)) from exc
    if off != len(buf):
        raise FormatError("trailing bytes in checkpoint", off)
    return tensors, round_, config_hash
