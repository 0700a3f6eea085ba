"""Experiment configuration: a versioned YAML tree with strict validation.

Unknown keys are errors. Every default below is the value the experiments
use unless a config file overrides it.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

import yaml

from .data import SplitSpec
from .downstream import TrainSpec
from .federation import DpSpec, ModelDims, RoundConfig

CONFIG_VERSION = 1
METHODS = ("cvae", "cgan", "fedavg", "fedprox", "fedlambda")
GENERATIVE = ("cvae", "cgan")

DEFAULTS = {
    "config_version": CONFIG_VERSION,
    "method": "cvae",
    "output_dir": "runs/experiment",
    "seeds": [0, 1, 2],
    "workers": 1,
    "data": {
        "source": "blobs",  # blobs | femb | csv
        "path": None,
        "K": None,
        "extractor_id": "unknown",
        "blobs": {"K": 3, "d": 16, "n_per_class": 600, "separation": 8.0, "seed": 0},
    },
    "partition": {"scheme": "dirichlet", "alpha": 0.3, "clients": 10},
    "split": {"ratios": [0.6, 0.2, 0.2], "stratified": True},
    "model": {"latent": 32, "h1": 128, "h2": 64, "z_dim": 100,
              "g_hidden": [256, 512], "f_hidden": [512, 256], "beta": 1.0},
    "dp": {"enabled": True, "epsilon": 1.0, "delta": 1e-4, "clip_norm": 1.5,
           "noise_multiplier": None, "budget_policy": "fail"},
    "federation": {"rounds": 50, "local_epochs": 5, "learning_rate": 1e-3, "batch_size": 16, "prox_mu": 0.01},
    "synthesis": {"N": None, "class_distribution": "uniform"},
    "downstream": {"optimizer": "adam", "learning_rate": 1e-3, "epochs": 100, "batch_size": 16,
                   "mix_real": False},
    "eval": {"sliced_projections": 0},
}

# keys whose value does not change any result; left out of the config hash
_RUNTIME_KEYS = ("output_dir", "workers")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(name, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(name, "expected a mapping")
            out[key] = _merge(base[key], val, name + ".")
        else:
            out[key] = val
    return out


def _num(cfg, path, lo=None, hi=None, integer=False, lo_open=False, allow_none=False):
    node = cfg
    for part in path.split("."):
        node = node[part]
    if node is None and allow_none:
        return
    ok = isinstance(node, int) if integer else isinstance(node, (int, float))
    if isinstance(node, bool) or not ok or (not integer and not math.isfinite(node)):
        raise ConfigError(path, f"expected {'an integer' if integer else 'a number'}, got {node!r}")
    if lo is not None and (node <= lo if lo_open else node < lo):
        raise ConfigError(path, f"must be {'>' if lo_open else '>='} {lo}, got {node!r}")
    if hi is not None and node > hi:
        raise ConfigError(path, f"must be <= {hi}, got {node!r}")


def _choice(cfg, path, options):
    node = cfg
    for part in path.split("."):
        node = node[part]
    if node not in options:
        raise ConfigError(path, f"must be one of {', '.join(map(str, options))}; got {node!r}")


def _flag(cfg, path):
    node = cfg
    for part in path.split("."):
        node = node[part]
    if not isinstance(node, bool):
        raise ConfigError(path, f"expected true or false, got {node!r}")


def validate(cfg: dict, base_dir: Path | None = None) -> dict:
    if cfg.get("config_version") != CONFIG_VERSION:
        raise ConfigError("config_version", f"must be {CONFIG_VERSION}")
    _choice(cfg, "method", METHODS)
    seeds = cfg["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds", "expected a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "duplicate seeds")
    _num(cfg, "workers", 1, integer=True)
    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        raise ConfigError("output_dir", "expected a path")

    data = cfg["data"]
    _choice(cfg, "data.source", ("blobs", "femb", "csv"))
    if data["source"] == "blobs":
        _num(cfg, "data.blobs.K", 2, integer=True)
        _num(cfg, "data.blobs.d", 2, integer=True)
        _num(cfg, "data.blobs.n_per_class", 1, integer=True)
        _num(cfg, "data.blobs.separation", 0)
        _num(cfg, "data.blobs.seed", 0, integer=True)
    else:
        if not data["path"]:
            raise ConfigError("data.path", f"required when data.source is {data['source']}")
        path = Path(data["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.is_file():
            raise ConfigError("data.path", f"no such file: {path}")
        data["path"] = str(path)
    _num(cfg, "data.K", 2, integer=True, allow_none=True)

    _choice(cfg, "partition.scheme", ("iid", "dirichlet"))
    _num(cfg, "partition.alpha", 0, lo_open=True)
    _num(cfg, "partition.clients", 1, integer=True)

    ratios = cfg["split"]["ratios"]
    if not (isinstance(ratios, list) and len(ratios) == 3 and all(isinstance(r, (int, float)) for r in ratios)):
        raise ConfigError("split.ratios", "expected three numbers (train, val, test)")
    try:
        SplitSpec(tuple(float(r) for r in ratios))
    except ValueError as exc:
        raise ConfigError("split.ratios", str(exc)) from None
    _flag(cfg, "split.stratified")

    for key in ("latent", "h1", "h2", "z_dim"):
        _num(cfg, f"model.{key}", 1, integer=True)
    for key in ("g_hidden", "f_hidden"):
        v = cfg["model"][key]
        if not (isinstance(v, list) and len(v) == 2 and all(isinstance(h, int) and h >= 1 for h in v)):
            raise ConfigError(f"model.{key}", "expected two positive integers")
    _num(cfg, "model.beta", 0)

    _flag(cfg, "dp.enabled")
    _num(cfg, "dp.epsilon", 0, lo_open=True)
    _num(cfg, "dp.delta", 0, 1)
    if cfg["dp"]["delta"] >= 1:
        raise ConfigError("dp.delta", "must be < 1")
    _num(cfg, "dp.clip_norm", 0, lo_open=True)
    _num(cfg, "dp.noise_multiplier", 0, allow_none=True)
    _choice(cfg, "dp.budget_policy", ("fail", "warn"))

    _num(cfg, "federation.rounds", 1, integer=True)
    _num(cfg, "federation.local_epochs", 1, integer=True)
    _num(cfg, "federation.learning_rate", 0, lo_open=True)
    _num(cfg, "federation.batch_size", 1, integer=True)
    _num(cfg, "federation.prox_mu", 0)

    _num(cfg, "synthesis.N", 1, integer=True, allow_none=True)
    dist = cfg["synthesis"]["class_distribution"]
    if isinstance(dist, list):
        if not dist or not all(isinstance(p, (int, float)) and p >= 0 for p in dist) or abs(sum(dist) - 1) > 1e-12:
            raise ConfigError("synthesis.class_distribution", "explicit probabilities must be non-negative and sum to 1")
    elif dist not in ("uniform", "local_empirical"):
        raise ConfigError("synthesis.class_distribution", "expected uniform, local_empirical or a list of probabilities")

    _choice(cfg, "downstream.optimizer", ("adam", "sgd"))
    _num(cfg, "downstream.learning_rate", 0, lo_open=True)
    _num(cfg, "downstream.epochs", 1, integer=True)
    _num(cfg, "downstream.batch_size", 1, integer=True)
    _flag(cfg, "downstream.mix_real")
    _num(cfg, "eval.sliced_projections", 0, integer=True)
    return cfg


def resolve(overrides: dict | None = None, base_dir: Path | None = None) -> dict:
    """Defaults merged with ``overrides`` and validated."""
    overrides = overrides or {}
    if not isinstance(overrides, dict):
        raise ConfigError("<root>", "expected a mapping at the top level")
    if "config_version" not in overrides:
        raise ConfigError("config_version", "missing (expected 1)")
    return validate(_merge(DEFAULTS, overrides), base_dir)


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("<config>", f"no such file: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError("<config>", f"not valid YAML: {exc}") from None
    return resolve(raw, path.parent)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in _RUNTIME_KEYS}
    return hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()


def method_label(cfg: dict) -> str:
    m = cfg["method"]
    if m in GENERATIVE and cfg["dp"]["enabled"]:
        return "dp-" + m
    return m


# ---------------------------------------------------------------------------
# views onto the library's own config objects


def model_dims(cfg: dict) -> ModelDims:
    m = cfg["model"]
    return ModelDims(m["latent"], m["h1"], m["h2"], m["z_dim"], tuple(m["g_hidden"]), tuple(m["f_hidden"]))


def dp_spec(cfg: dict) -> DpSpec | None:
    dp = cfg["dp"]
    if cfg["method"] not in GENERATIVE or not dp["enabled"]:
        return None  # the classifier baselines are never private
    return DpSpec(dp["epsilon"], dp["delta"], dp["clip_norm"], dp["noise_multiplier"])


def round_config(cfg: dict) -> RoundConfig:
    f = cfg["federation"]
    method = cfg["method"]
    return RoundConfig(
        rounds=f["rounds"], local_epochs=f["local_epochs"], batch_size=f["batch_size"],
        learning_rate=f["learning_rate"], dp=dp_spec(cfg),
        model_kind=method if method in GENERATIVE else "linear", beta=cfg["model"]["beta"],
        prox_mu=f["prox_mu"] if method == "fedprox" else 0.0, dims=model_dims(cfg),
        budget_policy=cfg["dp"]["budget_policy"],
    )


def split_spec(cfg: dict, seed: int) -> SplitSpec:
    return SplitSpec(tuple(float(r) for r in cfg["split"]["ratios"]), cfg["split"]["stratified"], seed)


def train_spec(cfg: dict, seed: int) -> TrainSpec:
    d = cfg["downstream"]
    return TrainSpec(d["optimizer"], d["learning_rate"], d["epochs"], d["batch_size"], seed)


def dump_yaml(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
