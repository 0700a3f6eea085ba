"""Experiment stages over a run directory.

Each stage reads the artifacts of the stages before it from disk and writes
its own, so running the stages one by one gives the same bytes as
:func:`run_experiment`, which simply calls them in order.

Run directory layout::

    config.json                 resolved config (sorted keys)
    data/dataset.femb           the embedding dataset all seeds share
    seed_<s>/partition.json     per-client train/val/test row indices
    seed_<s>/rounds.jsonl       one record per client per round
    seed_<s>/global.fckp        shared weights after the final round
    seed_<s>/privacy.json       per-client noise multiplier and epsilon spent
    seed_<s>/synth/client_<m>.femb
    seed_<s>/classifiers.fckp   per-client local and global classifiers
    seed_<s>/predictions.json   per-client test predictions
    metrics.json, manifest.json
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import __version__
from .config import GENERATIVE, ConfigError, canonical_json, config_hash, method_label, round_config, split_spec, train_spec
from .data import (
    EmbeddingDataset,
    heterogeneity,
    load_dataset,
    min_split_size,
    partition_dirichlet,
    partition_iid,
    save_femb,
    split_indices,
    synth_blobs,
)
from .downstream import InterpolatedClassifier, predict, select_lambda, train_linear
from .evaluation import accuracy, aggregate_report, balanced_accuracy, param_count, sliced_wasserstein, wasserstein_avg
from .federation import (
    CKPT_VERSION,
    SharedWeights,
    init_global_model,
    linear_from_payload,
    load_checkpoint,
    make_client,
    run_federated_training,
    save_checkpoint,
    shared_stack,
)
from .models import ClassDistribution, LinearParams, classifier_predict_proba, generate_embeddings
from .numerics import SERVER_ID, Purpose, RngStream
from .privacy import check_delta

log = logging.getLogger(__name__)

STAGES = ("gen-data", "partition", "train-gen", "synthesize", "train-downstream", "evaluate")
FORMAT_VERSIONS = {"femb": 1, "checkpoint": CKPT_VERSION, "partition": 1, "predictions": 1, "metrics": 1}


class MissingArtifact(FileNotFoundError):
    """A stage input that an earlier stage should have written is absent."""


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# small file helpers


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj), encoding="utf-8")


def read_json(path: Path, what: str | None = None):
    if not path.is_file():
        raise MissingArtifact(f"missing {what or path.name}: expected {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def seed_dir(run_dir: Path, seed: int) -> Path:
    return Path(run_dir) / f"seed_{seed}"


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise MissingArtifact(f"missing {what}: expected {path}")
    return path


# ---------------------------------------------------------------------------
# config pinning


def pin_config(cfg: dict, run_dir: Path) -> None:
    """Write the resolved config into the run directory, or check it matches the one there."""
    path = Path(run_dir) / "config.json"
    body = {k: v for k, v in cfg.items() if k not in ("output_dir", "workers")}
    if path.is_file():
        old = json.loads(path.read_text(encoding="utf-8"))
        if canonical_json(old) != canonical_json(_clean(body)):
            raise ConfigError("output_dir", f"{path} holds a different config; use a fresh output directory")
        return
    write_json(path, body)


# ---------------------------------------------------------------------------
# stage: data


def make_dataset(cfg: dict) -> EmbeddingDataset:
    data = cfg["data"]
    if data["source"] == "blobs":
        b = data["blobs"]
        rng = RngStream(b["seed"], SERVER_ID, 0, Purpose.DATA)
        return synth_blobs(b["K"], b["d"], b["n_per_class"], float(b["separation"]), rng)
    return load_dataset(data["path"], data["source"], data["K"], data["extractor_id"])


def stage_gen_data(cfg: dict, run_dir: Path) -> Path:
    run_dir = Path(run_dir)
    pin_config(cfg, run_dir)
    ds = make_dataset(cfg)
    out = run_dir / "data" / "dataset.femb"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_femb(ds, out)
    return out


def load_run_dataset(run_dir: Path) -> EmbeddingDataset:
    return load_dataset(_require(Path(run_dir) / "data" / "dataset.femb", "dataset (run gen-data first)"), "femb")


# ---------------------------------------------------------------------------
# stage: partition


def stage_partition(cfg: dict, run_dir: Path) -> list[Path]:
    run_dir = Path(run_dir)
    pin_config(cfg, run_dir)
    ds = load_run_dataset(run_dir)
    M = cfg["partition"]["clients"]
    # every client needs non-empty train, val and test splits
    min_size = min_split_size(split_spec(cfg, 0))
    if M * min_size > ds.n:
        raise StageError(f"partition.clients={M} needs at least {M * min_size} samples, got {ds.n}")
    written = []
    for seed in cfg["seeds"]:
        rng = RngStream(seed, SERVER_ID, 0, Purpose.PARTITION)
        if cfg["partition"]["scheme"] == "iid":
            plan = partition_iid(ds, M, rng)
        else:
            plan = partition_dirichlet(ds, M, cfg["partition"]["alpha"], rng, min_size=min_size)
        spec = split_spec(cfg, seed)
        clients = []
        for m, idx in enumerate(plan.client_indices()):
            tr, va, te = split_indices(ds.y[idx], spec, RngStream(seed, m, 0, Purpose.SPLIT))
            clients.append({"client_id": m, "train": idx[tr], "val": idx[va], "test": idx[te]})
        n_min = min(len(c["train"]) for c in clients)
        if cfg["method"] in GENERATIVE and cfg["dp"]["enabled"]:
            check_delta(cfg["dp"]["delta"], n_min)
        out = seed_dir(run_dir, seed) / "partition.json"
        write_json(out, {"version": 1, "seed": seed, "M": M, "K": ds.K, "n": ds.n,
                         "heterogeneity": heterogeneity(ds, plan), "clients": clients})
        written.append(out)
    return written


def load_splits(run_dir: Path, seed: int, ds: EmbeddingDataset | None = None):
    """``[(train, val, test), ...]`` per client for one seed."""
    ds = ds if ds is not None else load_run_dataset(run_dir)
    part = read_json(seed_dir(run_dir, seed) / "partition.json", f"partition for seed {seed} (run partition first)")
    out = []
    for c in part["clients"]:
        out.append(tuple(ds.subset(np.asarray(c[k], dtype=np.int64)) for k in ("train", "val", "test")))
    return out


# ---------------------------------------------------------------------------
# stage: federated training


def build_clients(cfg: dict, splits, seed: int):
    rc = round_config(cfg)
    return [make_client(m, tr, va, te, rc, seed) for m, (tr, va, te) in enumerate(splits)], rc


def train_seed(cfg: dict, run_dir: Path, seed: int, workers: int = 1) -> None:
    sd = seed_dir(run_dir, seed)
    splits = load_splits(run_dir, seed)
    clients, rc = build_clients(cfg, splits, seed)
    server, logs = run_federated_training(clients, rc, seed, workers=workers)
    lines = "".join(json.dumps(_clean(r.as_dict()), sort_keys=True) + "\n" for r in logs)
    (sd / "rounds.jsonl").write_text(lines, encoding="utf-8")
    save_checkpoint(sd / "global.fckp", dict(server.shared.tensors), server.round, config_hash(cfg))
    privacy = []
    for c in clients:
        rec = {"client_id": c.client_id, "n_train": c.n_train, "private": c.dp is not None}
        if c.dp is not None:
            rec.update(noise_multiplier=c.dp.noise_multiplier, sample_rate=c.dp.sample_rate,
                       planned_steps=c.dp.planned_steps, steps=c.accountant.steps,
                       epsilon=c.accountant.epsilon(), delta=c.dp.delta, clip_norm=c.dp.clip_norm)
        privacy.append(rec)
    write_json(sd / "privacy.json", {"seed": seed, "clients": privacy})


def stage_train_gen(cfg: dict, run_dir: Path, workers: int = 1) -> None:
    """Federated training: the generative model for cvae/cgan, the classifier for the baselines."""
    run_dir = Path(run_dir)
    pin_config(cfg, run_dir)
    for seed in cfg["seeds"]:
        train_seed(cfg, run_dir, seed, workers)


def load_global(cfg: dict, run_dir: Path, seed: int) -> SharedWeights:
    path = _require(seed_dir(run_dir, seed) / "global.fckp", f"checkpoint for seed {seed} (run train-gen first)")
    tensors, _, h = load_checkpoint(path)
    if h != config_hash(cfg):
        raise StageError(f"{path} was written under a different config")
    kind = cfg["method"] if cfg["method"] in GENERATIVE else "linear"
    return SharedWeights(kind, tensors)


# ---------------------------------------------------------------------------
# stage: synthesis


def class_distribution(cfg: dict, train: EmbeddingDataset) -> ClassDistribution:
    spec = cfg["synthesis"]["class_distribution"]
    if spec == "uniform":
        return ClassDistribution.uniform(train.K)
    if spec == "local_empirical":
        return ClassDistribution.local_empirical(train.y, train.K)
    probs = np.asarray(spec, dtype=np.float64)
    if probs.size != train.K:
        raise StageError(f"synthesis.class_distribution has {probs.size} entries for K={train.K}")
    return ClassDistribution(probs, "explicit")


def synth_path(run_dir: Path, seed: int, client_id: int) -> Path:
    return seed_dir(run_dir, seed) / "synth" / f"client_{client_id}.femb"


def stage_synthesize(cfg: dict, run_dir: Path) -> None:
    """Each client decodes its own synthetic set from the global decoder (or generator)."""
    run_dir = Path(run_dir)
    pin_config(cfg, run_dir)
    if cfg["method"] not in GENERATIVE:
        return  # the classifier baselines share no data
    ds = load_run_dataset(run_dir)
    for seed in cfg["seeds"]:
        splits = load_splits(run_dir, seed, ds)
        shared = load_global(cfg, run_dir, seed)
        template = init_global_model(cfg["method"], ds.d, ds.K, seed, round_config(cfg).dims)
        stack = shared_stack(shared, template)
        total = sum(tr.n for tr, _, _ in splits)
        N = cfg["synthesis"]["N"] or total
        for m, (tr, _, _) in enumerate(splits):
            synth = generate_embeddings(stack, N, class_distribution(cfg, tr),
                                        RngStream(seed, m, 0, Purpose.GENERATE), extractor_id="synthetic")
            out = synth_path(run_dir, seed, m)
            out.parent.mkdir(parents=True, exist_ok=True)
            save_femb(synth, out)


# ---------------------------------------------------------------------------
# stage: downstream classifiers


def _classifier_tensors(prefix: str, p: LinearParams) -> dict:
    return {f"{prefix}.W": p.W, f"{prefix}.b": p.b}


def stage_train_downstream(cfg: dict, run_dir: Path) -> None:
    """Per client: a local classifier, a global one, lambda on validation, test predictions.

    Global classifier: trained on the client's synthetic set for cvae/cgan,
    the federated classifier for the baselines. fedavg and fedprox predict
    with the global classifier alone.
    """
    run_dir = Path(run_dir)
    pin_config(cfg, run_dir)
    method = cfg["method"]
    ds = load_run_dataset(run_dir)
    for seed in cfg["seeds"]:
        sd = seed_dir(run_dir, seed)
        splits = load_splits(run_dir, seed, ds)
        spec = train_spec(cfg, seed)
        fed_global = None if method in GENERATIVE else linear_from_payload(load_global(cfg, run_dir, seed))
        tensors, records = {}, []
        for m, (tr, va, te) in enumerate(splits):
            local = train_linear(tr, spec, RngStream(seed, m, 0, Purpose.DOWNSTREAM))
            if method in GENERATIVE:
                synth = load_dataset(_require(synth_path(run_dir, seed, m), "synthetic set (run synthesize first)"),
                                     "femb")
                if cfg["downstream"]["mix_real"]:
                    synth = EmbeddingDataset(np.vstack([synth.X, tr.X]), np.concatenate([synth.y, tr.y]), synth.K,
                                             synth.extractor_id, "synthetic+real")
                glob = train_linear(synth, spec, RngStream(seed, m, 1, Purpose.DOWNSTREAM))
            else:
                glob = fed_global
            if method in ("fedavg", "fedprox"):
                lam, val_score = 0.0, None
            else:
                lam, val_score = select_lambda(local, glob, va)
            clf = InterpolatedClassifier(local, glob, lam)
            tensors.update(_classifier_tensors(f"client{m}.local", local))
            tensors.update(_classifier_tensors(f"client{m}.global", glob))
            records.append({
                "client_id": m, "lambda": lam, "val_bacc": val_score,
                "truth": te.y, "pred": predict(clf, te.X),
                "pred_local": np.argmax(classifier_predict_proba(local, te.X), axis=-1),
                "pred_global": np.argmax(classifier_predict_proba(glob, te.X), axis=-1),
            })
        save_checkpoint(sd / "classifiers.fckp", tensors, 0, config_hash(cfg))
        write_json(sd / "predictions.json", {"version": 1, "seed": seed, "K": ds.K, "method": method,
                                             "clients": records})


# ---------------------------------------------------------------------------
# stage: evaluation


def score_predictions(preds: dict) -> dict:
    """ACC and BACC per client from a predictions document."""
    K = preds.get("K")
    clients = preds["clients"] if "clients" in preds else [dict(preds, client_id=0)]
    out = []
    for c in clients:
        rec = {"client_id": c.get("client_id", 0),
               "acc": accuracy(c["pred"], c["truth"]),
               "bacc": balanced_accuracy(c["pred"], c["truth"], K)}
        for extra in ("local", "global"):
            if f"pred_{extra}" in c:
                rec[f"bacc_{extra}"] = balanced_accuracy(c[f"pred_{extra}"], c["truth"], K)
        if "lambda" in c:
            rec["lambda"] = c["lambda"]
        out.append(rec)
    return {"clients": out}


def _summaries(per_seed: dict, keys) -> dict:
    out = {}
    for key in keys:
        vals = {s: [c[key] for c in cl] for s, cl in per_seed.items() if cl and all(key in c for c in cl)}
        if vals:
            out[key] = aggregate_report(vals).as_dict()
    return out


def stage_evaluate(cfg: dict, run_dir: Path) -> dict:
    run_dir = Path(run_dir)
    pin_config(cfg, run_dir)
    ds = load_run_dataset(run_dir)
    method = cfg["method"]
    per_seed = {}
    for seed in cfg["seeds"]:
        preds = read_json(seed_dir(run_dir, seed) / "predictions.json",
                          f"predictions for seed {seed} (run train-downstream first)")
        scored = score_predictions(preds)["clients"]
        if method in GENERATIVE:
            splits = load_splits(run_dir, seed, ds)
            for rec, (tr, _, _) in zip(scored, splits):
                synth = load_dataset(_require(synth_path(run_dir, seed, rec["client_id"]), "synthetic set"), "femb")
                rec["wasserstein"] = wasserstein_avg(tr, synth)
                if cfg["eval"]["sliced_projections"] > 0:
                    rec["sliced_wasserstein"] = sliced_wasserstein(
                        tr, synth, cfg["eval"]["sliced_projections"],
                        RngStream(seed, rec["client_id"], 0, Purpose.EVAL))
        per_seed[seed] = scored
    model = init_global_model(method if method in GENERATIVE else "linear", ds.d, ds.K, 0, round_config(cfg).dims)
    metrics = {
        "version": 1,
        "method": method_label(cfg),
        "dataset": {"id": sha256_file(run_dir / "data" / "dataset.femb"), "extractor_id": ds.extractor_id,
                    "n": ds.n, "d": ds.d, "K": ds.K},
        "clients": cfg["partition"]["clients"],
        "param_count": param_count(model),
        "seeds": list(cfg["seeds"]),
        "per_seed": {str(s): v for s, v in per_seed.items()},
        "summary": _summaries(per_seed, ("acc", "bacc", "bacc_local", "bacc_global", "wasserstein",
                                         "sliced_wasserstein")),
    }
    write_json(run_dir / "metrics.json", metrics)
    write_manifest(cfg, run_dir)
    return metrics


def write_manifest(cfg: dict, run_dir: Path) -> dict:
    run_dir = Path(run_dir)
    artifacts = {}
    for path in sorted(p for p in run_dir.rglob("*") if p.is_file()):
        rel = path.relative_to(run_dir).as_posix()
        if rel in ("manifest.json", "FAILED"):
            continue
        artifacts[rel] = sha256_file(path)
    manifest = {"config_hash": config_hash(cfg), "config_version": cfg["config_version"], "method": cfg["method"],
                "seeds": list(cfg["seeds"]), "formats": FORMAT_VERSIONS, "package_version": __version__,
                "artifacts": artifacts}
    write_json(run_dir / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# the whole pipeline


def run_stage(name: str, cfg: dict, run_dir: Path, workers: int = 1):
    if name == "gen-data":
        return stage_gen_data(cfg, run_dir)
    if name == "partition":
        return stage_partition(cfg, run_dir)
    if name == "train-gen":
        return stage_train_gen(cfg, run_dir, workers)
    if name == "synthesize":
        return stage_synthesize(cfg, run_dir)
    if name == "train-downstream":
        return stage_train_downstream(cfg, run_dir)
    if name == "evaluate":
        return stage_evaluate(cfg, run_dir)
    raise ValueError(f"unknown stage {name!r}")


def run_experiment(cfg: dict, run_dir: Path, workers: int = 1) -> dict:
    """All stages in order. On failure a FAILED marker names the stage; artifacts so far stay."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    failed = run_dir / "FAILED"
    if failed.exists():
        failed.unlink()
    stage = None
    try:
        for stage in STAGES:
            log.info("stage %s", stage)
            result = run_stage(stage, cfg, run_dir, workers)
    except BaseException as exc:
        write_json(failed, {"stage": stage, "error": type(exc).__name__, "message": str(exc)})
        raise
    return result
