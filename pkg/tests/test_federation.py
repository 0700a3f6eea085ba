from dataclasses import replace

import numpy as np
import pytest

from fedcvae.data import SplitSpec, partition_dirichlet, partition_iid, split_train_val_test, synth_blobs
from fedcvae.evaluation import accuracy, wasserstein_avg
from fedcvae.federation import (
    DpSpec,
    ModelDims,
    RoundConfig,
    SharedWeights,
    aggregate_shared,
    aggregation_weights,
    baseline_update,
    init_global_model,
    linear_from_payload,
    load_checkpoint,
    local_train,
    make_client,
    run_federated_training,
    save_checkpoint,
    shared_payload,
    shared_stack,
)
from fedcvae.models import ClassDistribution, classifier_predict_proba, cvae_loss, generate_embeddings
from fedcvae.numerics import Purpose, RngStream, ShapeError
from fedcvae.privacy import PrivacyBudgetExceeded

SMALL = ModelDims(latent=4, h1=16, h2=8, z_dim=4, g_hidden=(8, 8), f_hidden=(8, 8))


def _payload(value, shape=(2, 3)):
    return SharedWeights("linear", {"classifier.W": np.full(shape, float(value)),
                                    "classifier.b": np.full(shape[0], float(value))})


def blob_clients(cfg, M=3, n_per_class=60, seed=0, iid=False, d=6):
    ds = synth_blobs(3, d, n_per_class, 8.0, RngStream(seed, purpose=Purpose.DATA))
    if iid:
        plan = partition_iid(ds, M, RngStream(seed, purpose=Purpose.PARTITION))
    else:
        plan = partition_dirichlet(ds, M, 0.3, RngStream(seed, purpose=Purpose.PARTITION))
    clients = []
    for m, idx in enumerate(plan.client_indices()):
        tr, va, te = split_train_val_test(ds.subset(idx), SplitSpec(), RngStream(seed, m, 0, Purpose.SPLIT))
        clients.append(make_client(m, tr, va, te, cfg, seed))
    return clients


# --- aggregation ----------------------------------------------------------------------

def test_aggregate_examples():
    assert np.all(aggregate_shared([_payload(0), _payload(2)], [5, 5]).tensors["classifier.W"] == 1.0)
    out = aggregate_shared([_payload(0), _payload(4)], [1, 3])
    assert np.all(out.tensors["classifier.W"] == 3.0)
    assert aggregation_weights([1, 3]).tolist() == [0.25, 0.75]
    one = aggregate_shared([_payload(7)], [9])
    assert np.all(one.tensors["classifier.b"] == 7.0)


def test_aggregate_weights_exact_and_normalized():
    w = aggregation_weights([3, 5, 11, 1])
    assert w.tolist() == [3 / 20, 5 / 20, 11 / 20, 1 / 20]
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        aggregation_weights([3, 0])


def test_aggregate_hand_built_tensors():
    a = SharedWeights("linear", {"classifier.W": np.array([[1.0, 2.0]]), "classifier.b": np.array([0.0])})
    b = SharedWeights("linear", {"classifier.W": np.array([[5.0, -2.0]]), "classifier.b": np.array([8.0])})
    out = aggregate_shared([a, b], [1, 3])
    assert out.tensors["classifier.W"].tolist() == [[4.0, -1.0]]
    assert out.tensors["classifier.b"].tolist() == [6.0]


def test_aggregate_shape_mismatch():
    with pytest.raises(ShapeError):
        aggregate_shared([_payload(0, (2, 3)), _payload(0, (2, 4))], [1, 1])


def test_encoder_never_on_the_wire():
    with pytest.raises(ValueError):
        SharedWeights("cvae", {"encoder.0.W": np.zeros(2)})
    with pytest.raises(ValueError):
        SharedWeights("cgan", {"discriminator.0.W": np.zeros(2)})
    cvae = init_global_model("cvae", 6, 3, 0, SMALL)
    names = list(shared_payload("cvae", cvae).tensors)
    assert names and all(n.startswith("decoder.") for n in names)
    cgan = init_global_model("cgan", 6, 3, 0, SMALL)
    assert all(n.startswith("generator.") for n in shared_payload("cgan", cgan).tensors)


# --- local training -------------------------------------------------------------------

def test_zero_epochs_returns_global():
    cfg = RoundConfig(rounds=1, local_epochs=1, dims=SMALL)
    client = blob_clients(cfg, M=1)[0]
    glob = shared_payload("cvae", init_global_model("cvae", 6, 3, 5, SMALL))
    payload, _, _ = local_train(client, glob, cfg, epochs=0)
    for k in glob.tensors:
        assert np.array_equal(payload.tensors[k], glob.tensors[k])


def test_loss_decreases_without_dp():
    # full-data loss at a fixed latent draw, measured after each of five epochs
    cfg = RoundConfig(rounds=1, local_epochs=1, dims=SMALL)
    client = blob_clients(cfg, M=1, n_per_class=100)[0]
    w = shared_payload("cvae", init_global_model("cvae", 6, 3, 0, SMALL))
    losses = [cvae_loss(client.model, client.train.X, client.train.y, RngStream(9))[0]]
    for epoch in range(5):
        w, _, _ = local_train(client, w, cfg, round_=epoch)
        losses.append(cvae_loss(client.model, client.train.X, client.train.y, RngStream(9))[0])
    bumps = sum(b > a for a, b in zip(losses, losses[1:]))
    assert bumps <= 0.1 * (len(losses) - 1)
    assert losses[-1] < losses[0]


def test_calibrated_dp_stays_within_budget():
    cfg = RoundConfig(rounds=3, local_epochs=2, dims=SMALL, dp=DpSpec(epsilon=1.0, delta=1e-4))
    clients = blob_clients(cfg, M=2)
    _, logs = run_federated_training(clients, cfg, seed=0)
    final = [log.epsilon for log in logs if log.round == 3]
    assert all(e <= 1.0 + 1e-6 for e in final)
    assert all(e > 0.5 for e in final)  # the budget is actually being spent


def test_budget_overrun_aborts_or_warns(caplog):
    dp = DpSpec(epsilon=1.0, noise_multiplier=0.3)
    cfg = RoundConfig(rounds=1, local_epochs=3, dims=SMALL, dp=dp)
    client = blob_clients(cfg, M=1)[0]
    glob = shared_payload("cvae", init_global_model("cvae", 6, 3, 0, SMALL))
    with pytest.raises(PrivacyBudgetExceeded) as err:
        local_train(client, glob, cfg)
    assert err.value.spent.epsilon > 1.0
    cfg_warn = replace(cfg, budget_policy="warn")
    client = blob_clients(cfg_warn, M=1)[0]
    with caplog.at_level("WARNING"):
        local_train(client, glob, cfg_warn)
    assert "budget" in caplog.text


def test_dp_step_only_sees_clipped_gradients():
    from fedcvae.privacy import add_audit_hook, remove_audit_hook

    seen = []
    hook = lambda event, payload: seen.append((event, payload))  # noqa: E731
    cfg = RoundConfig(rounds=1, local_epochs=1, dims=SMALL, dp=DpSpec())
    client = blob_clients(cfg, M=1)[0]
    add_audit_hook(hook)
    try:
        local_train(client, shared_payload("cvae", init_global_model("cvae", 6, 3, 0, SMALL)), cfg)
    finally:
        remove_audit_hook(hook)
    clipped = [p for e, p in seen if e == "clipped"]
    assert len(clipped) == client.accountant.steps
    assert all(np.all(p <= 1.5 + 1e-9) for p in clipped)
    assert [e for e, _ in seen] == ["clipped", "noised"] * len(clipped)


# --- the loop -------------------------------------------------------------------------

def _final(kind, workers=1, order=None, dp=None):
    cfg = RoundConfig(rounds=2, local_epochs=1, dims=SMALL, model_kind=kind, dp=dp)
    clients = blob_clients(cfg, M=4)
    if order:
        clients = [clients[i] for i in order]
    server, logs = run_federated_training(clients, cfg, seed=0, workers=workers)
    return server.shared.digest(), [log.as_dict() for log in logs]


@pytest.mark.parametrize("kind", ["cvae", "cgan"])
def test_determinism_across_workers_and_order(kind):
    dp = DpSpec()
    base = _final(kind, dp=dp)
    assert _final(kind, workers=4, dp=dp) == base
    assert _final(kind, order=[2, 0, 3, 1], dp=dp) == base


def test_single_client_single_round_is_local_model():
    cfg = RoundConfig(rounds=1, local_epochs=2, dims=SMALL)
    server, _ = run_federated_training(blob_clients(cfg, M=1), cfg, seed=0)
    client = blob_clients(cfg, M=1)[0]
    glob = shared_payload("cvae", init_global_model("cvae", 6, 3, 0, SMALL))
    payload, _, _ = local_train(client, glob, cfg)
    assert payload.digest() == server.shared.digest()


def test_fidelity_improves_over_rounds():
    cfg = RoundConfig(rounds=50, local_epochs=5, dims=ModelDims())
    clients = blob_clients(cfg, M=5, n_per_class=200, d=16)
    real = np.vstack([c.train.X for c in clients])
    template = clients[0].model
    track = {}

    def on_round(t, server):
        if t in (1, 50):
            dec = shared_stack(server.shared, template)
            synth = generate_embeddings(dec, real.shape[0], ClassDistribution.uniform(3), RngStream(0))
            track[t] = wasserstein_avg(real, synth.X)

    run_federated_training(clients, cfg, seed=0, on_round=on_round)
    assert track[50] < track[1]


# --- baselines ------------------------------------------------------------------------

def _linear_cfg(**kw):
    return RoundConfig(rounds=1, local_epochs=2, model_kind="linear", **kw)


def test_fedprox_mu_zero_equals_fedavg():
    cfg = _linear_cfg(prox_mu=0.0)
    glob = _payload(0.1, (3, 6))
    a = baseline_update("fedavg", blob_clients(cfg, M=2)[1], glob, cfg)
    b = baseline_update("fedprox", blob_clients(cfg, M=2)[1], glob, cfg)
    assert a.digest() == b.digest()


def test_fedprox_huge_mu_stays_at_global():
    cfg = _linear_cfg(prox_mu=1e6)
    glob = _payload(0.1, (3, 6))
    out = baseline_update("fedprox", blob_clients(cfg, M=2)[1], glob, cfg)
    for k in glob.tensors:
        assert np.max(np.abs(out.tensors[k] - glob.tensors[k])) < 1e-3
    moved = baseline_update("fedavg", blob_clients(cfg, M=2)[1], glob, cfg)
    assert np.max(np.abs(moved.tensors["classifier.W"] - 0.1)) > 1e-3


def test_unknown_baseline():
    cfg = _linear_cfg()
    with pytest.raises(ValueError):
        baseline_update("fedsgd", blob_clients(cfg, M=1)[0], _payload(0, (3, 6)), cfg)


def test_fedavg_on_iid_blobs():
    cfg = RoundConfig(rounds=20, local_epochs=5, model_kind="linear", learning_rate=1e-2)
    clients = blob_clients(cfg, M=5, n_per_class=200, iid=True, d=16)
    server, _ = run_federated_training(clients, cfg, seed=0)
    clf = linear_from_payload(server.shared)
    X = np.vstack([c.test.X for c in clients])
    y = np.concatenate([c.test.y for c in clients])
    assert accuracy(np.argmax(classifier_predict_proba(clf, X), axis=1), y) >= 0.99


# --- checkpoints ----------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    tensors = {"decoder.0.W": np.random.default_rng(0).normal(size=(3, 4)), "decoder.0.b": np.arange(3.0)}
    save_checkpoint(tmp_path / "c.fckp", tensors, 17, "abc123")
    back, round_, h = load_checkpoint(tmp_path / "c.fckp")
    assert round_ == 17 and h == "abc123"
    assert list(back) == list(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k].astype(np.float32).astype(np.float64))


def test_checkpoint_bad_magic(tmp_path):
    from fedcvae.data import FormatError

    (tmp_path / "c.fckp").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "c.fckp")
