import numpy as np
import pytest

from fedcvae.numerics import (
    Layer,
    MlpStack,
    OptimizerState,
    Purpose,
    RngStream,
    ShapeError,
    adam_step,
    derive_seed,
    gaussian_sample,
    linear_forward,
    log_softmax,
    mix64,
    mlp_forward_backward,
    sgd_step,
    softmax,
)

from helpers import fd_per_sample, rel_err


# --- linear_forward ---------------------------------------------------------

def test_linear_forward_identity():
    out = linear_forward(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2))
    assert np.array_equal(out, [[1.0, 2.0]])


def test_linear_forward_hand_arithmetic():
    assert linear_forward(np.array([[1.0, 1.0]]), np.array([[2.0, 3.0]]), np.array([1.0]))[0, 0] == 6.0


def test_linear_forward_zero_input_gives_bias():
    W = np.random.default_rng(0).normal(size=(1, 2))
    assert linear_forward(np.zeros((1, 2)), W, np.array([5.0]))[0, 0] == 5.0


def test_linear_forward_shape_error():
    with pytest.raises(ShapeError):
        linear_forward(np.ones((1, 3)), np.ones((2, 2)), np.zeros(2))


# --- rng ---------------------------------------------------------------------

def test_mix64_reference_values():
    # SplitMix64 from state 0: first outputs of the reference generator
    gamma = 0x9E3779B97F4A7C15
    assert mix64(gamma) == 0xE220A8397B1DCDAF
    assert mix64(2 * gamma & (2**64 - 1)) == 0x6E789E6AA1B965F4


def test_derive_seed_xor_rule():
    mask = 2**64 - 1
    expect = mix64(7 ^ (3 * 0x9E3779B97F4A7C15 & mask) ^ (5 * 0xBF58476D1CE4E5B9 & mask)
                   ^ (2 * 0x94D049BB133111EB & mask))
    assert derive_seed(7, 3, 5, 2) == expect


def test_stream_matches_scalar_definition():
    rng = RngStream(11, 2, 3, Purpose.NOISE)
    state = derive_seed(11, 2, 3, Purpose.NOISE)
    expect = [mix64((state + k * 0x9E3779B97F4A7C15) & (2**64 - 1)) for k in range(1, 6)]
    assert [int(v) for v in rng.raw(5)] == expect


def test_stream_determinism_and_independence():
    a = gaussian_sample(RngStream(1, 0, 0, Purpose.LATENT), 1000)
    b = gaussian_sample(RngStream(1, 0, 0, Purpose.LATENT), 1000)
    c = gaussian_sample(RngStream(1, 0, 1, Purpose.LATENT), 1000)
    d = gaussian_sample(RngStream(1, 1, 0, Purpose.LATENT), 1000)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)
    assert abs(np.corrcoef(a, c)[0, 1]) < 0.1


def test_chunked_draws_equal_one_draw():
    one = RngStream(5).uniform(100)
    rng = RngStream(5)
    two = np.concatenate([rng.uniform(37), rng.uniform(63)])
    assert np.array_equal(one, two)


def test_gaussian_moments():
    z = gaussian_sample(RngStream(0, purpose=Purpose.LATENT), 100_000)
    assert -0.02 < z.mean() < 0.02
    assert 0.97 < z.var() < 1.03


def test_gaussian_shape_and_odd_count():
    z = gaussian_sample(RngStream(3), (3, 5))
    assert z.shape == (3, 5)
    assert np.all(np.isfinite(z))


def test_uniform_range():
    u = RngStream(9).uniform(10_000)
    assert u.min() >= 0.0 and u.max() < 1.0


def test_permutation_is_permutation():
    p = RngStream(2).permutation(50)
    assert sorted(p.tolist()) == list(range(50))


def test_categorical_frequencies():
    y = RngStream(4).categorical(np.array([0.2, 0.8]), 20_000)
    assert abs(np.mean(y == 1) - 0.8) < 0.01


# --- stacks and per-sample gradients ------------------------------------------

def _stack(seed, widths=(5, 7, 4, 3)):
    return MlpStack.init(list(widths), RngStream(seed))


def test_param_count_formula():
    s = _stack(0, (5, 7, 4, 3))
    assert s.param_count() == 5 * 7 + 7 + 7 * 4 + 4 + 4 * 3 + 3
    assert sum(p.size for p in s.params()) == s.param_count()


def test_widths_must_chain():
    with pytest.raises(ShapeError):
        MlpStack([Layer(np.ones((3, 2)), np.zeros(3)), Layer(np.ones((2, 4)), np.zeros(2))])


def test_single_layer_squared_error_example():
    stack = MlpStack([Layer(np.zeros((1, 1)), np.zeros(1), "identity")])
    x = np.array([[1.0]])
    out = stack(x)
    upstream = 2.0 * (out - 1.0)  # d/dout of (out - 1)^2
    (gW, gb), = mlp_forward_backward(stack, x, upstream)
    assert gW[0, 0] == pytest.approx(-2.0)
    assert gb[0] == pytest.approx(-2.0)


def test_zero_upstream_gives_zero_grads():
    s = _stack(1)
    per = mlp_forward_backward(s, np.ones((3, 5)), np.zeros((3, 3)))
    assert all(np.all(g == 0) for sample in per for g in sample)


def test_identical_samples_identical_grads():
    s = _stack(2)
    x = np.tile(np.random.default_rng(0).normal(size=(1, 5)), (2, 1))
    up = np.tile(np.random.default_rng(1).normal(size=(1, 3)), (2, 1))
    a, b = mlp_forward_backward(s, x, up)
    for ga, gb in zip(a, b):
        assert np.array_equal(ga, gb)


@pytest.mark.parametrize("seed", range(5))
def test_per_sample_sum_equals_batch_gradient(seed):
    r = np.random.default_rng(seed)
    s = _stack(seed)
    x = r.normal(size=(4, 5))
    up = r.normal(size=(4, 3))
    cache = s.forward(x)
    per, _ = s.backward(cache, up, per_sample=True)
    summed, _ = s.backward(cache, up, per_sample=False)
    for p, t in zip(per, summed):
        assert np.allclose(p.sum(axis=0), t, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_factored_matches_materialized(seed):
    r = np.random.default_rng(seed)
    s = _stack(seed)
    x = r.normal(size=(4, 5))
    up = r.normal(size=(4, 3))
    cache = s.forward(x)
    per, _ = s.backward(cache, up, per_sample=True)
    fac, _ = s.backward(cache, up, per_sample="factored")
    mats = [m for f in fac for m in f.materialize()]
    for a, b in zip(per, mats):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-14)
    norms = sum(f.sq_norms() for f in fac)
    direct = sum(np.sum(g.reshape(4, -1) ** 2, axis=1) for g in per)
    assert np.allclose(norms, direct, rtol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_per_sample_grads_match_finite_differences(seed):
    r = np.random.default_rng(seed)
    d, n = int(r.integers(2, 9)), int(r.integers(1, 5))
    s = MlpStack.init([d, 6, 5, 2], RngStream(seed))
    x = r.normal(size=(n, d))
    target = r.normal(size=(n, 2))

    def losses():
        return np.sum((s(x) - target) ** 2, axis=1)

    per = mlp_forward_backward(s, x, 2.0 * (s(x) - target))
    analytic = [np.stack([sample[j] for sample in per]) for j in range(len(per[0]))]
    assert rel_err(analytic, fd_per_sample(losses, s.params())) < 1e-4


def test_sigmoid_activation_gradient():
    s = MlpStack.init([3, 4, 1], RngStream(0), hidden="sigmoid")
    x = np.random.default_rng(0).normal(size=(2, 3))

    def losses():
        return s(x)[:, 0]

    per, _ = s.backward(s.forward(x), np.ones((2, 1)), per_sample=True)
    assert rel_err(per, fd_per_sample(losses, s.params())) < 1e-6


def test_backward_shape_error():
    s = _stack(0)
    with pytest.raises(ShapeError):
        s.backward(s.forward(np.ones((2, 5))), np.ones((3, 3)))


# --- optimizers ---------------------------------------------------------------

def test_sgd_examples():
    assert sgd_step([np.array([1.0])], [np.array([1.0])], 0.1)[0][0] == pytest.approx(0.9)
    assert sgd_step([np.array([1.0])], [np.array([0.0])], 0.1)[0][0] == 1.0
    assert sgd_step([np.array([1.0])], [np.array([3.0])], 0.0)[0][0] == 1.0
    with pytest.raises(ShapeError):
        sgd_step([np.ones(2)], [np.ones(3)], 0.1)


def test_adam_first_step_magnitude_is_lr():
    st = OptimizerState("adam", 1e-3)
    p = [np.zeros(4)]
    out = adam_step(st, p, [np.ones(4)])
    # m_hat / sqrt(v_hat) = 1 exactly, so the step is lr / (1 + eps_hat)
    assert np.allclose(out[0], -1e-3 / (1 + 1e-8), rtol=1e-12)


def test_adam_zero_grads_leave_params():
    st = OptimizerState("adam", 1e-3)
    p = [np.arange(3.0)]
    for _ in range(5):
        p = adam_step(st, p, [np.zeros(3)])
    assert np.array_equal(p[0], np.arange(3.0))
    assert st.step == 5


def test_adam_deterministic():
    grads = [np.random.default_rng(i).normal(size=(2, 3)) for i in range(4)]
    runs = []
    for _ in range(2):
        st = OptimizerState("adam", 1e-2)
        p = [np.ones((2, 3))]
        for g in grads:
            p = st.apply(p, [g])
        runs.append(p[0])
    assert np.array_equal(*runs)


def test_adam_rejects_sgd_state():
    with pytest.raises(ValueError):
        adam_step(OptimizerState("sgd"), [np.ones(1)], [np.ones(1)])


def test_softmax_stable_and_shift_invariant():
    z = np.array([[1000.0, 0.0, -1000.0], [1.0, 2.0, 3.0]])
    p = softmax(z)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.allclose(softmax(z + 7.0), p)
    assert np.all(np.isfinite(log_softmax(z)))
