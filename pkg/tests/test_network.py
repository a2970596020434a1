import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdrnn.moments import GaussianVec, presynaptic_moments, transfer_moments
from fdrnn.network import (
    DropoutConfig,
    RnnParams,
    forward_fd,
    forward_fd_sampled,
    forward_plain,
    hidden_moments,
)

from conftest import binary_batch, random_params


def test_zero_recurrence_is_feedforward(rng):
    params = random_params(rng)
    params.W_rec[...] = 0.0
    params.h0[...] = 0.0
    x = binary_batch(rng, 2, 6, 3)
    y = forward_plain(params, "tanh", "sigmoid", x)
    h = np.tanh(x @ params.W_in + params.b_h)
    ref = 1 / (1 + np.exp(-(h @ params.W_out + params.b_y)))
    np.testing.assert_allclose(y, ref, rtol=0, atol=1e-14)


def test_all_zero_weights_give_half(rng):
    params = random_params(rng).zeros_like()
    y = forward_plain(params, "tanh", "sigmoid", binary_batch(rng, 3, 5, 3))
    np.testing.assert_array_equal(y, 0.5)


def test_single_step_uses_h0(rng):
    params = random_params(rng)
    x = binary_batch(rng, 2, 1, 3)
    h = np.tanh(x[:, 0] @ params.W_in + params.h0 @ params.W_rec + params.b_h)
    ref = 1 / (1 + np.exp(-(h @ params.W_out + params.b_y)))
    np.testing.assert_allclose(forward_plain(params, "tanh", "sigmoid", x)[:, 0], ref, atol=1e-14)


@pytest.mark.parametrize("fd_final", [True, False])
def test_full_keep_reduces_to_plain(rng, fd_final):
    params = random_params(rng)
    x = binary_batch(rng, 4, 7, 3)
    cfg = DropoutConfig(1.0, 1.0, 1.0, fd_final)
    _, trace = forward_fd(params, cfg, "tanh", "sigmoid", x, return_trace=True)
    np.testing.assert_array_equal(trace.h_var, 0.0)
    y_fd = forward_fd(params, cfg, "tanh", "sigmoid", x)
    y_plain = forward_plain(params, "tanh", "sigmoid", x)
    assert np.max(np.abs(y_fd - y_plain)) <= 1e-12


def test_single_step_hand_composition():
    # one hidden unit, one input, one output
    params = RnnParams(np.array([[1.5]]), np.array([[0.8]]), np.array([[2.0]]),
                       np.array([0.1]), np.array([-0.3]), np.array([0.5]))
    cfg = DropoutConfig(p_in=0.7, p_hid=0.6, p_out=0.9, fd_final_layer=True)
    x = np.array([[[1.0]]])
    # concatenated layer with block keep probabilities: apply per block and add
    a_h = presynaptic_moments(GaussianVec([0.5], [0.0]), [[0.8]], None, 0.6)
    a_x = presynaptic_moments(GaussianVec([1.0], [0.0]), [[1.5]], [0.1], 0.7)
    a = GaussianVec(a_h.mean + a_x.mean, a_h.var + a_x.var)
    assert a.var[0] == pytest.approx(0.6 * 0.4 * 0.25 * 0.64 + 0.7 * 0.3 * 1.0 * 2.25)
    h = transfer_moments(a, "tanh")
    o = presynaptic_moments(h, [[2.0]], [-0.3], 0.9)
    y_ref = transfer_moments(o, "sigmoid").mean
    hm, hv = hidden_moments(params, cfg, "tanh", x)
    assert hm[0, 0, 0] == pytest.approx(h.mean[0], abs=1e-15)
    assert hv[0, 0, 0] == pytest.approx(h.var[0], abs=1e-15)
    y = forward_fd(params, cfg, "tanh", "sigmoid", x)
    assert y[0, 0, 0] == pytest.approx(y_ref[0], abs=1e-15)


def test_fd_mean_matches_true_dropout_linear(rng):
    # identity transfers make the moment propagation exact, so a true
    # Bernoulli-mask simulation must agree up to sampling error
    params = random_params(rng, n_in=6, n_hidden=4, n_out=3)
    cfg = DropoutConfig(p_in=0.6, p_hid=0.7, p_out=0.8, fd_final_layer=True)
    x = binary_batch(rng, 1, 1, 6, density=0.6)
    y_fd = forward_fd(params, cfg, "identity", "identity", x)[0, 0]
    n = 10**5
    d_in = rng.random((n, 6)) < cfg.p_in
    d_hid = rng.random((n, 4)) < cfg.p_hid
    d_out = rng.random((n, 4)) < cfg.p_out
    h = (d_in * x[0, 0]) @ params.W_in + (d_hid * params.h0) @ params.W_rec + params.b_h
    y = (d_out * h) @ params.W_out + params.b_y
    se = y.std(0) / np.sqrt(n)
    assert np.all(np.abs(y.mean(0) - y_fd) <= 4 * se)


def test_fd_mean_close_to_true_dropout_tanh(rng):
    # with many inputs the pre-activation is close to Gaussian; the residual
    # gap is the transfer approximation error
    params = random_params(rng, n_in=60, n_hidden=3, n_out=2, scale=0.3)
    cfg = DropoutConfig(p_in=0.8, p_hid=0.8, p_out=0.8, fd_final_layer=False)
    x = binary_batch(rng, 1, 1, 60, density=0.5)
    hm, _ = hidden_moments(params, cfg, "tanh", x)
    n = 10**5
    d_in = rng.random((n, 60)) < cfg.p_in
    d_hid = rng.random((n, 3)) < cfg.p_hid
    h = np.tanh((d_in * x[0, 0]) @ params.W_in + (d_hid * params.h0) @ params.W_rec + params.b_h)
    assert np.max(np.abs(h.mean(0) - hm[0, 0])) < 2e-2


def test_sampled_full_keep_equals_plain(rng):
    params = random_params(rng)
    x = binary_batch(rng, 3, 5, 3)
    for fd_final in (True, False):
        cfg = DropoutConfig(1.0, 1.0, 1.0, fd_final)
        y = forward_fd_sampled(params, cfg, "tanh", "sigmoid", x, rng)
        np.testing.assert_array_equal(y, forward_plain(params, "tanh", "sigmoid", x))


def test_sampled_is_seed_deterministic(rng):
    params = random_params(rng)
    x = binary_batch(rng, 2, 4, 3)
    cfg = DropoutConfig(0.8, 0.5, 0.7, True)
    a = forward_fd_sampled(params, cfg, "tanh", "sigmoid", x, np.random.default_rng(3))
    b = forward_fd_sampled(params, cfg, "tanh", "sigmoid", x, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_sampled_average_matches_fd(rng):
    params = random_params(rng, n_in=3, n_hidden=2, n_out=2, scale=1.0)
    cfg = DropoutConfig(0.6, 0.7, 0.8, True)
    x = np.ones((1, 1, 3))
    y_fd = forward_fd(params, cfg, "tanh", "identity", x)[0, 0]
    n = 10**4
    ys = forward_fd_sampled(params, cfg, "tanh", "identity", np.repeat(x, n, axis=0), rng)[:, 0]
    se = ys.std(0) / np.sqrt(n)
    assert np.all(np.abs(ys.mean(0) - y_fd) <= 4 * se)


def test_fd_is_bitwise_deterministic(rng):
    params = random_params(rng)
    x = binary_batch(rng, 3, 6, 3)
    cfg = DropoutConfig(0.8, 0.5, 0.7, True)
    a = forward_fd(params, cfg, "tanh", "sigmoid", x)
    b = forward_fd(params, cfg, "tanh", "sigmoid", x)
    assert a.tobytes() == b.tobytes()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.floats(0.1, 3.0))
def test_hidden_tanh_moments_bounded(seed, p_in, p_hid, scale):
    rng = np.random.default_rng(seed)
    params = random_params(rng, scale=scale)
    x = binary_batch(rng, 2, 8, 3)
    hm, hv = hidden_moments(params, DropoutConfig(p_in, p_hid, 1.0), "tanh", x)
    # closed bound: tanh of a large argument rounds to exactly +-1 in floating point
    assert np.all(np.abs(hm) <= 1) and np.all((hv >= 0) & (hv <= 1))


def test_shape_errors(rng):
    params = random_params(rng)
    with pytest.raises(ValueError):
        forward_fd(params, DropoutConfig(), "tanh", "sigmoid", np.zeros((2, 3, 4)))
    with pytest.raises(ValueError):
        forward_plain(params, "tanh", "sigmoid", np.zeros((3, 3)))
    with pytest.raises(ValueError):
        DropoutConfig(p_in=1.2)
    with pytest.raises(ValueError):
        RnnParams(np.zeros((3, 5)), np.zeros((4, 4)), np.zeros((5, 2)), np.zeros(5), np.zeros(2), np.zeros(5))


def test_flatten_roundtrip(rng):
    params = random_params(rng)
    back = params.unflatten(params.flatten())
    for a, b in zip(params.arrays(), back.arrays()):
        np.testing.assert_array_equal(a, b)
