import numpy as np
import pytest

from fdrnn.gradients import (
    UnitContext,
    backward_fd,
    backward_plain,
    decompose_unit_gradient,
    finite_difference_grad,
    sampled_reg_term,
    unit_weight_grad,
)
from fdrnn.losses import LossKind, sequence_bce_nll, unit_loss
from fdrnn.moments import GaussianVec, transfer_moments_with_grads
from fdrnn.network import DropoutConfig, forward_fd, forward_plain

from conftest import binary_batch, random_params
from oracles import max_rel_err


def _fd_check(p, fd_final, transfer="tanh", seed=7):
    rng = np.random.default_rng(seed)
    params = random_params(rng, n_in=3, n_hidden=5, n_out=2)
    x = binary_batch(rng, 2, 4, 3, density=0.5)
    y = binary_batch(rng, 2, 4, 2, density=0.5)
    cfg = DropoutConfig(p, p, p, fd_final)
    _, grads = backward_fd(params, cfg, transfer, "sigmoid", x, y)

    def closure(q):
        return sequence_bce_nll(forward_fd(q, cfg, transfer, "sigmoid", x), y)

    num = finite_difference_grad(closure, params, 1e-5)
    return max_rel_err(grads.flatten(), num.flatten(), floor=1e-6)


@pytest.mark.parametrize("p", [1.0, 0.8, 0.5])
@pytest.mark.parametrize("fd_final", [True, False])
def test_backward_matches_finite_differences(p, fd_final):
    assert _fd_check(p, fd_final) < 1e-4


@pytest.mark.parametrize("transfer", ["sigmoid", "rectifier", "identity"])
def test_backward_other_transfers(transfer):
    assert _fd_check(0.7, True, transfer, seed=3) < 1e-4


def test_full_keep_equals_plain_bptt(rng):
    params = random_params(rng)
    x = binary_batch(rng, 3, 6, 3)
    y = binary_batch(rng, 3, 6, 2)
    for fd_final in (True, False):
        loss_fd, g_fd = backward_fd(params, DropoutConfig(1, 1, 1, fd_final), "tanh", "sigmoid", x, y)
        loss_pl, g_pl = backward_plain(params, "tanh", "sigmoid", x, y)
        assert abs(loss_fd - loss_pl) < 1e-12
        assert np.max(np.abs(g_fd.flatten() - g_pl.flatten())) < 1e-8


def test_plain_bptt_matches_finite_differences(rng):
    params = random_params(rng)
    x = binary_batch(rng, 2, 5, 3)
    y = binary_batch(rng, 2, 5, 2)
    _, g = backward_plain(params, "tanh", "sigmoid", x, y)
    num = finite_difference_grad(lambda q: sequence_bce_nll(forward_plain(q, "tanh", "sigmoid", x), y), params)
    assert max_rel_err(g.flatten(), num.flatten(), floor=1e-6) < 1e-4


def test_silent_input_rows_get_zero_gradient(rng):
    params = random_params(rng)
    x = binary_batch(rng, 2, 5, 3, density=0.6)
    x[..., 1] = 0.0
    y = binary_batch(rng, 2, 5, 2)
    _, g = backward_fd(params, DropoutConfig(0.8, 0.6, 0.7), "tanh", "sigmoid", x, y)
    np.testing.assert_array_equal(g.W_in[1], 0.0)
    assert np.any(g.W_in[0] != 0)


def test_nonfinite_reported_with_step(rng):
    params = random_params(rng)
    params.W_in[...] = np.inf
    x = np.ones((1, 3, 3))
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        backward_fd(params, DropoutConfig(0.8, 0.8, 0.8), "identity", "identity", x, x,
                    loss_fn=lambda y, t: (float(np.sum(y)), np.ones_like(y)))


# -- finite-difference oracle -------------------------------------------------


def test_fd_grad_quadratic(rng):
    theta = rng.normal(size=12)
    g = finite_difference_grad(lambda v: float(v @ v), theta)
    assert np.max(np.abs(g - 2 * theta)) < 1e-8


def test_fd_grad_linear(rng):
    c = rng.normal(size=9)
    g = finite_difference_grad(lambda v: float(c @ v), rng.normal(size=9))
    np.testing.assert_allclose(g, c, rtol=0, atol=1e-10)


def test_fd_grad_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        finite_difference_grad(lambda v: 0.0, np.zeros(2), epsilon=0.0)


# -- single-unit decomposition ------------------------------------------------


def _unit_problem(rng, kind):
    k = int(rng.integers(1, 8))
    x = GaussianVec(rng.normal(0, 1, k), rng.uniform(0, 1, k))
    ctx = UnitContext(x, rng.normal(0, 1, k), float(rng.uniform(0.1, 1.0)))
    m, v = ctx.moments()
    if kind is LossKind.GAUSSIAN_NLL_ON_MOMENTS:
        v = max(v, 1e-3)
    _, dm, dv = unit_loss(m, v, float(rng.uniform(0.05, 0.95)), kind)
    return ctx, dm, dv


@pytest.mark.parametrize("kind", list(LossKind))
def test_decomposition_identity(kind, rng):
    for _ in range(200):
        ctx, dm, dv = _unit_problem(rng, kind)
        dec = decompose_unit_gradient(ctx, dm, dv)
        full = unit_weight_grad(ctx, dm, dv)
        assert np.max(np.abs(dec.loss_part + dec.reg_part - full)) < 1e-10
        assert np.all(dec.eta >= 0)


def test_squared_loss_has_no_regulariser(rng):
    for _ in range(50):
        ctx, dm, dv = _unit_problem(rng, LossKind.SQUARED_ON_MEAN)
        dec = decompose_unit_gradient(ctx, dm, dv)
        assert dec.delta == 0.0
        np.testing.assert_array_equal(dec.reg_part, 0.0)


def test_gaussian_stationary_variance_kills_regulariser():
    ctx = UnitContext(GaussianVec([1.0, -0.5], [0.2, 0.3]), [0.7, 1.1], 0.6)
    m, _ = ctx.moments()
    t = 0.2
    _, dm, dv = unit_loss(m, (m - t) ** 2, t, "gaussian")
    dec = decompose_unit_gradient(ctx, dm, dv)
    assert abs(dec.delta) < 1e-14
    assert np.max(np.abs(dec.reg_part)) < 1e-13


def test_regulariser_shrinks_or_grows(rng):
    ctx = UnitContext(GaussianVec([1.0, 0.5, -2.0], [0.1, 0.0, 0.4]), [0.8, -1.3, 0.4], 0.7)
    shrink = decompose_unit_gradient(ctx, 0.3, 0.5).reg_part
    grow = decompose_unit_gradient(ctx, 0.3, -0.5).reg_part
    # a gradient step -lr*reg moves each weight towards 0 when delta > 0
    assert np.all(np.sign(shrink) == np.sign(ctx.w))
    assert np.all(np.sign(grow) == -np.sign(ctx.w))
    np.testing.assert_allclose(shrink, -grow)


def test_bernoulli_output_delta_through_sigmoid():
    # delta equals the chain through the sigmoid moment map
    m, v, t = 0.4, 0.9, 0.2
    _, dm, dv = unit_loss(m, v, t, "bernoulli")
    mean, _, _, dmean_dv, _, _ = transfer_moments_with_grads(np.array([m]), np.array([v]), "sigmoid")
    expected = -(t / mean[0] - (1 - t) / (1 - mean[0])) * dmean_dv[0]
    assert dv == pytest.approx(expected, rel=1e-12)


# -- sampling path ------------------------------------------------------------


def _ctx():
    return UnitContext(GaussianVec([0.9, -0.3, 0.0], [0.2, 0.5, 0.1]), [0.5, -1.0, 2.0], 0.6)


def test_sampled_reg_zero_draw():
    np.testing.assert_array_equal(sampled_reg_term(_ctx(), 0.0, 1.7), 0.0)


def test_sampled_reg_zero_mean(rng):
    ctx = _ctx()
    s = rng.standard_normal(10**5)
    terms = np.stack([sampled_reg_term(ctx, si, 1.3) for si in s[:2000]])
    assert terms.shape == (2000, 3)
    # vectorised equivalent for the full sample
    scale = sampled_reg_term(ctx, 1.0, 1.3)
    full = np.outer(s, scale)
    se = full.std(0) / np.sqrt(len(s))
    assert np.all(np.abs(full.mean(0)) <= 4 * se)
    np.testing.assert_allclose(terms, full[:2000], rtol=1e-14)


def test_sampled_reg_independent_of_weights():
    ctx = _ctx()
    other = UnitContext(ctx.x, ctx.w * np.array([3.0, -2.0, 0.1]), ctx.p)
    np.testing.assert_array_equal(sampled_reg_term(ctx, 0.8, -0.4), sampled_reg_term(other, 0.8, -0.4))
