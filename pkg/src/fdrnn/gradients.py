"""Backpropagation through time for the fast-dropout RNN, a finite-difference
oracle, and the per-unit split of a weight gradient into a loss part and a
variance-driven regularisation part."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import sequence_bce_nll
from .moments import GaussianVec, check_keep_prob, dropout_scatter, transfer_point, transfer_point_deriv
from .network import DropoutConfig, ParamGrads, RnnParams, forward_fd, forward_plain

LossFn = Callable[[np.ndarray, np.ndarray], tuple]


def _bce(y, targets, mask=None):
    return sequence_bce_nll(y, targets, mask=mask, return_grad=True)


def affine_backward(mean_in, var_in, W, p, g_mean, g_var):
    """Reverse pass of the dropout affine moment map.

    Given upstream gradients with respect to the pre-synaptic mean and
    variance, returns ``(dW, g_mean_in, g_var_in)``.  Inputs are 2-D
    ``(rows, fan_in)``; rows are summed over.  ``g_var`` may be ``None`` when
    nothing downstream depends on the variance.
    """
    dW = p * (mean_in.T @ g_mean)
    g_mean_in = p * (g_mean @ W.T)
    if g_var is None:
        return dW, g_mean_in, np.zeros_like(var_in)
    W_sq = W * W
    back_var = g_var @ W_sq.T
    dW += 2.0 * W * (dropout_scatter(mean_in, var_in, p).T @ g_var)
    g_mean_in += 2.0 * p * (1.0 - p) * mean_in * back_var
    return dW, g_mean_in, p * back_var


def _flat2(a):
    return a.reshape(-1, a.shape[-1])


def _check_finite(arr, what, t):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite {what} at time step {t}")


def backward_fd(params: RnnParams, cfg: DropoutConfig, f_h, f_y, inputs, targets,
                loss_fn: LossFn | None = None, mask=None):
    """Loss and exact gradient of the fast-dropout forward computation.

    Gradients flow through both the mean and the variance of every hidden
    unit, at every step.  The default loss is :func:`sequence_bce_nll`;
    ``loss_fn(y, targets)`` may supply any other ``(loss, dloss_dy)`` pair.
    """
    inputs = np.asarray(inputs)
    y, tr = forward_fd(params, cfg, f_h, f_y, inputs, return_trace=True)
    if loss_fn is None:
        loss, gy = _bce(y, targets, mask)
    else:
        loss, gy = loss_fn(y, targets)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    N, T, _ = inputs.shape
    H, O = params.n_hidden, params.n_out
    grads = params.zeros_like()

    hm_all, hv_all = tr.h_mean[:, 1:], tr.h_var[:, 1:]
    if cfg.fd_final_layer:
        dm_mu, dm_v = tr.dy[0], tr.dy[1]
        g_om = gy * dm_mu
        dW, g_hm_out, g_hv_out = affine_backward(
            _flat2(hm_all), _flat2(hv_all), params.W_out, cfg.p_out, _flat2(g_om), _flat2(gy * dm_v))
    else:
        g_om = gy * transfer_point_deriv(tr.out_pre_mean, y, f_y)
        dW, g_hm_out, g_hv_out = affine_backward(
            _flat2(hm_all), _flat2(hv_all), params.W_out, 1.0, _flat2(g_om), None)
    grads.W_out[...] = dW
    grads.b_y[...] = g_om.sum(axis=(0, 1))
    g_hm_out = g_hm_out.reshape(N, T, H)
    g_hv_out = g_hv_out.reshape(N, T, H)

    g_am = np.empty((N, T, H), dtype=g_hm_out.dtype)
    g_av = np.empty((N, T, H), dtype=g_hm_out.dtype)
    dM_mu, dM_v, dV_mu, dV_v = tr.dh
    carry_m = np.zeros((N, H), dtype=g_hm_out.dtype)
    carry_v = np.zeros((N, H), dtype=g_hm_out.dtype)
    dW_rec = np.zeros_like(params.W_rec)
    for t in range(T - 1, -1, -1):
        g_hm = g_hm_out[:, t] + carry_m
        g_hv = g_hv_out[:, t] + carry_v
        g_am[:, t] = g_hm * dM_mu[:, t] + g_hv * dV_mu[:, t]
        g_av[:, t] = g_hm * dM_v[:, t] + g_hv * dV_v[:, t]
        _check_finite(g_am[:, t], "mean gradient", t)
        _check_finite(g_av[:, t], "variance gradient", t)
        dW_t, carry_m, carry_v = affine_backward(
            tr.h_mean[:, t], tr.h_var[:, t], params.W_rec, cfg.p_hid, g_am[:, t], g_av[:, t])
        dW_rec += dW_t
    grads.W_rec[...] = dW_rec
    grads.h0[...] = carry_m.sum(axis=0)
    grads.b_h[...] = g_am.sum(axis=(0, 1))
    x2 = _flat2(inputs)
    dW_in, _, _ = affine_backward(x2, np.zeros_like(x2), params.W_in, cfg.p_in, _flat2(g_am), _flat2(g_av))
    grads.W_in[...] = dW_in
    return loss, grads


def backward_plain(params: RnnParams, f_h, f_y, inputs, targets, loss_fn: LossFn | None = None, mask=None):
    """Loss and BPTT gradient of the ordinary (deterministic) RNN."""
    inputs = np.asarray(inputs)
    N, T, _ = inputs.shape
    H = params.n_hidden
    hs = np.empty((N, T + 1, H), dtype=np.result_type(params.dtype, inputs.dtype))
    hs[:, 0] = params.h0
    xw = inputs @ params.W_in
    for t in range(T):
        hs[:, t + 1] = transfer_point(xw[:, t] + hs[:, t] @ params.W_rec + params.b_h, f_h)
    z = hs[:, 1:] @ params.W_out + params.b_y
    y = transfer_point(z, f_y)
    loss, gy = _bce(y, targets, mask) if loss_fn is None else loss_fn(y, targets)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    grads = params.zeros_like()
    g_z = gy * transfer_point_deriv(z, y, f_y)
    grads.W_out[...] = _flat2(hs[:, 1:]).T @ _flat2(g_z)
    grads.b_y[...] = g_z.sum(axis=(0, 1))
    g_h_out = g_z @ params.W_out.T
    g_a = np.empty((N, T, H), dtype=g_h_out.dtype)
    carry = np.zeros((N, H), dtype=g_h_out.dtype)
    for t in range(T - 1, -1, -1):
        h = hs[:, t + 1]
        g_a[:, t] = (g_h_out[:, t] + carry) * transfer_point_deriv(None, h, f_h)
        _check_finite(g_a[:, t], "gradient", t)
        grads.W_rec += hs[:, t].T @ g_a[:, t]
        carry = g_a[:, t] @ params.W_rec.T
    grads.h0[...] = carry.sum(axis=0)
    grads.b_h[...] = g_a.sum(axis=(0, 1))
    grads.W_in[...] = _flat2(inputs).T @ _flat2(g_a)
    return loss, grads


def finite_difference_grad(loss_closure, params, epsilon: float = 1e-5):
    """Central differences of ``loss_closure`` at ``params``.

    ``params`` may be an :class:`RnnParams` (the closure then receives
    :class:`RnnParams`) or a flat array.  Costs two loss evaluations per
    parameter.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    structured = isinstance(params, RnnParams)
    theta = params.flatten() if structured else np.asarray(params, dtype=float).copy()
    wrap = params.unflatten if structured else (lambda v: v)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + epsilon
        up = loss_closure(wrap(theta.copy()))
        theta[i] = old - epsilon
        down = loss_closure(wrap(theta.copy()))
        theta[i] = old
        grad[i] = (up - down) / (2.0 * epsilon)
    return params.unflatten(grad) if structured else grad


# -- single-unit analysis ---------------------------------------------------


@dataclass(frozen=True)
class UnitContext:
    """One unit ``a = (d * x) @ w`` with ``d ~ Bernoulli(p)``."""

    x: GaussianVec
    w: np.ndarray
    p: float

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.shape != self.x.mean.shape:
            raise ValueError(f"weights {w.shape} do not match inputs {self.x.mean.shape}")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "p", check_keep_prob(self.p))

    def moments(self) -> tuple[float, float]:
        m = self.p * float(self.x.mean @ self.w)
        v = float(dropout_scatter(self.x.mean, self.x.var, self.p) @ (self.w**2))
        return m, v


@dataclass(frozen=True)
class UnitDecomposition:
    delta: float
    eta: np.ndarray
    loss_part: np.ndarray
    reg_part: np.ndarray


def unit_weight_grad(ctx: UnitContext, dJ_dmean: float, dJ_dvar: float) -> np.ndarray:
    """Full gradient of the objective w.r.t. the unit's incoming weights."""
    dW, _, _ = affine_backward(ctx.x.mean[None], ctx.x.var[None], ctx.w[:, None], ctx.p,
                               np.array([[dJ_dmean]]), np.array([[dJ_dvar]]))
    return dW[:, 0]


def decompose_unit_gradient(ctx: UnitContext, dJ_dmean: float, dJ_dvar: float) -> UnitDecomposition:
    """Split the weight gradient into a mean-driven and a variance-driven part.

    The variance part has the form ``2 * sign(delta) * eta_i * w_i`` with
    ``eta_i >= 0``: a weight decay whose per-weight coefficient depends on the
    current activations and whose sign follows ``delta = dJ/dV[a]``.
    """
    delta = float(dJ_dvar)
    loss_part = dJ_dmean * ctx.p * ctx.x.mean
    eta = abs(delta) * ctx.p * ((1.0 - ctx.p) * ctx.x.mean**2 + ctx.x.var)
    reg_part = 2.0 * np.sign(delta) * eta * ctx.w
    return UnitDecomposition(delta, eta, loss_part, reg_part)


def sampled_reg_term(ctx: UnitContext, s: float, error_signal: float) -> np.ndarray:
    """Variance-path gradient when the activation is drawn as ``E[a] + s sqrt(V[a])``.

    The scale depends only on the input moments, the keep probability and the
    error signal, never on the weights themselves.
    """
    scale = np.sqrt(dropout_scatter(ctx.x.mean, ctx.x.var, ctx.p))
    return error_signal * scale * s
