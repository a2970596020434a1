"""Gaussian moment propagation through dropout layers and transfer functions.

Every unit is summarised by the mean and variance of its activation.  The
functions here map those moments through a dropout-masked affine map and
through the elementwise nonlinearities used by the networks in this package.

The ``*_with_grads`` helpers return the local partial derivatives alongside
the moments; the backward pass in :mod:`fdrnn.gradients` relies on them.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr, owens_t

NEG_VAR_TOL = 1e-12

# sigma(x) ~= w * Phi(l1 x) + (1 - w) * Phi(l2 x), least squares on [-15, 15]
_MIX_LAMBDA = np.array([0.435274, 0.768026])
_MIX_WEIGHT = np.array([0.434962, 1.0 - 0.434962])
# sigma(x) ~= Phi(sqrt(_VAR_LAMBDA2) x) for the second moment
_VAR_LAMBDA2 = 0.3458

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class TransferKind(enum.Enum):
    TANH = "tanh"
    SIGMOID = "sigmoid"
    RECTIFIER = "rectifier"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, value: "TransferKind | str") -> "TransferKind":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


def _check_var(var: np.ndarray) -> np.ndarray:
    var = np.asarray(var)
    if var.size and var.min() < -NEG_VAR_TOL:
        raise ValueError(f"negative variance {var.min():.3g}")
    return np.maximum(var, 0.0)


@dataclass(frozen=True)
class GaussianVec:
    """Paired mean/variance arrays with diagonal covariance."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        var = np.asarray(self.var, dtype=float)
        if mean.shape != var.shape:
            raise ValueError(f"mean shape {mean.shape} != var shape {var.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", _check_var(var))

    @classmethod
    def point(cls, mean) -> "GaussianVec":
        mean = np.asarray(mean, dtype=float)
        return cls(mean, np.zeros_like(mean))

    def __len__(self):
        return self.mean.shape[-1]


@dataclass(frozen=True)
class WeightDist:
    """Elementwise Gaussian over a weight matrix (adaptive weight noise)."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        var = np.asarray(self.var, dtype=float)
        if mean.shape != var.shape:
            raise ValueError(f"mean shape {mean.shape} != var shape {var.shape}")
        if var.size and var.min() < 0:
            raise ValueError("weight variances must be nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)


def check_keep_prob(p: float) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"keep probability {p} outside [0, 1]")
    return p


# -- affine maps -------------------------------------------------------------


def dropout_scatter(mean, var, p):
    """Per-input factor multiplying ``w**2`` in the pre-synaptic variance."""
    return p * (1.0 - p) * mean * mean + p * var


def presynaptic_arrays(mean, var, W, bias, p):
    """Array form of :func:`presynaptic_moments`; works on batches of rows."""
    out_mean = p * (mean @ W)
    if bias is not None:
        out_mean = out_mean + bias
    out_var = dropout_scatter(mean, var, p) @ (W * W)
    return out_mean, out_var


def _check_affine(x: GaussianVec, W: np.ndarray, bias) -> None:
    if W.ndim != 2 or x.mean.shape[-1] != W.shape[0]:
        raise ValueError(f"input of length {x.mean.shape[-1]} does not match weights {W.shape}")
    if bias is not None and np.shape(bias) != (W.shape[1],):
        raise ValueError(f"bias shape {np.shape(bias)} does not match weights {W.shape}")


def presynaptic_moments(x: GaussianVec, W, bias, p: float) -> GaussianVec:
    """Moments of ``(d * x) @ W + bias`` with ``d ~ Bernoulli(p)`` per input.

    ``p`` is the keep probability.  The bias is deterministic and only shifts
    the mean.  Inputs are independent Gaussians with the given moments.
    """
    W = np.asarray(W, dtype=float)
    bias = None if bias is None else np.asarray(bias, dtype=float)
    _check_affine(x, W, bias)
    p = check_keep_prob(p)
    m, v = presynaptic_arrays(x.mean, x.var, W, bias, p)
    return GaussianVec(m, v)


def awn_presynaptic_moments(x: GaussianVec, w: WeightDist) -> GaussianVec:
    """Moments of ``x @ w`` when the weights themselves are Gaussian."""
    if w.mean.ndim != 2 or x.mean.shape[-1] != w.mean.shape[0]:
        raise ValueError(f"input of length {x.mean.shape[-1]} does not match weights {w.mean.shape}")
    mean = x.mean @ w.mean
    var = x.var @ (w.mean**2) + x.var @ w.var + (x.mean**2) @ w.var
    return GaussianVec(mean, var)


def sample_presynaptic(x: GaussianVec, W, bias, p: float, rng: np.random.Generator) -> np.ndarray:
    """One Gaussian draw ``E[a] + s * sqrt(V[a])`` of the pre-synaptic activation."""
    a = presynaptic_moments(x, W, bias, p)
    s = rng.standard_normal(a.mean.shape)
    return a.mean + s * np.sqrt(a.var)


# -- transfer functions ------------------------------------------------------


def _phi(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _sigmoid_mean(mu, v):
    """Approximate E[sigmoid(a)], a ~ N(mu, v); exact at v == 0."""
    mean = np.zeros_like(mu)
    d_mu = np.zeros_like(mu)
    d_v = np.zeros_like(mu)
    resid = expit(mu)
    d_resid = resid * (1.0 - resid)
    for lam, w in zip(_MIX_LAMBDA, _MIX_WEIGHT):
        s = np.sqrt(1.0 + lam * lam * v)
        u = lam * mu / s
        pdf = _phi(u)
        mean += w * ndtr(u)
        d_mu += w * pdf * lam / s
        d_v -= w * pdf * lam**3 * mu / (2.0 * s**3)
        resid = resid - w * ndtr(lam * mu)
        d_resid = d_resid - w * lam * _phi(lam * mu)
    # the mixture misfit at v == 0, damped as the input spreads out
    damp = 1.0 / np.sqrt(1.0 + v)
    mean += resid * damp
    d_mu += d_resid * damp
    d_v -= 0.5 * resid * damp**3
    return mean, d_mu, d_v


def _sigmoid_var(mu, v):
    """Approximate V[sigmoid(a)] via the probit form E[Phi^2] - E[Phi]^2."""
    L = _VAR_LAMBDA2
    sl = np.sqrt(L)
    s = np.sqrt(1.0 + L * v)
    h = sl * mu / s
    q = 1.0 + 2.0 * L * v
    a = 1.0 / np.sqrt(q)
    cdf = ndtr(h)
    var = cdf - 2.0 * owens_t(h, a) - cdf * cdf
    var = np.where(v > 0, var, 0.0)
    var = np.maximum(var, 0.0)
    dvar_dh = 2.0 * _phi(h) * (ndtr(a * h) - cdf)
    dvar_da = -np.exp(-0.5 * h * h * (1.0 + a * a)) / (np.pi * (1.0 + a * a))
    d_mu = dvar_dh * sl / s
    d_v = dvar_dh * (-sl * L * mu / (2.0 * s**3)) + dvar_da * (-L * q**-1.5)
    return var, d_mu, d_v


def _rectifier(mu, v):
    pos = v > 0
    sd = np.sqrt(np.where(pos, v, 1.0))
    z = mu / sd
    cdf = ndtr(z)
    pdf = _phi(z)
    mean = np.where(pos, mu * cdf + sd * pdf, np.maximum(mu, 0.0))
    second = (mu * mu + v) * cdf + mu * sd * pdf
    var = np.where(pos, np.maximum(second - mean * mean, 0.0), 0.0)
    step = (mu > 0).astype(float)
    dm_mu = np.where(pos, cdf, step)
    dm_v = np.where(pos, pdf / (2.0 * sd), 0.0)
    dv_mu = np.where(pos, 2.0 * mu * cdf + 2.0 * sd * pdf - 2.0 * mean * cdf, 0.0)
    at_zero = np.where(mu == 0, 0.5 - 1.0 / (2.0 * np.pi), step)
    dv_v = np.where(pos, cdf - mean * pdf / sd, at_zero)
    return mean, var, dm_mu, dm_v, dv_mu, dv_v


def transfer_moments_with_grads(mean, var, kind: TransferKind):
    """Moments of ``f(a)`` plus the four partials d(mean, var)/d(mu, v).

    Returns ``(m, s, dm_dmu, dm_dv, ds_dmu, ds_dv)`` where ``m``/``s`` are the
    output mean/variance.  The partials are exact derivatives of the
    approximations used for the moments.
    """
    kind = TransferKind.parse(kind)
    dtype = np.result_type(mean, var, np.float32)
    out = _transfer_float64(np.asarray(mean, dtype=float), np.asarray(var, dtype=float), kind)
    if dtype == np.float64:
        return out
    return tuple(o.astype(dtype) for o in out)


def _transfer_float64(mu, v, kind):
    if kind is TransferKind.IDENTITY:
        one = np.ones_like(mu)
        zero = np.zeros_like(mu)
        return mu, v, one, zero, zero, one
    if kind is TransferKind.RECTIFIER:
        return _rectifier(mu, v)
    if kind is TransferKind.SIGMOID:
        m, dm_mu, dm_v = _sigmoid_mean(mu, v)
        s, ds_mu, ds_v = _sigmoid_var(mu, v)
        m = np.where(v > 0, m, expit(mu))
        return m, s, dm_mu, dm_v, ds_mu, ds_v
    # tanh(x) = 2 sigmoid(2x) - 1
    m, dm_mu, dm_v = _sigmoid_mean(2.0 * mu, 4.0 * v)
    s, ds_mu, ds_v = _sigmoid_var(2.0 * mu, 4.0 * v)
    m = np.where(v > 0, 2.0 * m - 1.0, np.tanh(mu))
    return m, 4.0 * s, 4.0 * dm_mu, 8.0 * dm_v, 8.0 * ds_mu, 16.0 * ds_v


def transfer_arrays(mean, var, kind: TransferKind):
    m, s, *_ = transfer_moments_with_grads(mean, var, kind)
    return m, s


def transfer_moments(a: GaussianVec, kind: TransferKind | str) -> GaussianVec:
    """Mean and variance of ``f(a)`` for ``a ~ N(a.mean, a.var)`` componentwise.

    Rectifier and identity are exact.  Sigmoid and tanh use closed-form
    approximations which reduce to ``(f(mean), 0)`` when the variance is 0.
    """
    m, s = transfer_arrays(a.mean, a.var, kind)
    return GaussianVec(m, s)


def transfer_point(x, kind: TransferKind | str) -> np.ndarray:
    """Plain deterministic ``f(x)``."""
    kind = TransferKind.parse(kind)
    if kind is TransferKind.TANH:
        return np.tanh(x)
    if kind is TransferKind.SIGMOID:
        return expit(x)
    if kind is TransferKind.RECTIFIER:
        return np.maximum(x, 0.0)
    return np.asarray(x)


def transfer_point_deriv(x, y, kind: TransferKind | str) -> np.ndarray:
    """``f'(x)`` expressed through ``y = f(x)`` where that is cheaper."""
    kind = TransferKind.parse(kind)
    if kind is TransferKind.TANH:
        return 1.0 - y * y
    if kind is TransferKind.SIGMOID:
        return y * (1.0 - y)
    if kind is TransferKind.RECTIFIER:
        return (y > 0).astype(y.dtype)
    return np.ones_like(y)
