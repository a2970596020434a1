"""Recurrent forward passes: plain, fast-dropout (moment matching) and sampled.

Shapes follow the row-vector convention ``h_t = f(x_t W_in + h_{t-1} W_rec + b_h)``,
so ``W_in`` is ``(n_in, n_hidden)``, ``W_rec`` is ``(n_hidden, n_hidden)`` and
``W_out`` is ``(n_hidden, n_out)``.  Batches are ``(N, T, n_in)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .moments import (
    TransferKind,
    check_keep_prob,
    presynaptic_arrays,
    transfer_arrays,
    transfer_moments_with_grads,
    transfer_point,
)

PARAM_NAMES = ("W_in", "W_rec", "W_out", "b_h", "b_y", "h0")


@dataclass
class RnnParams:
    W_in: np.ndarray
    W_rec: np.ndarray
    W_out: np.ndarray
    b_h: np.ndarray
    b_y: np.ndarray
    h0: np.ndarray

    def __post_init__(self):
        n_in, n_hidden = np.shape(self.W_in)
        n_out = np.shape(self.W_out)[1]
        expected = {
            "W_rec": (n_hidden, n_hidden),
            "W_out": (n_hidden, n_out),
            "b_h": (n_hidden,),
            "b_y": (n_out,),
            "h0": (n_hidden,),
        }
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    @property
    def n_in(self) -> int:
        return self.W_in.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.W_in.shape[1]

    @property
    def n_out(self) -> int:
        return self.W_out.shape[1]

    @property
    def dtype(self):
        return self.W_in.dtype

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in self.arrays()])

    def unflatten(self, vec: np.ndarray) -> "RnnParams":
        """New params shaped like ``self`` holding the entries of ``vec``."""
        out, i = {}, 0
        for f in fields(self):
            a = getattr(self, f.name)
            out[f.name] = np.asarray(vec[i:i + a.size]).reshape(a.shape)
            i += a.size
        if i != len(vec):
            raise ValueError(f"vector of length {len(vec)} does not match {i} parameters")
        return RnnParams(**out)

    def zeros_like(self) -> "RnnParams":
        return RnnParams(*(np.zeros_like(a) for a in self.arrays()))

    def copy(self) -> "RnnParams":
        return RnnParams(*(a.copy() for a in self.arrays()))

    def astype(self, dtype) -> "RnnParams":
        return RnnParams(*(np.asarray(a, dtype=dtype) for a in self.arrays()))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name).tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict, dtype=np.float64) -> "RnnParams":
        return cls(**{name: np.asarray(d[name], dtype=dtype) for name in PARAM_NAMES})


# gradients share the parameter layout
ParamGrads = RnnParams


@dataclass(frozen=True)
class DropoutConfig:
    """Keep probabilities (not drop rates) for each connection group."""

    p_in: float = 1.0
    p_hid: float = 1.0
    p_out: float = 1.0
    fd_final_layer: bool = True

    def __post_init__(self):
        for name in ("p_in", "p_hid", "p_out"):
            check_keep_prob(getattr(self, name))


@dataclass
class FdTrace:
    """Per-step moments kept by :func:`forward_fd` for backpropagation."""

    h_mean: np.ndarray  # (N, T + 1, H), index 0 is h0
    h_var: np.ndarray
    dh: tuple  # transfer partials, each (N, T, H)
    out_pre_mean: np.ndarray  # (N, T, O)
    out_pre_var: np.ndarray | None
    dy: tuple  # output transfer partials


def _check_batch(params: RnnParams, inputs) -> np.ndarray:
    inputs = np.asarray(inputs)
    if inputs.ndim != 3:
        raise ValueError(f"expected an (N, T, n_in) batch, got shape {inputs.shape}")
    if inputs.shape[2] != params.n_in:
        raise ValueError(f"batch has {inputs.shape[2]} input dims, params expect {params.n_in}")
    if inputs.shape[1] < 1:
        raise ValueError("sequences need at least one time step")
    return inputs


def forward_plain(params: RnnParams, f_h, f_y, inputs) -> np.ndarray:
    """Ordinary RNN; returns ``(N, T, n_out)`` outputs."""
    inputs = _check_batch(params, inputs)
    N, T, _ = inputs.shape
    h = np.broadcast_to(params.h0, (N, params.n_hidden))
    # input projection for all steps at once
    xw = inputs @ params.W_in
    ys = np.empty((N, T, params.n_out), dtype=np.result_type(params.dtype, inputs.dtype))
    for t in range(T):
        h = transfer_point(xw[:, t] + h @ params.W_rec + params.b_h, f_h)
        ys[:, t] = transfer_point(h @ params.W_out + params.b_y, f_y)
    return ys


def forward_fd(params: RnnParams, cfg: DropoutConfig, f_h, f_y, inputs, return_trace: bool = False):
    """Fast-dropout forward pass.

    The hidden state is carried as a Gaussian (mean, variance).  At each step
    the previous hidden state and the input are treated as one concatenated
    layer with keep probability ``p_hid`` on the hidden block and ``p_in`` on
    the input block.  Returns output means ``(N, T, n_out)``; with
    ``return_trace`` also the :class:`FdTrace` needed by the backward pass.
    """
    inputs = _check_batch(params, inputs)
    f_h, f_y = TransferKind.parse(f_h), TransferKind.parse(f_y)
    N, T, _ = inputs.shape
    H, O = params.n_hidden, params.n_out
    dtype = np.result_type(params.dtype, inputs.dtype)
    p_in, p_hid, p_out = cfg.p_in, cfg.p_hid, cfg.p_out

    # the input block has zero variance, so its contribution is precomputed
    in_mean, in_var = presynaptic_arrays(inputs, np.zeros_like(inputs), params.W_in, params.b_h, p_in)
    W_rec_sq = params.W_rec * params.W_rec

    h_mean = np.empty((N, T + 1, H), dtype=dtype)
    h_var = np.empty((N, T + 1, H), dtype=dtype)
    h_mean[:, 0] = params.h0
    h_var[:, 0] = 0.0
    if return_trace:
        dh = tuple(np.empty((N, T, H), dtype=dtype) for _ in range(4))

    for t in range(T):
        hm, hv = h_mean[:, t], h_var[:, t]
        a_mean = p_hid * (hm @ params.W_rec) + in_mean[:, t]
        a_var = (p_hid * (1.0 - p_hid) * hm * hm + p_hid * hv) @ W_rec_sq + in_var[:, t]
        if return_trace:
            m, s, *partials = transfer_moments_with_grads(a_mean, a_var, f_h)
            for store, part in zip(dh, partials):
                store[:, t] = part
        else:
            m, s = transfer_arrays(a_mean, a_var, f_h)
        h_mean[:, t + 1] = m
        h_var[:, t + 1] = s

    hm_all, hv_all = h_mean[:, 1:], h_var[:, 1:]
    if cfg.fd_final_layer:
        o_mean, o_var = presynaptic_arrays(hm_all, hv_all, params.W_out, params.b_y, p_out)
        if return_trace:
            y, _, *dy = transfer_moments_with_grads(o_mean, o_var, f_y)
        else:
            y, _ = transfer_arrays(o_mean, o_var, f_y)
    else:
        # ordinary output layer on the hidden means; hidden variance is ignored
        o_mean = hm_all @ params.W_out + params.b_y
        o_var = None
        y = transfer_point(o_mean, f_y)
        dy = ()
    y = np.asarray(y, dtype=dtype)
    if not return_trace:
        return y
    return y, FdTrace(h_mean, h_var, dh, o_mean, o_var, tuple(dy))


def hidden_moments(params: RnnParams, cfg: DropoutConfig, f_h, inputs):
    """Hidden-state means and variances ``(N, T, H)`` for steps 1..T."""
    _, trace = forward_fd(params, cfg, f_h, TransferKind.IDENTITY, inputs, return_trace=True)
    return trace.h_mean[:, 1:], trace.h_var[:, 1:]


def forward_fd_sampled(params: RnnParams, cfg: DropoutConfig, f_h, f_y, inputs,
                       rng: np.random.Generator) -> np.ndarray:
    """Like :func:`forward_fd` but every pre-synaptic activation is one Gaussian draw.

    Downstream units see the drawn value as a point mass, so hidden states
    carry zero variance.  Draws are independent per unit and time step.
    """
    inputs = _check_batch(params, inputs)
    N, T, _ = inputs.shape
    # bias added inside the loop so that full keep reproduces forward_plain bit for bit
    in_mean, in_var = presynaptic_arrays(inputs, np.zeros_like(inputs), params.W_in, None, cfg.p_in)
    W_rec_sq = params.W_rec * params.W_rec
    p_hid, p_out = cfg.p_hid, cfg.p_out
    h = np.broadcast_to(params.h0, (N, params.n_hidden))
    ys = np.empty((N, T, params.n_out), dtype=np.result_type(params.dtype, inputs.dtype))
    for t in range(T):
        a_mean = in_mean[:, t] + p_hid * (h @ params.W_rec) + params.b_h
        a_var = (p_hid * (1.0 - p_hid) * h * h) @ W_rec_sq + in_var[:, t]
        a = a_mean + rng.standard_normal(a_mean.shape) * np.sqrt(a_var)
        h = transfer_point(a, f_h)
        if cfg.fd_final_layer:
            o_mean, o_var = presynaptic_arrays(h, np.zeros_like(h), params.W_out, params.b_y, p_out)
            o = o_mean + rng.standard_normal(o_mean.shape) * np.sqrt(o_var)
        else:
            o = h @ params.W_out + params.b_y
        ys[:, t] = transfer_point(o, f_y)
    return ys
