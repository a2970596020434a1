"""rmsprop with Nesterov momentum, gradient clipping and recurrent weight
initialisation by spectral radius."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

CLIP_THRESHOLD = 225.0


def clip_gradient(g: np.ndarray, threshold: float = CLIP_THRESHOLD) -> np.ndarray:
    """Rescale ``g`` so its global L2 norm is at most ``threshold``."""
    if threshold <= 0:
        raise ValueError("clipping threshold must be positive")
    g = np.asarray(g)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient entries")
    norm = float(np.sqrt(np.sum(np.square(g, dtype=np.float64))))
    if norm <= threshold:
        return g
    return g * (threshold / norm)


@dataclass
class RmsPropState:
    step_rate: float
    decay: float
    momentum: float
    epsilon: float = 1e-8
    clip_threshold: float | None = CLIP_THRESHOLD
    sq_avg: np.ndarray | None = None
    velocity: np.ndarray | None = None
    n_steps: int = 0

    def __post_init__(self):
        if self.step_rate <= 0:
            raise ValueError("step_rate must be positive")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def ensure(self, theta: np.ndarray) -> None:
        if self.sq_avg is None:
            self.sq_avg = np.zeros_like(theta)
        if self.velocity is None:
            self.velocity = np.zeros_like(theta)


def rmsprop_nesterov_step(state: RmsPropState, theta: np.ndarray,
                          grad_fn: Callable[[np.ndarray], np.ndarray]):
    """One update; returns ``(new_theta, grad_fn_output)``.

    The gradient is taken at the look-ahead point ``theta + momentum *
    velocity``, clipped, and normalised by the running root mean square of
    past gradients.  ``grad_fn`` may return either the gradient or a
    ``(loss, gradient)`` pair.  On a non-finite update the state is left
    untouched and ``FloatingPointError`` is raised.
    """
    theta = np.asarray(theta)
    state.ensure(theta)
    lookahead = theta + state.momentum * state.velocity
    out = grad_fn(lookahead)
    g = out[1] if isinstance(out, tuple) else out
    if state.clip_threshold is not None:
        g = clip_gradient(g, state.clip_threshold)
    elif not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient entries")
    sq_avg = state.decay * state.sq_avg + (1.0 - state.decay) * g * g
    velocity = state.momentum * state.velocity - state.step_rate * g / np.sqrt(sq_avg + state.epsilon)
    new_theta = theta + velocity
    if not np.all(np.isfinite(new_theta)):
        raise FloatingPointError("non-finite parameter update")
    state.sq_avg = sq_avg.astype(theta.dtype, copy=False)
    state.velocity = velocity.astype(theta.dtype, copy=False)
    state.n_steps += 1
    return new_theta.astype(theta.dtype, copy=False), out


# -- spectral radius ----------------------------------------------------------

DENSE_LIMIT = 64


def _dense_radius(W: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(W)))) if W.size else 0.0


def spectral_radius(W, tol: float = 1e-14, max_iter: int = 500) -> float:
    """Largest absolute eigenvalue of a square matrix.

    Small matrices go straight to a dense eigensolver.  Larger ones try power
    iteration first; if the iterates do not settle (complex or tied dominant
    eigenvalues, defective matrices) the dense solver is used instead.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValueError("matrix has non-finite entries")
    n = W.shape[0]
    if n <= DENSE_LIMIT:
        return _dense_radius(W)
    v = np.random.default_rng(0).standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = W @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return _dense_radius(W)
        rq = float(v @ w)
        v_new = w / norm
        # converged to a real dominant eigenvector: W v = rq v
        if abs(abs(rq) - norm) <= tol * norm and abs(abs(rq) - est) <= tol * norm:
            return abs(rq)
        est = abs(rq)
        v = v_new
    return _dense_radius(W)


# -- initialisation -------------------------------------------------------------


@dataclass(frozen=True)
class InitSpec:
    rho_target: float
    sigma2: float
    nu: int | None = None
    b_y_const: float = -0.8

    def __post_init__(self):
        if self.rho_target <= 0:
            raise ValueError("rho_target must be positive")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.nu is not None and self.nu < 1:
            raise ValueError("nu must be a positive integer")


def sparsify_incoming(W: np.ndarray, nu: int, rng: np.random.Generator) -> np.ndarray:
    """Keep a random subset of ``nu`` incoming weights per unit (column)."""
    n_rows, n_cols = W.shape
    if nu >= n_rows:
        return W
    mask = np.zeros_like(W, dtype=bool)
    for j in range(n_cols):
        mask[rng.choice(n_rows, size=nu, replace=False), j] = True
    return np.where(mask, W, 0.0)


def init_recurrent(spec: InitSpec, n_hidden: int, rng: np.random.Generator, max_tries: int = 10) -> np.ndarray:
    """Gaussian recurrent matrix, optionally sparse, scaled to ``spec.rho_target``.

    Sparsification happens before scaling so both constraints hold.
    """
    if spec.nu is not None and spec.nu > n_hidden:
        raise ValueError(f"nu={spec.nu} exceeds the number of hidden units {n_hidden}")
    for _ in range(max_tries):
        W = rng.normal(0.0, np.sqrt(spec.sigma2), size=(n_hidden, n_hidden))
        if spec.nu is not None:
            W = sparsify_incoming(W, spec.nu, rng)
        rho = spectral_radius(W)
        if rho > 1e-12:
            return W * (spec.rho_target / rho)
    raise RuntimeError("could not draw a recurrent matrix with nonzero spectral radius")
