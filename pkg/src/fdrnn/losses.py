"""Training/evaluation objectives and the single-unit losses used to study
how a unit's pre-synaptic variance enters the gradient."""
from __future__ import annotations

import enum
import math

import numpy as np

from .moments import TransferKind, transfer_moments_with_grads

PROB_EPS = 1e-6


class LossKind(enum.Enum):
    SQUARED_ON_MEAN = "squared"
    GAUSSIAN_NLL_ON_MOMENTS = "gaussian"
    BERNOULLI_ON_MEAN = "bernoulli"

    @classmethod
    def parse(cls, value: "LossKind | str") -> "LossKind":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


def _clamp_probs(y):
    y = np.asarray(y)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite predicted probabilities")
    if np.any(y < 0) or np.any(y > 1):
        raise ValueError("predicted probabilities must lie in [0, 1]")
    return np.clip(y, PROB_EPS, 1.0 - PROB_EPS)


def sequence_bce_nll(output_means, targets, mask=None, return_grad: bool = False):
    """Average next-step Bernoulli negative log-likelihood.

    ``output_means[:, t-1]`` is the predicted probability of each note at step
    ``t`` and is scored against ``targets[:, t]``.  The summed cross-entropy
    over notes is averaged over the ``T - 1`` predictions and the ``N``
    sequences.  Probabilities are clamped to ``[1e-6, 1 - 1e-6]``.

    ``mask`` (``N x T``, optional) marks which target steps count; with a mask
    the normalisation is the number of counted steps instead of ``N (T-1)``.
    With ``return_grad`` the gradient with respect to ``output_means`` is
    returned as well (zero where clamping is active).
    """
    y = np.asarray(output_means)
    x = np.asarray(targets)
    if y.shape != x.shape or y.ndim != 3:
        raise ValueError(f"outputs {y.shape} and targets {x.shape} must be equal (N, T, D) arrays")
    N, T, _ = y.shape
    if T < 2:
        raise ValueError("need at least two time steps for next-step prediction")
    yc = _clamp_probs(y[:, :-1])
    xt = x[:, 1:]
    ll = xt * np.log(yc) + (1.0 - xt) * np.log1p(-yc)
    if mask is None:
        weights = np.full((N, T - 1, 1), 1.0 / (N * (T - 1)))
    else:
        m = np.asarray(mask, dtype=float)[:, 1:, None]
        weights = m / max(m.sum(), 1.0)
    loss = -float(np.sum(ll * weights))
    if not return_grad:
        return loss
    grad = np.zeros_like(y)
    inside = (y[:, :-1] > PROB_EPS) & (y[:, :-1] < 1.0 - PROB_EPS)
    g = -(xt / yc - (1.0 - xt) / (1.0 - yc)) * weights
    grad[:, :-1] = np.where(inside, g, 0.0)
    return loss, grad


def per_sequence_nll(outputs: list[np.ndarray], sequences: list[np.ndarray]) -> float:
    """Mean over sequences of each sequence's per-step next-step NLL.

    Each sequence is scored unsplit; sequences shorter than two steps are
    skipped since they contain no prediction.
    """
    vals = []
    for y, x in zip(outputs, sequences):
        if len(x) < 2:
            continue
        vals.append(sequence_bce_nll(y[None], x[None]))
    if not vals:
        raise ValueError("no sequence with at least two time steps")
    return float(np.mean(vals))


def unit_loss(mean: float, var: float, target: float, kind: LossKind | str):
    """Loss of a single unit from its pre-synaptic moments.

    Returns ``(loss, dloss_dmean, dloss_dvar)`` where the partials are taken
    with respect to the pre-synaptic mean and variance.  For the squared and
    Gaussian losses the unit is linear (``y = a``); for the Bernoulli loss the
    unit is a sigmoid and the cross-entropy is applied to its expected output.
    """
    kind = LossKind.parse(kind)
    mean = float(mean)
    var = float(var)
    if var < 0:
        raise ValueError("variance must be nonnegative")
    if kind is LossKind.SQUARED_ON_MEAN:
        r = mean - target
        return r * r, 2.0 * r, 0.0
    if kind is LossKind.GAUSSIAN_NLL_ON_MOMENTS:
        if var <= 0:
            raise ValueError("Gaussian likelihood needs a strictly positive variance")
        r = mean - target
        loss = r * r / (2.0 * var) + 0.5 * math.log(2.0 * math.pi * var)
        return loss, r / var, -r * r / (2.0 * var * var) + 0.5 / var
    m, _, dm_mu, dm_v, _, _ = transfer_moments_with_grads(np.array(mean), np.array(var), TransferKind.SIGMOID)
    m = float(m)
    if not 0.0 < m < 1.0:
        raise ValueError(f"expected output {m} saturated; cross-entropy undefined")
    loss = -(target * math.log(m) + (1.0 - target) * math.log1p(-m))
    dl_dm = -(target / m - (1.0 - target) / (1.0 - m))
    return loss, dl_dm * float(dm_mu), dl_dm * float(dm_v)


FIELD_COLUMNS = ("mean", "var", "loss", "dloss_dmean", "dloss_dvar")


def loss_field(kind: LossKind | str, target: float, mean_grid, var_grid) -> np.ndarray:
    """Dense table of the unit loss over a (mean, variance) grid.

    Returns an array of shape ``(len(mean_grid) * len(var_grid), 5)`` with
    columns :data:`FIELD_COLUMNS`; the variance varies fastest.
    """
    kind = LossKind.parse(kind)
    mean_grid = np.asarray(mean_grid, dtype=float)
    var_grid = np.asarray(var_grid, dtype=float)
    if np.any(var_grid < 0):
        raise ValueError("variance grid must be nonnegative")
    rows = [(m, v, *unit_loss(m, v, target, kind)) for m in mean_grid for v in var_grid]
    return np.array(rows, dtype=float).reshape(-1, len(FIELD_COLUMNS))
