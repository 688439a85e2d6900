"""Absorbing-state (masked) discrete diffusion over token sequences.

Time runs from fully masked (``t = 0``) to clean (``t = 1``): a token survives
corruption at time ``t`` with probability ``alpha(t)``.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import ContractError, NumericError
from .layout import LossMode, SegmentLayout, loss_positions
from .tensor import masked_cross_entropy

T_MIN = 1e-3


class LinearSchedule:
    """``alpha(t) = t``."""

    def __call__(self, t):
        return t

    def inverse(self, a):
        return a


LINEAR = LinearSchedule()


def sample_time(rng: np.random.Generator, eps: float = T_MIN, size=None):
    """Draw ``t ~ Uniform(eps, 1]``."""
    return 1.0 - rng.random(size) * (1.0 - eps)


def forward_mask(x0, t: float, schedule, rng: np.random.Generator, mask_id: int, eligible=None) -> np.ndarray:
    """Corrupt ``x0``: each eligible position is kept w.p. ``alpha(t)``, else set to ``mask_id``."""
    x0 = np.asarray(x0, dtype=np.int64)
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t must lie in [0, 1], got {t}")
    if bool((x0 == mask_id).any()):
        raise ContractError("clean data must not contain the MASK id")
    eligible = np.ones(x0.shape, dtype=bool) if eligible is None else np.asarray(eligible, dtype=bool)
    keep = rng.random(x0.shape) < schedule(t)
    return np.where(eligible & ~keep, mask_id, x0)


def stay_masked_prob(t: float, s: float, schedule) -> float:
    a_t, a_s = schedule(t), schedule(s)
    return (1.0 - a_s) / (1.0 - a_t)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of a row-stochastic matrix (inverse CDF)."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    return np.minimum((cdf <= u).sum(axis=-1), probs.shape[-1] - 1)


def reverse_step(xt, t: float, s: float, logits, schedule, rng: np.random.Generator, mask_id: int) -> np.ndarray:
    """One reverse transition from ``t`` to the less corrupted time ``s``.

    Masked positions stay masked w.p. ``(1 - a_s) / (1 - a_t)``; otherwise they
    take a token drawn from ``softmax(logits)`` at that position.
    """
    xt = np.asarray(xt, dtype=np.int64)
    a_t, a_s = schedule(t), schedule(s)
    if not a_s > a_t:
        raise ContractError(f"reverse_step needs alpha(s) > alpha(t), got {a_s} <= {a_t}")
    out = xt.copy()
    masked = np.flatnonzero(xt == mask_id)
    if masked.size == 0:
        return out
    lg = logits.detach().numpy() if torch.is_tensor(logits) else np.asarray(logits, dtype=np.float64)
    rows = lg[masked]
    if not np.isfinite(rows).all():
        raise NumericError("non-finite logits at a masked position")
    stay = (1.0 - a_s) / (1.0 - a_t)
    decode = rng.random(masked.size) >= stay
    rows = rows - rows.max(axis=-1, keepdims=True)
    probs = np.exp(rows)
    probs /= probs.sum(axis=-1, keepdims=True)
    draws = sample_categorical(probs, rng)
    out[masked[decode]] = draws[decode]
    return out


def corrupt_for_training(x0, layout: SegmentLayout, schedule, rng, mask_id: int, eps: float = T_MIN):
    """Mask the response positions of every sample in a packed row.

    Each sample draws its own ``t``. Returns ``(x_t, weights, loss_mask)`` with
    weight ``1/t`` on positions that were masked and 0 elsewhere.
    """
    x0 = np.asarray(x0, dtype=np.int64)
    resp = loss_positions(layout, LossMode.UND)
    sample = layout.sample_ids()
    xt = x0.copy()
    weights = np.zeros(x0.shape)
    for sid in dict.fromkeys(sample.tolist()):
        sel = (sample == sid) & resp
        if not sel.any():
            continue
        t = float(sample_time(rng, eps))
        xt = np.where(sel, forward_mask(x0, t, schedule, rng, mask_id, sel), xt)
        weights[sel & (xt == mask_id)] = 1.0 / t
    return xt, weights, resp


def mdm_loss(x0, model, layout: SegmentLayout, schedule=LINEAR, rng=None, eps: float = T_MIN,
             normalizer: float | None = None) -> torch.Tensor:
    """Monte Carlo estimate of the 1/t-weighted masked-token objective.

    Corruption and loss are restricted to RESPONSE text positions, so passing a
    layout with image/prompt segments gives the conditional (understanding)
    objective. The sum is normalised by the number of response positions.
    """
    from .model import forward_und

    rng = np.random.default_rng() if rng is None else rng
    mask_id = model.cfg.mask_id
    xt, w, lm = corrupt_for_training(x0, layout, schedule, rng, mask_id, eps)
    logits = forward_und(model, xt, layout)
    return masked_cross_entropy(logits, np.asarray(x0), lm, w, normalizer)
