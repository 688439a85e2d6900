"""Dense float64 numerics and gradient utilities.

All math in the package runs on ``torch`` tensors in double precision.
Reverse-mode gradients come from torch's autograd tape; the finite-difference
checker in :func:`grad_check` never touches that tape, so it stays an
independent oracle for it.

Shape conventions (row-major everywhere):

* token sequences are ``[N]`` int64, logits ``[N, V]``
* latent sequences are ``[N_lat, d_lat]``
* batched model inputs carry a leading batch axis ``[B, N, ...]``
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
import torch

from .errors import ContractError, ShapeError

DTYPE = torch.float64


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64) if not torch.is_tensor(x) else x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax with max subtraction."""
    shifted = x - x.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def masked_cross_entropy(
    logits: torch.Tensor,
    targets,
    loss_mask,
    weights=None,
    normalizer: float | None = None,
) -> torch.Tensor:
    """Weighted token NLL averaged over the positions selected by ``loss_mask``.

    Returns ``sum_i mask_i * w_i * -log softmax(logits)_i[target_i] / normalizer``
    where ``normalizer`` defaults to the number of selected positions. An empty
    mask yields an exact zero that still carries a (zero) gradient.
    """
    targets = torch.as_tensor(targets, dtype=torch.long)
    mask = torch.as_tensor(loss_mask, dtype=torch.bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeError(
            f"masked_cross_entropy: logits {tuple(logits.shape)}, targets {tuple(targets.shape)}, "
            f"mask {tuple(mask.shape)}"
        )
    vocab = logits.shape[-1]
    picked = targets[mask]
    if picked.numel() and (int(picked.min()) < 0 or int(picked.max()) >= vocab):
        raise ContractError(f"target id out of vocabulary [0, {vocab})")
    w = torch.ones(targets.shape, dtype=DTYPE) if weights is None else torch.as_tensor(weights, dtype=DTYPE)
    if bool((w < 0).any()):
        raise ContractError("weights must be non-negative")

    count = int(mask.sum())
    if count == 0:
        return (logits * 0.0).sum()
    logp = torch.log_softmax(logits, dim=-1)
    safe_targets = torch.where(mask, targets, torch.zeros_like(targets))
    nll = -logp.gather(-1, safe_targets.unsqueeze(-1)).squeeze(-1)
    total = (nll * w * mask.to(DTYPE)).sum()
    return total / (count if normalizer is None else normalizer)


def masked_mse(pred: torch.Tensor, target: torch.Tensor, loss_mask, normalizer: float | None = None) -> torch.Tensor:
    """Mean over selected rows of the squared L2 distance between ``pred`` and ``target``."""
    if pred.shape != target.shape:
        raise ShapeError(f"masked_mse: {tuple(pred.shape)} vs {tuple(target.shape)}")
    mask = torch.as_tensor(loss_mask, dtype=torch.bool)
    if mask.shape != pred.shape[:-1]:
        raise ShapeError(f"masked_mse: mask {tuple(mask.shape)} does not match rows of {tuple(pred.shape)}")
    count = int(mask.sum())
    if count == 0:
        return (pred * 0.0).sum()
    sq = ((pred - target) ** 2).sum(dim=-1)
    return (sq * mask.to(DTYPE)).sum() / (count if normalizer is None else normalizer)


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. every tensor in ``params``.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    if loss.numel() != 1 or loss.dim() > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = list(params)
    tensors = [params[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {
        n: (torch.zeros_like(t) if g is None else g.detach())
        for n, t, g in zip(names, tensors, grads)
    }


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    max_per_tensor: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` must be a deterministic closure over ``params`` (leaf tensors). For
    each checked element the error is ``|g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)``.
    ``max_per_tensor`` limits the check to a random subset of elements of each
    tensor; ``None`` checks every element.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    analytic = backward(f(), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_per_tensor is not None and flat.numel() > max_per_tensor:
                idx = np.sort(rng.choice(flat.numel(), size=max_per_tensor, replace=False))
            g_ad = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                g_fd = (fp - fm) / (2.0 * eps)
                a = g_ad[i].item()
                err = abs(a - g_fd) / (abs(a) + abs(g_fd) + 1e-12)
                worst = max(worst, err)
    return worst
