"""Rectified flow for continuous latents: interpolation, loss and Euler sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ContractError, NumericError, ShapeError
from .layout import SegmentLayout, prefix_boundary
from .model import MoDTransformer, PackedRow, forward_gen, make_batch, write_cache
from .tensor import DTYPE, masked_mse


def interpolate(noise, data, t: float):
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t must lie in [0, 1], got {t}")
    if tuple(noise.shape) != tuple(data.shape):
        raise ShapeError(f"interpolate: {tuple(noise.shape)} vs {tuple(data.shape)}")
    return (1.0 - t) * noise + t * data


@dataclass(frozen=True)
class EulerPlan:
    n_steps: int = 50
    grid: tuple | None = None

    def __post_init__(self):
        if self.n_steps < 1:
            raise ContractError("n_steps must be positive")
        if self.grid is not None:
            g = np.asarray(self.grid, dtype=np.float64)
            if g.shape != (self.n_steps + 1,) or g[0] != 0.0 or g[-1] != 1.0 or not np.all(np.diff(g) > 0):
                raise ContractError("grid must be strictly increasing from 0 to 1 with n_steps + 1 points")

    def times(self) -> np.ndarray:
        if self.grid is not None:
            return np.asarray(self.grid, dtype=np.float64)
        return np.linspace(0.0, 1.0, self.n_steps + 1)


def euler_integrate(field: Callable, z0, plan: EulerPlan):
    """Integrate ``dz/dt = field(z, t)`` from 0 to 1 on ``plan``'s grid."""
    z = z0
    ts = plan.times()
    for k in range(plan.n_steps):
        z = z + (ts[k + 1] - ts[k]) * field(z, float(ts[k]))
        finite = bool(torch.isfinite(z).all()) if torch.is_tensor(z) else bool(np.isfinite(z).all())
        if not finite:
            raise NumericError(f"non-finite state at Euler step {k}")
    return z


def rf_rows(row_layout: SegmentLayout, latents, rng: np.random.Generator):
    """Noise every latent segment of a row; one ``t ~ U[0,1]`` per segment.

    Returns ``(noisy_latents, target_velocity, times_per_position)``.
    """
    v0 = np.asarray(latents, dtype=np.float64)
    eps = rng.standard_normal(v0.shape)
    times = np.ones(row_layout.total_len)
    t_rows = np.empty(v0.shape[0])
    pos, r = 0, 0
    for seg in row_layout.segments:
        if seg.is_latent:
            t = rng.random()
            times[pos:pos + seg.length] = t
            t_rows[r:r + seg.length] = t
            r += seg.length
        pos += seg.length
    vt = (1.0 - t_rows)[:, None] * eps + t_rows[:, None] * v0
    return vt, v0 - eps, times


def rf_loss(data, prompt, model: MoDTransformer, layout: SegmentLayout, rng: np.random.Generator,
            normalizer: float | None = None) -> torch.Tensor:
    """Velocity-matching loss for the latent rows of ``layout``.

    ``prompt`` holds the ids of every non-latent position in order.
    """
    lat = layout.latent_positions()
    tokens = np.zeros(layout.total_len, dtype=np.int64)
    tokens[~lat] = np.asarray(prompt, dtype=np.int64)
    vt, target, times = rf_rows(layout, data, rng)
    batch = make_batch([PackedRow(layout, tokens, vt, times)], model.cfg.latent_dim)
    _, velocity = model(batch)
    idx = np.flatnonzero(lat)
    pred = velocity[0, idx]
    return masked_mse(pred, torch.from_numpy(target), np.ones(len(idx), dtype=bool), normalizer)


def euler_sample(model: MoDTransformer, prompt, layout: SegmentLayout, plan: EulerPlan,
                 rng: np.random.Generator, use_cache: bool = True, prefix_latents=None) -> torch.Tensor:
    """Generate the active latent block of ``layout`` from Gaussian noise.

    ``prompt`` lists the ids of the non-latent prefix positions. The prefix is
    encoded once into a KV cache and reused at every step unless
    ``use_cache`` is off, in which case every step re-runs the full sequence.
    """
    P = prefix_boundary(layout)
    lat = layout.latent_positions()
    n_active = int(lat[P:].sum())
    if n_active != layout.total_len - P:
        raise ContractError("the active block must consist of latent positions only")
    prompt = np.asarray(prompt, dtype=np.int64)
    z0 = torch.from_numpy(rng.standard_normal((n_active, model.cfg.latent_dim)))

    with torch.no_grad():
        if use_cache:
            prefix_tokens = np.zeros(P, dtype=np.int64)
            prefix_tokens[~lat[:P]] = prompt
            cache = write_cache(model, layout, prefix_tokens, prefix_latents)

            def field(z, t):
                return forward_gen(model, z, t, [], layout, cache)
        else:
            before = torch.zeros((0, model.cfg.latent_dim), dtype=DTYPE) if prefix_latents is None \
                else torch.as_tensor(prefix_latents, dtype=DTYPE)

            def field(z, t):
                return forward_gen(model, torch.cat((before, z)), t, prompt, layout)

        return euler_integrate(field, z0, plan)


def export_latents(path, latents, labels=None) -> None:
    """Write latents as comma-separated rows (optional leading label column)."""
    arr = latents.detach().numpy() if torch.is_tensor(latents) else np.asarray(latents)
    arr = np.atleast_2d(arr)
    header = ",".join(f"z{i}" for i in range(arr.shape[1]))
    if labels is not None:
        arr = np.column_stack([np.asarray(labels, dtype=np.float64), arr])
        header = "label," + header
    np.savetxt(path, arr, delimiter=",", header=header, comments="", fmt="%.17g")
