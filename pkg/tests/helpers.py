"""Shared builders for the test suite."""

import numpy as np

from moddiff.layout import Modality, Role, Segment, SegmentLayout
from moddiff.model import ModelConfig, MoDTransformer

T, E, Z = Modality.TEXT, Modality.VIS_ENC, Modality.VIS_LAT
P, R, C, G = Role.PROMPT, Role.RESPONSE, Role.CONDITION, Role.TARGET


def tiny_model(seed=0, std=0.3, **kw) -> MoDTransformer:
    cfg = dict(d_model=16, n_layers=2, n_heads=2, d_head=8, vocab_size=12, latent_dim=2, rng_seed=seed,
               init_std=std, time_freqs=4)
    cfg.update(kw)
    return MoDTransformer(ModelConfig(**cfg))


def small_model(seed=0, std=0.1, **kw) -> MoDTransformer:
    cfg = dict(d_model=32, n_layers=2, n_heads=2, d_head=16, vocab_size=66, latent_dim=2, rng_seed=seed,
               init_std=std, time_freqs=8)
    cfg.update(kw)
    return MoDTransformer(ModelConfig(**cfg))


def random_layout(rng: np.random.Generator, kind: str) -> SegmentLayout:
    """One layout of the given family with a trailing active block.

    ``und``: [VIS_ENC, PROMPT, RESPONSE...]; ``gen``: [PROMPT, VIS_LAT];
    ``interleaved``: alternating prompt/latent turns; ``packed``: finished
    samples in front of a sample with an active block.
    """
    n = lambda lo=1, hi=6: int(rng.integers(lo, hi + 1))
    if kind == "und":
        segs = [Segment(E, C, n()), Segment(T, P, n())]
        segs += [Segment(T, R, n()) for _ in range(int(rng.integers(0, 3)))]
        segs.append(Segment(T, R, n(), active=True))
    elif kind == "gen":
        segs = [Segment(T, P, n()), Segment(Z, G, n(), active=True)]
    elif kind == "interleaved":
        turns = int(rng.integers(2, 4))
        segs = []
        for k in range(turns):
            segs.append(Segment(T, P, n(), turn_index=k))
            segs.append(Segment(Z, G, n(), turn_index=k, active=k == turns - 1))
    elif kind == "packed":
        segs = []
        n_done = int(rng.integers(1, 3))
        for sid in range(n_done):
            segs += [Segment(T, P, n(), sid), Segment(T, R, n(), sid)]
        last = n_done
        if rng.random() < 0.5:
            segs += [Segment(E, C, n(), last), Segment(T, P, n(), last), Segment(T, R, n(), last, active=True)]
        else:
            segs += [Segment(T, P, n(), last), Segment(Z, G, n(), last, active=True)]
    else:
        raise ValueError(kind)
    return SegmentLayout(segs)


def fill(layout: SegmentLayout, rng: np.random.Generator, vocab: int, latent_dim: int):
    """Random non-special token ids (zeros at latent positions) and latents."""
    lat = layout.latent_positions()
    tokens = np.where(lat, 0, rng.integers(0, vocab - 2, layout.total_len))
    latents = rng.standard_normal((int(lat.sum()), latent_dim))
    return tokens, latents


def cache_pair(model, layout: SegmentLayout, tokens, latents, t: float = 0.37):
    """Active-block outputs computed with a prefix cache and by full recomputation."""
    from moddiff.layout import prefix_boundary
    from moddiff.model import forward_gen, forward_und, write_cache

    p = prefix_boundary(layout)
    lat = layout.latent_positions()
    n_prefix_lat = int(lat[:p].sum())
    cache = write_cache(model, layout, tokens[:p], latents[:n_prefix_lat] if n_prefix_lat else None)
    if not lat.any():
        return forward_und(model, tokens[p:], layout, cache), forward_und(model, tokens, layout)[p:]
    text = ~lat
    cached = forward_gen(model, latents[n_prefix_lat:], t, tokens[p:][text[p:]], layout, cache)
    full = forward_gen(model, latents, t, tokens[text], layout)
    return cached, full
