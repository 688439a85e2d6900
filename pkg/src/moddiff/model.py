"""Shared-attention transformer with an understanding and a generation expert.

Attention projections are shared by both experts. Everything else that touches
a token (input embedding, layer norms, feed-forward, output head) is routed by
modality: text and visual-encoder positions go through the understanding
expert, visual-latent positions through the generation expert, which also
owns the time embedding.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import CacheError, ContractError, ShapeError
from .layout import Modality, Role, Segment, SegmentLayout, build_mask, prefix_boundary
from .tensor import DTYPE


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_head: int = 32
    vocab_size: int = 66  # 64 content ids + MASK + EOS
    latent_dim: int = 2
    max_seq_len: int = 4096
    rng_seed: int = 0
    ffn_mult: int = 4
    shared_norms: bool = False
    rope_base: float = 10000.0
    abs_pos: bool = False  # add fixed sinusoidal features of the in-sample position to every embedding
    init_std: float = 0.02
    time_freqs: int = 16

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ContractError(f"d_model {self.d_model} != n_heads*d_head {self.n_heads * self.d_head}")
        if self.vocab_size < 3:
            raise ContractError("vocab_size must leave room for MASK and EOS")
        if self.d_head % 2:
            raise ContractError("rotary embedding needs an even d_head")

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 2

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# inputs


@dataclass
class PackedRow:
    """One packed sequence: a layout plus its contents.

    ``tokens`` has one id per position (ignored at latent positions),
    ``latents`` one row per latent position in order, ``times`` one diffusion
    time per position (only read at latent positions).
    """

    layout: SegmentLayout
    tokens: np.ndarray
    latents: np.ndarray | None = None
    times: np.ndarray | None = None

    def __post_init__(self):
        n = self.layout.total_len
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.shape != (n,):
            raise ShapeError(f"row has {self.tokens.shape[0]} tokens for a layout of length {n}")
        n_lat = int(self.layout.latent_positions().sum())
        if self.latents is None:
            self.latents = np.zeros((n_lat, 0))
        self.latents = np.asarray(self.latents, dtype=np.float64)
        if self.latents.shape[0] != n_lat:
            raise ShapeError(f"row has {self.latents.shape[0]} latent rows for {n_lat} latent positions")
        self.times = np.ones(n) if self.times is None else np.asarray(self.times, dtype=np.float64)


@dataclass
class Batch:
    tokens: torch.Tensor      # [B, N] int64
    latents: torch.Tensor     # [B, N, d_lat], zero at text positions
    times: torch.Tensor       # [B, N]
    is_latent: torch.Tensor   # [B, N] bool
    positions: torch.Tensor   # [B, N] int64
    mask: torch.Tensor        # [B, N, P + N] bool
    layouts: list = field(default_factory=list)
    offset: int = 0           # cached prefix length


def pad_layout(layout: SegmentLayout, length: int) -> SegmentLayout:
    """Append an isolated filler sample so the layout spans ``length`` positions."""
    extra = length - layout.total_len
    if extra < 0:
        raise ShapeError(f"layout of length {layout.total_len} does not fit in {length}")
    if extra == 0:
        return layout
    sid = max((s.sample_id for s in layout.segments), default=-1) + 1
    return layout + SegmentLayout([Segment(Modality.TEXT, Role.PROMPT, extra, sid)])


def make_batch(rows: Sequence[PackedRow], latent_dim: int) -> Batch:
    n = max(r.layout.total_len for r in rows)
    B = len(rows)
    tokens = np.zeros((B, n), dtype=np.int64)
    latents = np.zeros((B, n, latent_dim))
    times = np.ones((B, n))
    is_lat = np.zeros((B, n), dtype=bool)
    positions = np.zeros((B, n), dtype=np.int64)
    mask = np.zeros((B, n, n), dtype=bool)
    layouts = []
    for b, row in enumerate(rows):
        lay = pad_layout(row.layout, n)
        layouts.append(row.layout)
        m = row.layout.total_len
        lat = row.layout.latent_positions()
        tokens[b, :m] = np.where(lat, 0, row.tokens)
        if lat.any():
            latents[b, np.flatnonzero(lat)] = row.latents
        times[b, :m] = row.times
        is_lat[b, :m] = lat
        positions[b] = lay.position_ids()
        mask[b] = build_mask(lay).allowed
    return Batch(
        torch.from_numpy(tokens), torch.from_numpy(latents), torch.from_numpy(times),
        torch.from_numpy(is_lat), torch.from_numpy(positions), torch.from_numpy(mask), layouts,
    )


# ---------------------------------------------------------------------------
# KV cache


@dataclass(frozen=True)
class KVCache:
    """Keys/values of a fixed prefix, one ``[H, P, d_head]`` pair per layer."""

    keys: tuple
    values: tuple
    layout: SegmentLayout
    prefix_len: int
    fingerprint: str
    tokens: np.ndarray | None = None  # prefix ids, kept for full-recompute baselines

    def equal(self, other: "KVCache") -> bool:
        return (
            self.prefix_len == other.prefix_len
            and self.fingerprint == other.fingerprint
            and all(torch.equal(a, b) for a, b in zip(self.keys + self.values, other.keys + other.values))
        )


def _empty_cache(model: "MoDTransformer") -> KVCache:
    cfg = model.cfg
    z = torch.zeros(cfg.n_heads, 0, cfg.d_head, dtype=DTYPE)
    layers = tuple(z for _ in range(cfg.n_layers))
    return KVCache(layers, layers, SegmentLayout([]), 0, SegmentLayout([]).fingerprint(), np.zeros(0, np.int64))


# ---------------------------------------------------------------------------
# modules


def _rope(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    # x: [B, H, N, dh]; positions: [B, N]
    dh = x.shape[-1]
    inv = base ** (-torch.arange(0, dh, 2, dtype=DTYPE) / dh)
    ang = positions.to(DTYPE)[:, None, :, None] * inv  # [B, 1, N, dh/2]
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


def _position_features(positions: torch.Tensor, d: int, base: float = 10000.0) -> torch.Tensor:
    inv = base ** (-torch.arange(0, d, 2, dtype=DTYPE) / d)
    ang = positions.to(DTYPE)[..., None] * inv
    return torch.stack((torch.sin(ang), torch.cos(ang)), dim=-1).flatten(-2)


def _time_features(t: torch.Tensor, n_freqs: int) -> torch.Tensor:
    freqs = torch.exp(-math.log(1000.0) * torch.arange(n_freqs, dtype=DTYPE) / n_freqs)
    ang = 1000.0 * t[..., None] * freqs
    return torch.cat((torch.sin(ang), torch.cos(ang)), dim=-1)


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int):
        super().__init__()
        self.up = nn.Linear(d, mult * d)
        self.down = nn.Linear(mult * d, d)

    def forward(self, x):
        return self.down(torch.nn.functional.gelu(self.up(x)))


class Expert(nn.Module):
    """Per-modality parameters of one transformer layer."""

    def __init__(self, d: int, mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, mult)


class SharedAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)

    def forward(self, x, positions, mask, past=None):
        B, N, _ = x.shape
        H, dh = self.cfg.n_heads, self.cfg.d_head
        q = self.wq(x).view(B, N, H, dh).transpose(1, 2)
        k = self.wk(x).view(B, N, H, dh).transpose(1, 2)
        v = self.wv(x).view(B, N, H, dh).transpose(1, 2)
        q = _rope(q, positions, self.cfg.rope_base)
        k = _rope(k, positions, self.cfg.rope_base)
        new_kv = (k, v)
        if past is not None:
            pk, pv = past
            k = torch.cat((pk.unsqueeze(0).expand(B, -1, -1, -1), k), dim=2)
            v = torch.cat((pv.unsqueeze(0).expand(B, -1, -1, -1), v), dim=2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        scores = scores.masked_fill(~mask[:, None], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, H * dh)
        return self.wo(out), new_kv


class Layer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = SharedAttention(cfg)
        self.und = Expert(cfg.d_model, cfg.ffn_mult)
        self.gen = Expert(cfg.d_model, cfg.ffn_mult)
        if cfg.shared_norms:
            self.gen.norm1 = self.und.norm1
            self.gen.norm2 = self.und.norm2


def _route(x: torch.Tensor, is_lat: torch.Tensor, f_und, f_gen) -> torch.Tensor:
    """Apply ``f_gen`` at latent positions and ``f_und`` everywhere else."""
    n_lat = int(is_lat.sum())
    if n_lat == 0:
        return f_und(x)
    if n_lat == is_lat.numel():
        return f_gen(x)
    iu = (~is_lat).nonzero(as_tuple=True)
    ig = is_lat.nonzero(as_tuple=True)
    yu = f_und(x[iu])
    yg = f_gen(x[ig])
    out = yu.new_zeros(is_lat.shape + yu.shape[-1:])
    return out.index_put(iu, yu).index_put(ig, yg)


class MoDTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)                   # understanding expert
        self.lat_in = nn.Linear(cfg.latent_dim, d)                       # generation expert
        self.time_mlp = nn.Sequential(nn.Linear(2 * cfg.time_freqs, d), nn.SiLU(), nn.Linear(d, d))
        self.layers = nn.ModuleList(Layer(cfg) for _ in range(cfg.n_layers))
        self.und_norm = nn.LayerNorm(d)
        self.gen_norm = self.und_norm if cfg.shared_norms else nn.LayerNorm(d)
        self.und_head = nn.Linear(d, cfg.vocab_size)
        self.gen_head = nn.Linear(d, cfg.latent_dim)
        self.to(DTYPE)
        self.reset_parameters()
        self.stats = {"forward_calls": 0, "positions": 0}

    def reset_parameters(self, std: float | None = None, seed: int | None = None):
        std = self.cfg.init_std if std is None else std
        g = torch.Generator().manual_seed(self.cfg.rng_seed if seed is None else seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if isinstance(self.get_submodule(name.rsplit(".", 1)[0]), nn.LayerNorm):
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=g, dtype=DTYPE) * std)

    def zero_heads(self, und: bool = True, gen: bool = True):
        with torch.no_grad():
            for head, on in ((self.und_head, und), (self.gen_head, gen)):
                if on:
                    head.weight.zero_()
                    head.bias.zero_()

    # parameter groups used by tests and the training harness
    def shared_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if ".attn." in n]

    def expert_parameter_names(self, expert: str) -> list[str]:
        if expert == "und":
            keys = ("tok_emb", ".und.", "und_norm", "und_head")
        else:
            keys = ("lat_in", "time_mlp", ".gen.", "gen_norm", "gen_head")
        return [n for n, _ in self.named_parameters() if any(k in n for k in keys)]

    # ------------------------------------------------------------------
    def _embed(self, batch: Batch) -> torch.Tensor:
        is_lat = batch.is_latent

        def und(idx_tokens):
            return self.tok_emb(idx_tokens)

        def gen(lat_and_t):
            lat, t = lat_and_t[..., :-1], lat_and_t[..., -1]
            return self.lat_in(lat) + self.time_mlp(_time_features(t, self.cfg.time_freqs))

        n_lat = int(is_lat.sum())
        if n_lat == 0:
            return self.tok_emb(batch.tokens)
        packed = torch.cat((batch.latents, batch.times[..., None]), dim=-1)
        if n_lat == is_lat.numel():
            return gen(packed)
        iu = (~is_lat).nonzero(as_tuple=True)
        ig = is_lat.nonzero(as_tuple=True)
        yu = und(batch.tokens[iu])
        yg = gen(packed[ig])
        out = yu.new_zeros(is_lat.shape + (self.cfg.d_model,))
        return out.index_put(iu, yu).index_put(ig, yg)

    def run(self, batch: Batch, cache: KVCache | None = None, collect_kv: bool = False):
        """Forward a batch. Returns ``(logits, velocity, kv)``.

        ``logits`` ``[B, N, V]`` is only meaningful at non-latent positions and
        ``velocity`` ``[B, N, d_lat]`` only at latent positions; the other rows
        are zero and never read. ``kv`` holds the per-layer keys/values of the
        batch positions when ``collect_kv`` is set.
        """
        B, N = batch.tokens.shape
        if batch.offset + N > self.cfg.max_seq_len:
            raise ContractError(f"sequence length {batch.offset + N} exceeds max_seq_len {self.cfg.max_seq_len}")
        self.stats["forward_calls"] += 1
        self.stats["positions"] += B * N
        is_lat = batch.is_latent
        h = self._embed(batch)
        if self.cfg.abs_pos:
            h = h + _position_features(batch.positions, self.cfg.d_model)
        kvs = []
        for i, layer in enumerate(self.layers):
            past = None if cache is None else (cache.keys[i], cache.values[i])
            x = _route(h, is_lat, layer.und.norm1, layer.gen.norm1)
            a, kv = layer.attn(x, batch.positions, batch.mask, past)
            if collect_kv:
                kvs.append(kv)
            h = h + a
            x = _route(h, is_lat, layer.und.norm2, layer.gen.norm2)
            h = h + _route(x, is_lat, layer.und.ffn, layer.gen.ffn)
        logits = None
        velocity = None
        if bool((~is_lat).any()):
            logits = _route(h, is_lat, lambda z: self.und_head(self.und_norm(z)),
                            lambda z: z.new_zeros(z.shape[:-1] + (self.cfg.vocab_size,)))
        if bool(is_lat.any()):
            velocity = _route(h, is_lat, lambda z: z.new_zeros(z.shape[:-1] + (self.cfg.latent_dim,)),
                              lambda z: self.gen_head(self.gen_norm(z)))
        if logits is None:
            logits = h.new_zeros(B, N, self.cfg.vocab_size)
        if velocity is None:
            velocity = h.new_zeros(B, N, self.cfg.latent_dim)
        return logits, velocity, kvs

    def forward(self, batch: Batch, cache: KVCache | None = None):
        logits, velocity, _ = self.run(batch, cache)
        return logits, velocity


# ---------------------------------------------------------------------------
# single-sequence entry points


def _cached_batch(model: MoDTransformer, row: PackedRow, cache: KVCache | None) -> Batch:
    """Batch of one row, restricted to positions after the cached prefix."""
    cfg = model.cfg
    layout = row.layout
    P = 0 if cache is None else cache.prefix_len
    if cache is not None and P > 0:
        if P > layout.total_len or layout.fingerprint(P) != cache.fingerprint:
            raise CacheError("cache fingerprint does not match the layout prefix")
    full = make_batch([row], cfg.latent_dim)
    if P == 0:
        return full
    mask = torch.from_numpy(build_mask(layout).allowed[P:].copy())
    return Batch(
        full.tokens[:, P:], full.latents[:, P:], full.times[:, P:], full.is_latent[:, P:],
        full.positions[:, P:], mask[None], [layout], P,
    )


def _row_from_parts(layout: SegmentLayout, start: int, tokens, latents, times) -> PackedRow:
    """Assemble a full-length row whose positions before ``start`` are placeholders."""
    n = layout.total_len
    lat = layout.latent_positions()
    full_tokens = np.zeros(n, dtype=np.int64)
    text_idx = np.flatnonzero(~lat[start:]) + start
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.shape[0] != text_idx.shape[0]:
        raise ShapeError(f"expected {text_idx.shape[0]} token ids, got {tokens.shape[0]}")
    full_tokens[text_idx] = tokens
    n_lat_total = int(lat.sum())
    n_lat_before = int(lat[:start].sum())
    dl = 0 if latents is None else np.asarray(latents).shape[-1]
    full_lat = np.zeros((n_lat_total, dl))
    if latents is not None:
        latents = np.asarray(latents, dtype=np.float64)
        if latents.shape[0] != n_lat_total - n_lat_before:
            raise ShapeError(f"expected {n_lat_total - n_lat_before} latent rows, got {latents.shape[0]}")
        full_lat[n_lat_before:] = latents
    elif n_lat_total - n_lat_before:
        raise ShapeError("layout has latent positions but no latents were given")
    return PackedRow(layout, full_tokens, full_lat if dl else None, times)


def forward_und(model: MoDTransformer, tokens, layout: SegmentLayout, cache: KVCache | None = None) -> torch.Tensor:
    """Categorical logits ``[N, V]`` for the positions not covered by ``cache``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.cfg.vocab_size):
        raise ContractError("token id out of vocabulary")
    P = 0 if cache is None else cache.prefix_len
    if layout.total_len > model.cfg.max_seq_len:
        raise ContractError(f"sequence length {layout.total_len} exceeds max_seq_len {model.cfg.max_seq_len}")
    if tokens.shape[0] != layout.total_len - P:
        raise ShapeError(f"got {tokens.shape[0]} tokens for {layout.total_len - P} uncached positions")
    full = np.zeros(layout.total_len, dtype=np.int64)
    full[P:] = tokens
    lat = layout.latent_positions()
    if lat.any():
        raise ContractError("forward_und layouts must not contain latent segments; use forward_gen")
    row = PackedRow(layout, full)
    logits, _ = model(_cached_batch(model, row, cache), cache)
    return logits[0]


def forward_gen(
    model: MoDTransformer,
    latents,
    t: float,
    prompt_tokens,
    layout: SegmentLayout,
    cache: KVCache | None = None,
) -> torch.Tensor:
    """Velocity ``[N_lat, d_lat]`` for the latent rows not covered by ``cache``.

    ``prompt_tokens`` lists the ids of every uncached non-latent position in
    order. Latents in front of the active block (earlier turns) are treated as
    clean (time 1); the remaining latents are at time ``t``.
    """
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t must lie in [0, 1], got {t}")
    latents = torch.as_tensor(latents, dtype=DTYPE) if not torch.is_tensor(latents) else latents
    if not bool(torch.isfinite(latents).all()):
        raise ContractError("latents must be finite")
    P = 0 if cache is None else cache.prefix_len
    active_start = prefix_boundary(layout) if any(s.active for s in layout.segments) else 0
    times = np.ones(layout.total_len)
    lat_mask = layout.latent_positions()
    noisy = lat_mask.copy()
    noisy[:active_start] = False
    times[noisy] = t
    row = _row_from_parts(layout, P, prompt_tokens, np.zeros((latents.shape[0], model.cfg.latent_dim)), times)
    batch = _cached_batch(model, row, cache)
    # splice the (possibly grad-carrying) latents in as a tensor
    lat_idx = batch.is_latent[0].nonzero(as_tuple=True)[0]
    lat_full = batch.latents.clone()
    lat_full = lat_full.index_put((torch.zeros_like(lat_idx), lat_idx), latents)
    batch.latents = lat_full
    _, velocity = model(batch, cache)
    rows = velocity[0, lat_idx]
    first_noisy = int(lat_mask[P:active_start].sum()) if active_start > P else 0
    return rows[first_noisy:]


def write_cache(
    model: MoDTransformer,
    layout: SegmentLayout,
    tokens,
    latents=None,
) -> KVCache:
    """Run the fixed prefix once and keep its keys/values.

    If ``layout`` designates active segments only the part before them is
    cached; ``tokens`` (and ``latents``) must cover exactly that prefix.
    Prefix latents are treated as clean (time 1).
    """
    P = prefix_boundary(layout) if any(s.active for s in layout.segments) else layout.total_len
    prefix = layout.head(P)
    if P == 0:
        return _empty_cache(model)
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape != (P,):
        raise ShapeError(f"prefix has {P} positions, got {tokens.shape[0]} tokens")
    lat = prefix.latent_positions()
    if bool((tokens[~lat] == model.cfg.mask_id).any()):
        raise ContractError("MASK token in cached prefix")
    row = PackedRow(prefix, np.where(lat, 0, tokens), latents)
    with torch.no_grad():
        _, _, kvs = model.run(make_batch([row], model.cfg.latent_dim), collect_kv=True)
    keys = tuple(k[0].detach().clone() for k, _ in kvs)
    values = tuple(v[0].detach().clone() for _, v in kvs)
    return KVCache(keys, values, prefix, P, prefix.fingerprint(), tokens.copy())


def extend_cache(
    model: MoDTransformer,
    cache: KVCache,
    blocks,
    role: Role = Role.RESPONSE,
) -> KVCache:
    """Append completed text block(s) to a cache; ``cache`` itself is untouched.

    ``blocks`` is one token array or a list of them; each becomes its own
    segment, so extending by ``[a]`` then ``[b]`` equals extending by ``[a, b]``.
    """
    if isinstance(blocks, np.ndarray) and blocks.ndim == 1 or (
        len(blocks) and np.isscalar(blocks[0])
    ):
        blocks = [blocks]
    blocks = [np.asarray(b, dtype=np.int64) for b in blocks if len(b)]
    if not blocks:
        return cache
    for b in blocks:
        if bool((b == model.cfg.mask_id).any()):
            raise ContractError("cannot cache a block that still contains MASK")
    segs = list(cache.layout.segments)
    sid = segs[-1].sample_id if segs else 0
    turn = segs[-1].turn_index if segs else 0
    new = [Segment(Modality.TEXT, role, len(b), sid, turn) for b in blocks]
    layout = SegmentLayout(segs + new)
    P = cache.prefix_len
    full = np.zeros(layout.total_len, dtype=np.int64)
    full[P:] = np.concatenate(blocks)
    batch = _cached_batch(model, PackedRow(layout, full), cache if P else None)
    with torch.no_grad():
        _, _, kvs = model.run(batch, cache if P else None, collect_kv=True)
    keys = tuple(torch.cat((ck, k[0]), dim=1) for ck, (k, _) in zip(cache.keys, kvs))
    values = tuple(torch.cat((cv, v[0]), dim=1) for cv, (_, v) in zip(cache.values, kvs))
    prev = cache.tokens if cache.tokens is not None else np.zeros(P, np.int64)
    return KVCache(keys, values, layout, layout.total_len, layout.fingerprint(), np.concatenate([prev, full[P:]]))


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MODDIFF\x00"
CKPT_VERSION = 1


def save_checkpoint(path, model: MoDTransformer, meta: dict | None = None, extra: dict | None = None) -> None:
    """Write config + named float64 tensors in a versioned little-endian format."""
    import struct

    header = {
        "config": model.cfg.to_dict(),
        "config_digest": model.cfg.digest(),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    records = [(n, p.detach()) for n, p in model.state_dict().items()]
    for n, t in (extra or {}).items():
        records.append((f"extra/{n}", torch.as_tensor(t, dtype=DTYPE).detach()))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<I", len(records)))
        for name, t in records:
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", t.dim()))
            fh.write(struct.pack(f"<{t.dim()}I", *t.shape))
            fh.write(t.to(DTYPE).contiguous().numpy().astype("<f8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, meta, extra)``."""
    import struct

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(data[off:off + hlen])
    off += hlen
    cfg = ModelConfig.from_dict(header["config"])
    if cfg.digest() != header["config_digest"]:
        raise ContractError(f"{path}: config digest mismatch")
    (n_rec,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(n_rec):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        tensors[name] = torch.from_numpy(arr.astype(np.float64))
    model = MoDTransformer(cfg)
    state = {n: t for n, t in tensors.items() if not n.startswith("extra/")}
    model.load_state_dict(state)
    extra = {n[len("extra/"):]: t for n, t in tensors.items() if n.startswith("extra/")}
    return model, header["meta"], extra
