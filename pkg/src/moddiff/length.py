"""Adaptive-length training augmentation and blockwise variable-length decoding."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractError
from .layout import Modality, Role, Segment, SegmentLayout
from .model import KVCache, MoDTransformer, extend_cache, forward_und


@dataclass(frozen=True)
class AugmentConfig:
    p_ext: float = 0.5
    p_trunc: float = 0.2
    min_trunc_len: int = 16

    def __post_init__(self):
        if not (0.0 <= self.p_ext <= 1.0 and 0.0 <= self.p_trunc <= 1.0):
            raise ContractError("augmentation probabilities must lie in [0, 1]")
        if self.p_ext + self.p_trunc > 1.0 + 1e-12:
            raise ContractError("p_ext + p_trunc must not exceed 1")


def augment(r0, cfg: AugmentConfig, rng: np.random.Generator, eos_id: int, mask_id: int | None = None) -> np.ndarray:
    """Randomly extend a response with EOS tokens or truncate it to a prefix.

    One uniform draw picks the branch: below ``p_ext`` append ``k ~ U{1..|r0|}``
    EOS ids; below ``p_ext + p_trunc`` (and only for responses longer than
    ``min_trunc_len``) keep the first ``l ~ U{1..|r0|-1}`` tokens.
    """
    r0 = np.asarray(r0, dtype=np.int64)
    if r0.size == 0:
        raise ContractError("response must be non-empty")
    if mask_id is not None and bool((r0 == mask_id).any()):
        raise ContractError("response must not contain MASK")
    n = r0.size
    u = rng.random()
    if u < cfg.p_ext:
        k = int(rng.integers(1, n + 1))
        return np.concatenate([r0, np.full(k, eos_id, dtype=np.int64)])
    if u < cfg.p_ext + cfg.p_trunc and n > cfg.min_trunc_len:
        ell = int(rng.integers(1, n))
        return r0[:ell].copy()
    return r0.copy()


@dataclass(frozen=True)
class DecodeConfig:
    block_len: int = 32
    threshold: float = 0.9
    max_blocks: int = 8

    def __post_init__(self):
        if self.block_len < 1 or self.max_blocks < 1:
            raise ContractError("block_len and max_blocks must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ContractError("threshold must lie in [0, 1]")


@dataclass
class DecodeResult:
    tokens: np.ndarray
    terminated: bool
    n_passes: int
    n_blocks: int
    committed: int  # tokens committed by the denoiser, including the truncated tail
    seconds: float = 0.0
    trace: list = field(default_factory=list)


def _block_layout(layout: SegmentLayout, length: int, active: bool) -> SegmentLayout:
    last = layout.segments[-1] if len(layout) else Segment(Modality.TEXT, Role.PROMPT, 1)
    return layout + SegmentLayout([Segment(Modality.TEXT, Role.RESPONSE, length, last.sample_id, last.turn_index, active)])


def decode(model: MoDTransformer, cache0: KVCache, cfg: DecodeConfig, use_cache: bool = True,
           record_trace: bool = False) -> DecodeResult:
    """Blockwise confidence-threshold decoding until a block contains EOS.

    Each pass commits the argmax of every masked position whose max
    probability exceeds ``cfg.threshold``; if none does, the single most
    confident position is committed so every pass makes progress. With
    ``use_cache=False`` every pass recomputes the whole sequence (baseline).
    """
    mask_id, eos_id = model.cfg.mask_id, model.cfg.eos_id
    L = cfg.block_len
    start = time.perf_counter()
    cache = cache0
    layout = cache0.layout
    history = np.asarray(cache0.tokens if cache0.tokens is not None else np.zeros(0), dtype=np.int64)
    if not use_cache and cache0.tokens is None:
        raise ContractError("full recomputation needs the prefix token ids stored in the cache")
    y: list[np.ndarray] = []
    passes = 0
    trace = []
    with torch.no_grad():
        for blk in range(cfg.max_blocks):
            b = np.full(L, mask_id, dtype=np.int64)
            active_layout = _block_layout(layout, L, active=True)
            while True:
                masked = b == mask_id
                if not masked.any():
                    break
                if use_cache:
                    logits = forward_und(model, b, active_layout, cache)
                else:
                    logits = forward_und(model, np.concatenate([history, b]), active_layout)[-L:]
                passes += 1
                logits = logits.clone()
                logits[:, mask_id] = float("-inf")
                probs = torch.softmax(logits, dim=-1)
                conf, tok = probs.max(dim=-1)
                conf = conf.numpy()
                tok = tok.numpy()
                accept = masked & (conf > cfg.threshold)
                if not accept.any():
                    best = np.flatnonzero(masked)[np.argmax(conf[masked])]
                    accept[best] = True
                b[accept] = tok[accept]
                if record_trace:
                    trace.append((blk, np.flatnonzero(accept).tolist()))
            hit = np.flatnonzero(b == eos_id)
            if hit.size:
                y.append(b[:hit[0]])
                out = np.concatenate(y) if y else np.zeros(0, np.int64)
                return DecodeResult(out, True, passes, blk + 1, (blk + 1) * L,
                                    time.perf_counter() - start, trace)
            y.append(b)
            if blk == cfg.max_blocks - 1:
                break
            if use_cache:
                cache = extend_cache(model, cache, [b])
                layout = cache.layout
            else:
                layout = _block_layout(layout, L, active=False)
                history = np.concatenate([history, b])
    return DecodeResult(np.concatenate(y), False, passes, cfg.max_blocks, cfg.max_blocks * L,
                        time.perf_counter() - start, trace)


def throughput_probe(model: MoDTransformer, caches, thresholds, block_len: int = 32, max_blocks: int = 8,
                     references=None) -> list[dict]:
    """Decode a fixed workload at every threshold and tabulate speed statistics.

    ``passes_per_token`` counts forward passes per token committed by the
    decoder and is hardware independent; ``tokens_per_s`` uses wall time.
    """
    rows = []
    for tau in thresholds:
        cfg = DecodeConfig(block_len, float(tau), max_blocks)
        passes = committed = produced = correct = 0
        seconds = 0.0
        for i, cache in enumerate(caches):
            res = decode(model, cache, cfg)
            passes += res.n_passes
            committed += res.committed
            produced += len(res.tokens)
            seconds += res.seconds
            if references is not None:
                correct += int(np.array_equal(res.tokens, references[i]))
        row = {
            "tau": float(tau),
            "tokens_per_s": produced / seconds if seconds > 0 else float("nan"),
            "passes_per_token": passes / committed,
            "mean_length": produced / len(caches),
        }
        if references is not None:
            row["accuracy"] = correct / len(caches)
        rows.append(row)
    return rows


def format_table(rows: list[dict], sep: str = "\t") -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    lines = [sep.join(keys)]
    for r in rows:
        lines.append(sep.join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in keys))
    return "\n".join(lines) + "\n"
