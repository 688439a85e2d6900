"""Joint training, packing, evaluation and benchmarks."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .data import KIND_GEN, KIND_IL, KIND_UND, WorldSpec
from .errors import ContractError, TrainingDiverged
from .flow import EulerPlan, rf_rows
from .layout import Modality, Role, Segment, SegmentLayout
from .length import AugmentConfig, DecodeConfig, augment, decode
from .masked import LINEAR, corrupt_for_training
from .model import (
    Batch, ModelConfig, MoDTransformer, PackedRow, load_checkpoint, make_batch, save_checkpoint, write_cache,
)
from .tensor import DTYPE, masked_cross_entropy, masked_mse

log = logging.getLogger(__name__)

STAGES = ("without", "with-augmentation")
METRICS_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    min_lr_frac: float = 0.05
    warmup: int = 50
    steps: int = 1000
    batch_und: int = 32
    batch_gen: int = 32
    batch_il: int = 0
    w_und: float = 1.0
    w_gen: float = 1.0
    w_il: float = 1.0
    stage: str = "without"
    p_ext: float = 0.5
    p_trunc: float = 0.2
    row_len: int = 192
    seed: int = 0
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    t_min: float = 1e-3
    log_every: int = 10

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"stage must be one of {STAGES}")
        w = (self.w_und, self.w_gen, self.w_il)
        if min(w) < 0 or max(w) <= 0:
            raise ContractError("loss weights must be non-negative with at least one positive")

    @property
    def augment(self) -> bool:
        return self.stage == "with-augmentation"

    @property
    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.p_ext, self.p_trunc)

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def loads(cls, text: str, **overrides) -> "TrainConfig":
        return cls(**parse_kv(text, {f.name: f.type for f in fields(cls)}), **overrides)


def parse_kv(text: str, types: dict) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    casts = {"int": int, "float": float, "str": str, "bool": lambda s: s.lower() in ("1", "true", "yes")}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        out[key] = casts[types[key] if isinstance(types[key], str) else types[key].__name__](value)
    return out


# ---------------------------------------------------------------------------
# batch assembly


@dataclass
class Prepared:
    """One training sample after augmentation and noising, as sample 0 of its own layout."""

    kind: int
    layout: SegmentLayout
    tokens: np.ndarray       # model input ids (corrupted response for und)
    targets: np.ndarray      # clean ids
    weights: np.ndarray      # 1/t at masked response positions
    loss_mask: np.ndarray    # response positions
    latents: np.ndarray      # noisy latents v_t
    lat_targets: np.ndarray  # v_0 - eps
    times: np.ndarray


def prepare_und(sample, rng, mask_id: int, eos_id: int, cfg: TrainConfig | None = None) -> Prepared:
    response = sample.response
    if cfg is not None and cfg.augment:
        response = augment(response, cfg.augment_config, rng, eos_id, mask_id)
    layout = sample.layout(len(response))
    x0 = np.concatenate([sample.vis, sample.prompt, response])
    t_min = 1e-3 if cfg is None else cfg.t_min
    xt, w, lm = corrupt_for_training(x0, layout, LINEAR, rng, mask_id, t_min)
    return Prepared(KIND_UND, layout, xt, x0, w, lm, np.zeros((0, 0)), np.zeros((0, 0)), np.ones(len(x0)))


def prepare_gen(sample, rng, kind: int = KIND_GEN) -> Prepared:
    layout = sample.layout()
    vt, target, times = rf_rows(layout, sample.all_latents(), rng)
    n = layout.total_len
    toks = sample.tokens()
    return Prepared(kind, layout, toks, toks, np.zeros(n), np.zeros(n, bool), vt, target, times)


def pack(samples: list[Prepared], row_len: int) -> list[list[Prepared]]:
    """Greedy first-fit packing in order; a sample longer than ``row_len`` gets its own row."""
    rows: list[list[Prepared]] = []
    cur: list[Prepared] = []
    used = 0
    for s in samples:
        n = s.layout.total_len
        if cur and used + n > row_len:
            rows.append(cur)
            cur, used = [], 0
        cur.append(s)
        used += n
    if cur:
        rows.append(cur)
    return rows


@dataclass
class StepBatch:
    batch: Batch
    targets: torch.Tensor      # [B, N]
    weights: torch.Tensor      # [B, N]
    und_mask: torch.Tensor     # [B, N]
    lat_targets: torch.Tensor  # [B, N, d_lat]
    gen_mask: torch.Tensor     # [B, N]
    il_mask: torch.Tensor      # [B, N]

    def counts(self) -> dict:
        return {
            "und": int(self.und_mask.sum()),
            "gen": int(self.gen_mask.sum()),
            "il": int(self.il_mask.sum()),
        }


def collate(rows: list[list[Prepared]], latent_dim: int) -> StepBatch:
    packed_rows = []
    for row in rows:
        segs, toks, lats, times = [], [], [], []
        for sid, s in enumerate(row):
            segs += [seg.with_(sample_id=sid) for seg in s.layout.segments]
            toks.append(s.tokens)
            if len(s.latents):
                lats.append(s.latents)
            times.append(s.times)
        lat = np.concatenate(lats) if lats else np.zeros((0, latent_dim))
        packed_rows.append(PackedRow(SegmentLayout(segs), np.concatenate(toks), lat, np.concatenate(times)))
    batch = make_batch(packed_rows, latent_dim)
    B, N = batch.tokens.shape
    targets = np.zeros((B, N), np.int64)
    weights = np.zeros((B, N))
    und_mask = np.zeros((B, N), bool)
    lat_t = np.zeros((B, N, latent_dim))
    gen_mask = np.zeros((B, N), bool)
    il_mask = np.zeros((B, N), bool)
    for b, row in enumerate(rows):
        pos = 0
        for s in row:
            n = s.layout.total_len
            sl = slice(pos, pos + n)
            targets[b, sl] = s.targets
            weights[b, sl] = s.weights
            und_mask[b, sl] = s.loss_mask
            if s.kind != KIND_UND:
                lat_pos = pos + np.flatnonzero(s.layout.latent_positions())
                lat_t[b, lat_pos] = s.lat_targets
                (gen_mask if s.kind == KIND_GEN else il_mask)[b, lat_pos] = True
            pos += n
    return StepBatch(batch, torch.from_numpy(targets), torch.from_numpy(weights), torch.from_numpy(und_mask),
                     torch.from_numpy(lat_t), torch.from_numpy(gen_mask), torch.from_numpy(il_mask))


def step_samples(cfg: TrainConfig, corpus, step: int, mask_id: int, eos_id: int) -> list[Prepared]:
    """All samples of one optimizer step; depends only on (seed, step)."""
    rng = np.random.default_rng([cfg.seed, step])
    out = []
    counts = corpus.counts()
    if cfg.w_und > 0 and cfg.batch_und:
        for i in rng.integers(0, counts["und"], cfg.batch_und):
            out.append(prepare_und(corpus.und(int(i)), rng, mask_id, eos_id, cfg))
    if cfg.w_gen > 0 and cfg.batch_gen:
        for i in rng.integers(0, counts["gen"], cfg.batch_gen):
            out.append(prepare_gen(corpus.gen(int(i)), rng, KIND_GEN))
    if cfg.w_il > 0 and cfg.batch_il:
        for i in rng.integers(0, counts["il"], cfg.batch_il):
            out.append(prepare_gen(corpus.il(int(i)), rng, KIND_IL))
    return out


def compute_losses(model: MoDTransformer, sb: StepBatch, weights=(1.0, 1.0, 1.0), normalizers=None) -> dict:
    """Per-objective losses and their weighted sum for one collated batch."""
    logits, velocity = model(sb.batch)
    c = sb.counts()
    norm = normalizers or {}
    und = masked_cross_entropy(logits, sb.targets, sb.und_mask, sb.weights, norm.get("und"))
    gen = masked_mse(velocity, sb.lat_targets, sb.gen_mask, norm.get("gen"))
    il = masked_mse(velocity, sb.lat_targets, sb.il_mask, norm.get("il"))
    total = weights[0] * und + weights[1] * gen + weights[2] * il
    return {"loss": total, "und": und, "gen": gen, "il": il, "counts": c}


# ---------------------------------------------------------------------------
# optimizer and checkpoints


def lr_at(cfg: TrainConfig, step: int) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(1, cfg.steps - cfg.warmup)
    frac = min(1.0, (step - cfg.warmup) / span)
    return cfg.lr * (cfg.min_lr_frac + (1 - cfg.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))


def make_optimizer(model: MoDTransformer, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=1e-8)


def _optimizer_tensors(model, opt) -> dict:
    out = {}
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if st:
            out[f"opt/{name}/step"] = torch.as_tensor(st["step"], dtype=DTYPE).reshape(())
            out[f"opt/{name}/exp_avg"] = st["exp_avg"]
            out[f"opt/{name}/exp_avg_sq"] = st["exp_avg_sq"]
    return out


def save_train_state(path, model, opt, step: int, cfg: TrainConfig) -> None:
    meta = {"step": step, "train_config": asdict(cfg)}
    save_checkpoint(path, model, meta, _optimizer_tensors(model, opt) if opt is not None else None)


def load_train_state(path, cfg: TrainConfig | None = None):
    """Returns ``(model, optimizer, step)`` restored from :func:`save_train_state` output."""
    model, meta, extra = load_checkpoint(path)
    cfg = cfg or TrainConfig(**meta.get("train_config", {}))
    opt = make_optimizer(model, cfg)
    for name, p in model.named_parameters():
        key = f"opt/{name}/step"
        if key in extra:
            opt.state[p] = {
                "step": extra[key].clone().to(torch.float32),
                "exp_avg": extra[f"opt/{name}/exp_avg"].clone(),
                "exp_avg_sq": extra[f"opt/{name}/exp_avg_sq"].clone(),
            }
    return model, opt, int(meta.get("step", 0))


@dataclass
class TrainResult:
    model: MoDTransformer
    optimizer: torch.optim.Adam
    step: int
    metrics: list


def train(cfg: TrainConfig, corpus, model: MoDTransformer, out_dir=None, resume=None, until: int | None = None,
          optimizer=None, start_step: int = 0, append: bool = False) -> TrainResult:
    """Run (or continue) a training stage.

    Deterministic given ``cfg.seed``: the samples of step ``s`` depend only on
    ``(seed, s)``. ``until`` stops early (the schedule still spans
    ``cfg.steps``) which, with ``resume``, lets a run be split in two. With
    ``out_dir`` set, metrics go to ``metrics.jsonl`` (deterministic fields),
    wall times to ``timings.jsonl`` and the final state to ``checkpoint.bin``.
    """
    if resume is not None:
        model, optimizer, start_step = load_train_state(resume, cfg)
    opt = optimizer or make_optimizer(model, cfg)
    end = cfg.steps if until is None else min(until, cfg.steps)
    mcfg = model.cfg
    weights = (cfg.w_und, cfg.w_gen, cfg.w_il)
    metrics = []
    mfh = tfh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        mode = "a" if resume is not None or append else "w"
        mfh = open(os.path.join(out_dir, "metrics.jsonl"), mode)
        tfh = open(os.path.join(out_dir, "timings.jsonl"), mode)
    t0 = time.perf_counter()
    try:
        for step in range(start_step, end):
            lr = lr_at(cfg, step)
            for g in opt.param_groups:
                g["lr"] = lr
            samples = step_samples(cfg, corpus, step, mcfg.mask_id, mcfg.eos_id)
            sb = collate(pack(samples, cfg.row_len), mcfg.latent_dim)
            losses = compute_losses(model, sb, weights)
            if not bool(torch.isfinite(losses["loss"])):
                path = None
                if out_dir is not None:
                    path = os.path.join(out_dir, "last_good.bin")
                    save_train_state(path, model, opt, step, cfg)
                raise TrainingDiverged(step, path)
            opt.zero_grad(set_to_none=True)
            losses["loss"].backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            rec = {
                "v": METRICS_VERSION,
                "step": step + 1,
                "loss": losses["loss"].item(),
                "loss_und": losses["und"].item(),
                "loss_gen": losses["gen"].item(),
                "loss_il": losses["il"].item(),
                "lr": lr,
            }
            metrics.append(rec)
            if mfh is not None:
                mfh.write(json.dumps(rec) + "\n")
                tfh.write(json.dumps({"step": step + 1, "wall": time.perf_counter() - t0}) + "\n")
            if cfg.log_every and (step + 1) % cfg.log_every == 0:
                log.info("step %d loss %.4f (und %.4f gen %.4f il %.4f)", step + 1, rec["loss"],
                         rec["loss_und"], rec["loss_gen"], rec["loss_il"])
        if out_dir is not None:
            save_train_state(os.path.join(out_dir, "checkpoint.bin"), model, opt, end, cfg)
    finally:
        if mfh is not None:
            mfh.close()
            tfh.close()
    return TrainResult(model, opt, end, metrics)


# ---------------------------------------------------------------------------
# evaluation


def und_cache(model: MoDTransformer, sample):
    prefix = sample.layout(response_len=0)
    return write_cache(model, prefix, sample.prefix())


def eval_und(model: MoDTransformer, samples, dcfg: DecodeConfig) -> dict:
    """Exact-match accuracy and mean decoded length over held-out samples."""
    correct = 0
    lengths = []
    terminated = 0
    passes = 0
    for s in samples:
        res = decode(model, und_cache(model, s), dcfg)
        correct += int(np.array_equal(res.tokens, s.response))
        lengths.append(len(res.tokens))
        terminated += int(res.terminated)
        passes += res.n_passes
    n = max(1, len(samples))
    return {
        "accuracy": correct / n,
        "mean_length": float(np.mean(lengths)) if lengths else 0.0,
        "terminated": terminated / n,
        "passes": passes,
    }


def euler_sample_batch(model: MoDTransformer, prompts: np.ndarray, n_latent: int, plan: EulerPlan,
                       rng: np.random.Generator) -> np.ndarray:
    """Sample one latent block per prompt, all rows integrated together.

    Each row has layout ``[PROMPT, VIS_LAT]``; returns ``[n_rows, n_latent, d_lat]``.
    """
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    B, lp = prompts.shape
    dl = model.cfg.latent_dim
    layout = SegmentLayout([Segment(Modality.TEXT, Role.PROMPT, lp), Segment(Modality.VIS_LAT, Role.TARGET, n_latent)])
    rows = [PackedRow(layout, np.concatenate([p, np.zeros(n_latent, np.int64)]), np.zeros((n_latent, dl)))
            for p in prompts]
    batch = make_batch(rows, dl)
    z = torch.from_numpy(rng.standard_normal((B, n_latent, dl)))
    ts = plan.times()
    with torch.no_grad():
        for k in range(plan.n_steps):
            lat = batch.latents.clone()
            lat[:, lp:] = z
            batch.latents = lat
            batch.times = torch.cat((torch.ones(B, lp, dtype=DTYPE), torch.full((B, n_latent), ts[k], dtype=DTYPE)), 1)
            _, v = model(batch)
            z = z + (ts[k + 1] - ts[k]) * v[:, lp:]
    return z.numpy()


def eval_gen(model: MoDTransformer, spec: WorldSpec, n_per_class: int = 256, plan: EulerPlan = EulerPlan(),
             seed: int = 0) -> dict:
    """Per-class mean error (in units of sigma) of conditionally generated latents."""
    rng = np.random.default_rng(seed)
    errs, within = [], []
    for g in range(spec.n_gen_classes):
        prompts = np.tile([spec.draw_id, spec.caption_base + g], (n_per_class, 1))
        z = euler_sample_batch(model, prompts, spec.n_latent_tokens, plan, rng).reshape(-1, spec.latent_dim)
        mu = spec.class_mean(g)
        errs.append(float(np.linalg.norm(z.mean(0) - mu)) / spec.sigma)
        within.append(float(np.mean(np.linalg.norm(z - mu, axis=1) <= 3 * spec.sigma)))
    return {"mean_err_sigma": errs, "max_mean_err_sigma": max(errs), "within_3sigma": within}


def bench_cache(model: MoDTransformer, prefix_lengths=(0, 64, 128, 256, 512), block_len: int = 32,
                reps: int = 3, seed: int = 0) -> list[dict]:
    """Time one denoised block with and without the prefix KV cache.

    The workload uses threshold 1, so every pass commits exactly one token and
    both paths run ``block_len`` passes. Besides wall time the table reports
    the number of positions pushed through the network and the ratio
    predicted by ``n (P + L) / (P + n L)`` with ``n = L`` passes.
    """
    rng = np.random.default_rng(seed)
    dcfg = DecodeConfig(block_len, 1.0, 1)
    out = []
    for P in prefix_lengths:
        prompt = rng.integers(0, model.cfg.mask_id, P)
        layout = SegmentLayout([Segment(Modality.TEXT, Role.PROMPT, P)]) if P else SegmentLayout([])
        times = {True: [], False: []}
        positions = {}
        # the full-recompute path only reads the prefix ids from this object
        ids_only = write_cache(model, layout, prompt)
        for _ in range(reps):
            for use_cache in (False, True):
                model.stats["positions"] = 0
                t0 = time.perf_counter()
                cache = write_cache(model, layout, prompt) if use_cache else ids_only
                res = decode(model, cache, dcfg, use_cache=use_cache)
                times[use_cache].append(time.perf_counter() - t0)
                positions[use_cache] = model.stats["positions"]
        n = res.n_passes
        t_full, t_cached = min(times[False]), min(times[True])
        model_ratio = n * (P + block_len) / (P + n * block_len)
        out.append({
            "prefix_len": int(P),
            "passes": int(n),
            "t_nocache": t_full,
            "t_cache": t_cached,
            "speedup": t_full / t_cached,
            "positions_nocache": int(positions[False]),
            "positions_cache": int(positions[True]),
            "positions_ratio": positions[False] / positions[True],
            "model_ratio": model_ratio,
        })
    return out


def build_model(spec: WorldSpec, **overrides) -> MoDTransformer:
    cfg = ModelConfig(vocab_size=spec.vocab_size, latent_dim=spec.latent_dim, **overrides)
    return MoDTransformer(cfg)
