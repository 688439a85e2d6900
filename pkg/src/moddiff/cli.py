"""Command-line entry point: data generation, training, evaluation and benchmarks."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from .data import Corpus, StoredCorpus, WorldSpec, write_corpus
from .flow import EulerPlan, export_latents
from .length import DecodeConfig, throughput_probe
from .model import ModelConfig, MoDTransformer, load_checkpoint
from .report import cache_table, length_table, report, threshold_table, write_bench
from .train import (
    TrainConfig, bench_cache, eval_und, euler_sample_batch, load_train_state, parse_kv, train,
    und_cache,
)

log = logging.getLogger("moddiff")

CORPUS_KEYS = {"seed": "int", "n_und": "int", "n_gen": "int", "n_il": "int", "il_turns": "int"}


def _types() -> dict:
    types = {f.name: f.type for f in fields(TrainConfig)}
    types.update({f"model.{f.name}": f.type for f in fields(ModelConfig)})
    types.update({f"data.{k}": v for k, v in CORPUS_KEYS.items()})
    return types


def load_config(path: str | None, overrides=()) -> tuple[TrainConfig, dict, dict]:
    """Read a flat key=value file (plus ``key=value`` overrides) into train, model and data settings.

    Model keys carry a ``model.`` prefix and corpus keys a ``data.`` prefix.
    """
    text = ""
    if path:
        with open(path) as fh:
            text = fh.read()
    text += "\n" + "\n".join(overrides)
    kv = parse_kv(text, _types())
    train_kv = {k: v for k, v in kv.items() if "." not in k}
    model_kv = {k[6:]: v for k, v in kv.items() if k.startswith("model.")}
    data_kv = {k[5:]: v for k, v in kv.items() if k.startswith("data.")}
    return TrainConfig(**train_kv), model_kv, data_kv


def _corpus(args, data_kv: dict | None = None, split: str = "train"):
    if getattr(args, "data", None):
        return StoredCorpus(args.data)
    kv = dict(data_kv or {})
    return Corpus(WorldSpec(), split=split, **kv)


def _held_out(args):
    spec = WorldSpec()
    held = Corpus(spec, seed=args.data_seed, split="eval")
    return [held.und(i) for i in range(args.n)]


def _model(path: str) -> MoDTransformer:
    model, _, _ = load_checkpoint(path)
    model.eval()
    return model


def cmd_gen_data(args) -> int:
    _, _, data_kv = load_config(args.config, args.set)
    corpus = Corpus(WorldSpec(), split=args.split, **data_kv)
    write_corpus(args.out, corpus)
    print(json.dumps({"out": args.out, "counts": corpus.counts(), "spec_digest": corpus.spec.digest()}))
    return 0


def cmd_train(args) -> int:
    cfg, model_kv, data_kv = load_config(args.config, args.set)
    corpus = _corpus(args, data_kv)
    spec = corpus.spec
    if args.resume:
        model, opt, start = load_train_state(args.resume, cfg)
        if args.init:
            raise SystemExit("--init and --resume are mutually exclusive")
    elif args.init:
        # a new stage starts from trained weights with a fresh optimizer
        model, opt, start = load_train_state(args.init, cfg)[0], None, 0
    else:
        model = MoDTransformer(ModelConfig(vocab_size=spec.vocab_size, latent_dim=spec.latent_dim, **model_kv))
        opt, start = None, 0
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "train.cfg"), "w") as fh:
        fh.write(cfg.dumps())
    res = train(cfg, corpus, model, out_dir=args.out, until=args.until, optimizer=opt, start_step=start,
                append=bool(args.resume))
    last = res.metrics[-1] if res.metrics else {}
    print(json.dumps({"step": res.step, "checkpoint": os.path.join(args.out, "checkpoint.bin"), **last}))
    return 0


def cmd_eval_und(args) -> int:
    model = _model(args.checkpoint)
    samples = _held_out(args)
    rows = []
    for L in args.block_len:
        r = eval_und(model, samples, DecodeConfig(L, args.threshold, args.max_blocks))
        rows.append({"block_len": L, **r})
    if args.out:
        write_bench(args.out, "length-sweep", rows, {"threshold": args.threshold, "n": args.n})
    print(length_table(rows), end="")
    return 0


def cmd_sample_latent(args) -> int:
    model = _model(args.checkpoint)
    spec = WorldSpec()
    rng = np.random.default_rng(args.seed)
    prompts = np.tile([spec.draw_id, spec.caption_base + args.cls], (args.n, 1))
    z = euler_sample_batch(model, prompts, spec.n_latent_tokens, EulerPlan(args.steps), rng)
    flat = z.reshape(-1, spec.latent_dim)
    export_latents(args.out, flat, np.repeat(np.arange(args.n), spec.n_latent_tokens))
    err = float(np.linalg.norm(flat.mean(0) - spec.class_mean(args.cls)) / spec.sigma)
    print(json.dumps({"out": args.out, "rows": int(flat.shape[0]), "mean_err_sigma": err}))
    return 0


def cmd_bench_cache(args) -> int:
    model = _model(args.checkpoint)
    rows = bench_cache(model, args.prefix_len, args.block_len, args.reps, args.seed)
    if args.out:
        write_bench(args.out, "cache-speedup", rows, {"block_len": args.block_len})
    print(cache_table(rows), end="")
    return 0


def cmd_bench_threshold(args) -> int:
    model = _model(args.checkpoint)
    samples = _held_out(args)
    caches = [und_cache(model, s) for s in samples]
    rows = throughput_probe(model, caches, args.thresholds, args.block_len, args.max_blocks,
                            [s.response for s in samples])
    if args.out:
        write_bench(args.out, "threshold-sweep", rows, {"block_len": args.block_len, "n": args.n})
    print(threshold_table(rows), end="")
    return 0


def cmd_report(args) -> int:
    metrics = [p for p in args.inputs if p.endswith(".jsonl")]
    benches = [p for p in args.inputs if not p.endswith(".jsonl")]
    text = report(metrics, benches, args.plot_dir)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moddiff", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    def with_eval(sp):
        sp.add_argument("checkpoint")
        sp.add_argument("--n", type=int, default=100, help="held-out samples")
        sp.add_argument("--data-seed", type=int, default=0)
        sp.add_argument("--max-blocks", type=int, default=8)
        sp.add_argument("--out", help="write rows as a versioned JSON file")

    sp = sub.add_parser("gen-data", help="write a synthetic corpus to disk")
    with_config(sp)
    sp.add_argument("--split", default="train")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="run one training stage")
    with_config(sp)
    sp.add_argument("--data", help="stored corpus directory (default: generate on the fly)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--init", help="start from this checkpoint's weights with a fresh optimizer")
    sp.add_argument("--resume", help="continue an interrupted run from its checkpoint")
    sp.add_argument("--until", type=int, help="stop after this step")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval-und", help="exact-match accuracy and mean length per block length")
    with_eval(sp)
    sp.add_argument("--block-len", type=int, nargs="+", default=[16, 32, 64])
    sp.add_argument("--threshold", type=float, default=0.95)
    sp.set_defaults(func=cmd_eval_und)

    sp = sub.add_parser("sample-latent", help="generate latents for one caption class")
    sp.add_argument("checkpoint")
    sp.add_argument("--cls", type=int, default=0)
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample_latent)

    sp = sub.add_parser("bench-cache", help="cached vs full-recompute decoding per prefix length")
    sp.add_argument("checkpoint")
    sp.add_argument("--prefix-len", type=int, nargs="+", default=[0, 64, 128, 256, 512])
    sp.add_argument("--block-len", type=int, default=32)
    sp.add_argument("--reps", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench_cache)

    sp = sub.add_parser("bench-threshold", help="accuracy and throughput per confidence threshold")
    with_eval(sp)
    sp.add_argument("--thresholds", type=float, nargs="+", default=[0.2, 0.4, 0.6, 0.8, 0.9, 1.0])
    sp.add_argument("--block-len", type=int, default=64)
    sp.set_defaults(func=cmd_bench_threshold)

    sp = sub.add_parser("report", help="summarize metrics.jsonl and benchmark JSON files")
    sp.add_argument("inputs", nargs="*")
    sp.add_argument("--plot-dir", help="write loss-curve CSVs here")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
