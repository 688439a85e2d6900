"""Summaries and plot-data files from metrics and benchmark outputs."""

from __future__ import annotations

import csv
import json
import os

BENCH_VERSION = 1
LOSS_KEYS = ("loss", "loss_und", "loss_gen", "loss_il")


def read_metrics(paths) -> list[dict]:
    """Concatenate line-delimited metric records, checking steps only grow."""
    records = []
    for path in paths:
        last = 0
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec.get("v", 1) != 1:
                    raise ValueError(f"{path}:{lineno}: unsupported metrics version {rec['v']}")
                if rec["step"] <= last:
                    raise ValueError(f"{path}:{lineno}: step {rec['step']} is not increasing")
                last = rec["step"]
                rec["source"] = os.path.basename(os.path.dirname(os.path.abspath(path))) or path
                records.append(rec)
    return records


def write_bench(path, kind: str, rows: list[dict], meta: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump({"format": kind, "version": BENCH_VERSION, "meta": meta or {}, "rows": rows}, fh, indent=1,
                  sort_keys=True)
        fh.write("\n")


def read_bench(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != BENCH_VERSION:
        raise ValueError(f"{path}: unsupported benchmark version {doc.get('version')}")
    return doc


def _fmt(x) -> str:
    return f"{x:.4f}" if isinstance(x, float) else str(x)


def _grid(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: "| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([line(header), sep] + [line(r) for r in rows]) + "\n"


def threshold_table(rows: list[dict]) -> str:
    """Thresholds as columns; accuracy and throughput as rows."""
    if not rows:
        return ""
    header = ["Threshold"] + [f"{r['tau']:g}" for r in rows]
    body = []
    if all("accuracy" in r for r in rows):
        body.append(["Accuracy (%)"] + [f"{100 * r['accuracy']:.1f}" for r in rows])
    body.append(["Throughput (tokens/s)"] + [f"{r['tokens_per_s']:.1f}" for r in rows])
    body.append(["Passes per token"] + [f"{r['passes_per_token']:.3f}" for r in rows])
    return _grid(header, body)


def length_table(rows: list[dict]) -> str:
    """Block lengths as columns; accuracy and average generated tokens as rows."""
    if not rows:
        return ""
    header = ["Block length"] + [str(r["block_len"]) for r in rows]
    body = [
        ["Accuracy (%)"] + [f"{100 * r['accuracy']:.1f}" for r in rows],
        ["Average tokens"] + [f"{r['mean_length']:.1f}" for r in rows],
    ]
    return _grid(header, body)


def cache_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    keys = ["prefix_len", "speedup", "positions_ratio", "model_ratio"]
    return _grid(keys, [[_fmt(r[k]) for k in keys] for r in rows])


def summarize(records: list[dict]) -> str:
    if not records:
        return ""
    out = []
    by_source: dict[str, list] = {}
    for r in records:
        by_source.setdefault(r["source"], []).append(r)
    for source, recs in by_source.items():
        tail = recs[-max(1, len(recs) // 10):]
        out.append(f"run {source}: {len(recs)} records, steps {recs[0]['step']}..{recs[-1]['step']}")
        for k in LOSS_KEYS:
            if k in recs[0]:
                mean_tail = sum(r[k] for r in tail) / len(tail)
                out.append(f"  {k:<9} first {recs[0][k]:.4f}  last {recs[-1][k]:.4f}  tail-mean {mean_tail:.4f}")
    return "\n".join(out) + "\n"


def write_plot_data(records: list[dict], out_dir) -> list[str]:
    """One CSV per run with the loss curves; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    by_source: dict[str, list] = {}
    for r in records:
        by_source.setdefault(r["source"], []).append(r)
    written = []
    for source, recs in sorted(by_source.items()):
        path = os.path.join(out_dir, f"{source}_loss.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            keys = ["step"] + [k for k in LOSS_KEYS if k in recs[0]] + ["lr"]
            w.writerow(keys)
            for r in recs:
                w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])
        written.append(path)
    return written


def report(metric_paths=(), bench_paths=(), out_dir=None) -> str:
    """Render everything into one text report; optionally write plot data to ``out_dir``."""
    records = read_metrics(metric_paths)
    parts = []
    text = summarize(records)
    if text:
        parts.append(text)
    for path in bench_paths:
        doc = read_bench(path)
        render = {"threshold-sweep": threshold_table, "length-sweep": length_table,
                  "cache-speedup": cache_table}.get(doc["format"])
        if render is None:
            raise ValueError(f"{path}: unknown benchmark kind {doc['format']!r}")
        parts.append(f"{doc['format']} ({os.path.basename(path)})\n" + render(doc["rows"]))
    if out_dir is not None and records:
        write_plot_data(records, out_dir)
    return "\n".join(parts)
