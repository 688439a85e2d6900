"""Deterministic synthetic multimodal corpus.

Token map for the default 66-id vocabulary::

    0..31   visual-encoder tokens, 4 per image class
    32..35  question tokens
    36..39  caption-class tokens (generation prompts)
    40      ASK marker, 41 DRAW marker
    42..63  answer tokens
    64      MASK, 65 EOS

An understanding answer for image class ``c`` and question ``q`` has length
``4 + 4 * ((5c + 11q) mod 12)`` (so 4..48) and token ``j`` equal to
``42 + (3c + 7q + j) mod 22``. Caption class ``g`` maps to an isotropic
Gaussian around a point on a circle; in interleaved samples turn ``k`` draws
its latent from the component keyed by the XOR of all prompt classes so far.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .layout import Modality, Role, Segment, SegmentLayout, loads_many

KIND_UND, KIND_GEN, KIND_IL = 0, 1, 2
CORPUS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class WorldSpec:
    vocab_size: int = 66
    n_classes: int = 8
    vis_len: int = 4
    vis_per_class: int = 4
    n_questions: int = 4
    min_answer_len: int = 4
    answer_len_step: int = 4
    answer_len_levels: int = 12
    answer_vocab: int = 22
    n_gen_classes: int = 4
    latent_dim: int = 2
    n_latent_tokens: int = 4
    sigma: float = 0.1
    radius: float = 1.0

    def __post_init__(self):
        if self.answer_base + self.answer_vocab > self.mask_id:
            raise ValueError("token map does not fit in the vocabulary")
        if self.n_gen_classes & (self.n_gen_classes - 1):
            raise ValueError("n_gen_classes must be a power of two (XOR keyed turns)")

    # token map
    @property
    def mask_id(self) -> int:
        return self.vocab_size - 2

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 1

    @property
    def question_base(self) -> int:
        return self.n_classes * self.vis_per_class

    @property
    def caption_base(self) -> int:
        return self.question_base + self.n_questions

    @property
    def ask_id(self) -> int:
        return self.caption_base + self.n_gen_classes

    @property
    def draw_id(self) -> int:
        return self.ask_id + 1

    @property
    def answer_base(self) -> int:
        return self.draw_id + 1

    @property
    def max_answer_len(self) -> int:
        return self.min_answer_len + self.answer_len_step * (self.answer_len_levels - 1)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    # rules
    def answer_length(self, c: int, q: int) -> int:
        return self.min_answer_len + self.answer_len_step * ((5 * c + 11 * q) % self.answer_len_levels)

    def answer(self, c: int, q: int) -> np.ndarray:
        j = np.arange(self.answer_length(c, q))
        return (self.answer_base + (3 * c + 7 * q + j) % self.answer_vocab).astype(np.int64)

    def length_law(self) -> dict[int, float]:
        """Distribution of the answer length under uniform class and question."""
        law: dict[int, float] = {}
        p = 1.0 / (self.n_classes * self.n_questions)
        for c in range(self.n_classes):
            for q in range(self.n_questions):
                n = self.answer_length(c, q)
                law[n] = law.get(n, 0.0) + p
        return dict(sorted(law.items()))

    def class_mean(self, g: int) -> np.ndarray:
        ang = 2 * np.pi * g / self.n_gen_classes + np.pi / 4
        mu = np.zeros(self.latent_dim)
        mu[0], mu[1] = self.radius * np.cos(ang), self.radius * np.sin(ang)
        return mu

    def min_separation(self) -> float:
        means = np.stack([self.class_mean(g) for g in range(self.n_gen_classes)])
        d = np.linalg.norm(means[:, None] - means[None], axis=-1)
        return float(d[~np.eye(len(means), dtype=bool)].min())


@dataclass(frozen=True)
class UndSample:
    vis: np.ndarray
    prompt: np.ndarray
    response: np.ndarray
    cls: int
    question: int

    def layout(self, response_len: int | None = None, sample_id: int = 0) -> SegmentLayout:
        n = len(self.response) if response_len is None else response_len
        segs = [
            Segment(Modality.VIS_ENC, Role.CONDITION, len(self.vis), sample_id),
            Segment(Modality.TEXT, Role.PROMPT, len(self.prompt), sample_id),
        ]
        if n:
            segs.append(Segment(Modality.TEXT, Role.RESPONSE, n, sample_id))
        return SegmentLayout(segs)

    def prefix(self) -> np.ndarray:
        return np.concatenate([self.vis, self.prompt])


@dataclass(frozen=True)
class GenSample:
    """A (possibly multi-turn) prompt/latent sample; one turn for plain generation."""

    prompts: tuple
    latents: tuple
    classes: tuple

    @property
    def prompt(self) -> np.ndarray:
        return self.prompts[-1]

    @property
    def latent(self) -> np.ndarray:
        return self.latents[-1]

    def layout(self, sample_id: int = 0) -> SegmentLayout:
        segs = []
        for k, (p, z) in enumerate(zip(self.prompts, self.latents)):
            segs.append(Segment(Modality.TEXT, Role.PROMPT, len(p), sample_id, k))
            segs.append(Segment(Modality.VIS_LAT, Role.TARGET, len(z), sample_id, k))
        return SegmentLayout(segs)

    def tokens(self) -> np.ndarray:
        """Ids for every position (zeros at latent positions)."""
        parts = []
        for p, z in zip(self.prompts, self.latents):
            parts += [p, np.zeros(len(z), dtype=np.int64)]
        return np.concatenate(parts)

    def all_latents(self) -> np.ndarray:
        return np.concatenate(self.latents)


def gen_und_sample(spec: WorldSpec, rng: np.random.Generator) -> UndSample:
    c = int(rng.integers(spec.n_classes))
    vis = c * spec.vis_per_class + rng.integers(spec.vis_per_class, size=spec.vis_len)
    q = int(rng.integers(spec.n_questions))
    prompt = np.array([spec.ask_id, spec.question_base + q], dtype=np.int64)
    return UndSample(vis.astype(np.int64), prompt, spec.answer(c, q), c, q)


def _draw_turn(spec: WorldSpec, rng: np.random.Generator, key: int):
    g = int(rng.integers(spec.n_gen_classes))
    prompt = np.array([spec.draw_id, spec.caption_base + g], dtype=np.int64)
    comp = g ^ key
    z = spec.class_mean(comp) + spec.sigma * rng.standard_normal((spec.n_latent_tokens, spec.latent_dim))
    return g, prompt, z, comp


def gen_gen_sample(spec: WorldSpec, rng: np.random.Generator) -> GenSample:
    g, prompt, z, _ = _draw_turn(spec, rng, 0)
    return GenSample((prompt,), (z,), (g,))


def gen_interleaved_sample(spec: WorldSpec, rng: np.random.Generator, turns: int = 2) -> GenSample:
    """Alternating prompt/latent turns; turn ``k`` is keyed by the XOR of prompts ``0..k``."""
    if turns < 1:
        raise ValueError("turns must be >= 1")
    prompts, latents, classes = [], [], []
    key = 0
    for _ in range(turns):
        g, prompt, z, key = _draw_turn(spec, rng, key)
        prompts.append(prompt)
        latents.append(z)
        classes.append(g)
    return GenSample(tuple(prompts), tuple(latents), tuple(classes))


class Corpus:
    """Lazily generated corpus; sample ``i`` of a kind depends only on (spec, seed, split, i)."""

    def __init__(self, spec: WorldSpec = WorldSpec(), seed: int = 0, n_und: int = 50_000,
                 n_gen: int = 50_000, n_il: int = 10_000, split: str = "train", il_turns: int = 2):
        self.spec = spec
        self.seed = seed
        self.n_und, self.n_gen, self.n_il = n_und, n_gen, n_il
        self.split = split
        self.il_turns = il_turns
        self._split_code = {"train": 0, "eval": 1}.get(
            split, int(hashlib.sha256(split.encode()).hexdigest()[:6], 16) + 2)
        self.und = lru_cache(maxsize=None)(self._und)
        self.gen = lru_cache(maxsize=None)(self._gen)
        self.il = lru_cache(maxsize=None)(self._il)

    def _rng(self, kind: int, i: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self._split_code, kind, i])

    def _und(self, i: int) -> UndSample:
        return gen_und_sample(self.spec, self._rng(KIND_UND, i))

    def _gen(self, i: int) -> GenSample:
        return gen_gen_sample(self.spec, self._rng(KIND_GEN, i))

    def _il(self, i: int) -> GenSample:
        return gen_interleaved_sample(self.spec, self._rng(KIND_IL, i), self.il_turns)

    def counts(self) -> dict:
        return {"und": self.n_und, "gen": self.n_gen, "il": self.n_il}


# ---------------------------------------------------------------------------
# persistence: layouts in the text format, flat numeric files, JSON manifest


def write_corpus(path, corpus: Corpus) -> None:
    os.makedirs(path, exist_ok=True)
    spec = corpus.spec
    with open(os.path.join(path, "und.layout"), "w") as fl, open(os.path.join(path, "und.tokens"), "w") as ft:
        for i in range(corpus.n_und):
            s = corpus.und(i)
            fl.write(s.layout().dumps() + "\n")
            ft.write(" ".join(map(str, np.concatenate([s.vis, s.prompt, s.response]))) + f" | {s.cls} {s.question}\n")
    for kind, n, get in (("gen", corpus.n_gen, corpus.gen), ("il", corpus.n_il, corpus.il)):
        with open(os.path.join(path, f"{kind}.layout"), "w") as fl, \
                open(os.path.join(path, f"{kind}.tokens"), "w") as ft, \
                open(os.path.join(path, f"{kind}.latents"), "w") as fz:
            for i in range(n):
                s = get(i)
                fl.write(s.layout().dumps() + "\n")
                ft.write(" ".join(map(str, s.tokens())) + " | " + " ".join(map(str, s.classes)) + "\n")
                for r, row in enumerate(s.all_latents()):
                    fz.write(f"{i},{r}," + ",".join(repr(float(v)) for v in row) + "\n")
    manifest = {
        "format_version": CORPUS_FORMAT_VERSION,
        "spec": asdict(spec),
        "spec_digest": spec.digest(),
        "seed": corpus.seed,
        "split": corpus.split,
        "il_turns": corpus.il_turns,
        "counts": corpus.counts(),
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


class StoredCorpus:
    """Corpus read back from :func:`write_corpus` output; same interface as :class:`Corpus`."""

    def __init__(self, path):
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
        if manifest["format_version"] != CORPUS_FORMAT_VERSION:
            raise ValueError(f"unsupported corpus format {manifest['format_version']}")
        self.spec = WorldSpec(**manifest["spec"])
        if self.spec.digest() != manifest["spec_digest"]:
            raise ValueError("corpus manifest digest mismatch")
        self.seed = manifest["seed"]
        self.split = manifest["split"]
        counts = manifest["counts"]
        self.n_und, self.n_gen, self.n_il = counts["und"], counts["gen"], counts["il"]
        self._und = self._read_und(path)
        self._gen = self._read_gen(path, "gen")
        self._il = self._read_gen(path, "il")

    def _read_und(self, path):
        spec = self.spec
        out = []
        with open(os.path.join(path, "und.tokens")) as fh:
            for line in fh:
                toks, meta = line.split("|")
                ids = np.array(toks.split(), dtype=np.int64)
                c, q = map(int, meta.split())
                vis, prompt = ids[:spec.vis_len], ids[spec.vis_len:spec.vis_len + 2]
                out.append(UndSample(vis, prompt, ids[spec.vis_len + 2:], c, q))
        return out

    def _read_gen(self, path, kind):
        with open(os.path.join(path, f"{kind}.layout")) as fh:
            layouts = loads_many(fh.read())
        rows: dict[int, list] = {}
        with open(os.path.join(path, f"{kind}.latents")) as fh:
            for line in fh:
                parts = line.strip().split(",")
                rows.setdefault(int(parts[0]), []).append([float(v) for v in parts[2:]])
        out = []
        with open(os.path.join(path, f"{kind}.tokens")) as fh:
            for i, line in enumerate(fh):
                toks, meta = line.split("|")
                ids = np.array(toks.split(), dtype=np.int64)
                classes = tuple(int(v) for v in meta.split())
                lay = layouts[i]
                z = np.array(rows[i])
                prompts, latents, pos, r = [], [], 0, 0
                for seg in lay.segments:
                    if seg.is_latent:
                        latents.append(z[r:r + seg.length])
                        r += seg.length
                    else:
                        prompts.append(ids[pos:pos + seg.length])
                    pos += seg.length
                out.append(GenSample(tuple(prompts), tuple(latents), classes))
        return out

    def und(self, i):
        return self._und[i]

    def gen(self, i):
        return self._gen[i]

    def il(self, i):
        return self._il[i]

    def counts(self) -> dict:
        return {"und": self.n_und, "gen": self.n_gen, "il": self.n_il}
