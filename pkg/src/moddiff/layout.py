"""Segment layouts, block-causal attention masks and loss masks.

A packed input sequence is described by an ordered list of :class:`Segment`.
Attention is full inside a segment, causal across the segments of a sample
(a query sees its own segment and every earlier one) and blocked between
samples. Text format, one segment per line::

    # layout v1
    <sample_id> <turn> <modality> <role> <length> [active]
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, LayoutError

LAYOUT_FORMAT_VERSION = 1


class Modality(str, Enum):
    TEXT = "TEXT"
    VIS_ENC = "VIS_ENC"
    VIS_LAT = "VIS_LAT"


class Role(str, Enum):
    PROMPT = "PROMPT"
    RESPONSE = "RESPONSE"
    CONDITION = "CONDITION"
    TARGET = "TARGET"


class LossMode(str, Enum):
    UND = "UND"
    GEN = "GEN"
    INTERLEAVED = "INTERLEAVED"


@dataclass(frozen=True)
class Segment:
    modality: Modality
    role: Role
    length: int
    sample_id: int = 0
    turn_index: int = 0
    # trailing blocks currently being denoised (everything before them is a fixed prefix)
    active: bool = False

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "role", Role(self.role))
        if int(self.length) < 1:
            raise LayoutError(f"segment length must be >= 1, got {self.length}")
        if self.sample_id < 0 or self.turn_index < 0:
            raise LayoutError("sample_id and turn_index must be non-negative")

    @property
    def is_latent(self) -> bool:
        return self.modality is Modality.VIS_LAT

    def with_(self, **changes) -> "Segment":
        fields = dict(
            modality=self.modality, role=self.role, length=self.length,
            sample_id=self.sample_id, turn_index=self.turn_index, active=self.active,
        )
        fields.update(changes)
        return Segment(**fields)


@dataclass(frozen=True)
class SegmentLayout:
    segments: tuple[Segment, ...]
    total_len: int = field(init=False)

    def __init__(self, segments: Iterable[Segment]):
        segs = tuple(segments)
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "total_len", sum(s.length for s in segs))
        seen, prev = set(), None
        for s in segs:
            if s.sample_id != prev:
                if s.sample_id in seen:
                    raise LayoutError(f"segments of sample {s.sample_id} are not contiguous")
                seen.add(s.sample_id)
                prev = s.sample_id

    def __len__(self) -> int:
        return len(self.segments)

    def __add__(self, other: "SegmentLayout") -> "SegmentLayout":
        return SegmentLayout(self.segments + tuple(other.segments))

    def per_position(self, attr: str) -> np.ndarray:
        return np.repeat([getattr(s, attr) for s in self.segments], [s.length for s in self.segments])

    def segment_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.segments)), [s.length for s in self.segments])

    def sample_ids(self) -> np.ndarray:
        return self.per_position("sample_id").astype(np.int64)

    def latent_positions(self) -> np.ndarray:
        return np.repeat([s.is_latent for s in self.segments], [s.length for s in self.segments]).astype(bool)

    def position_ids(self) -> np.ndarray:
        """Offset of every position from the start of its sample."""
        out = np.empty(self.total_len, dtype=np.int64)
        start, prev, pos = 0, None, 0
        for s in self.segments:
            if s.sample_id != prev:
                start, prev = pos, s.sample_id
            out[pos:pos + s.length] = np.arange(pos - start, pos - start + s.length)
            pos += s.length
        return out

    def starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([s.length for s in self.segments])[:-1]]).astype(np.int64)

    def samples(self) -> list["SegmentLayout"]:
        groups: dict[int, list[Segment]] = {}
        for s in self.segments:
            groups.setdefault(s.sample_id, []).append(s)
        return [SegmentLayout(g) for g in groups.values()]

    def fingerprint(self, upto: int | None = None) -> str:
        """Digest of the segments covering positions ``[0, upto)``.

        ``upto`` must fall on a segment boundary. The ``active`` flag is not part
        of the digest: a block keeps its identity once it is completed.
        """
        upto = self.total_len if upto is None else upto
        h = hashlib.sha256()
        pos = 0
        for s in self.segments:
            if pos >= upto:
                break
            if pos + s.length > upto:
                raise LayoutError(f"position {upto} splits a segment")
            h.update(f"{s.sample_id} {s.turn_index} {s.modality.value} {s.role.value} {s.length};".encode())
            pos += s.length
        if pos != upto:
            raise LayoutError(f"layout has only {pos} positions, cannot fingerprint {upto}")
        return h.hexdigest()[:16]

    def head(self, upto: int) -> "SegmentLayout":
        """Segments covering ``[0, upto)``; ``upto`` must be a segment boundary."""
        out, pos = [], 0
        for s in self.segments:
            if pos >= upto:
                break
            if pos + s.length > upto:
                raise LayoutError(f"position {upto} splits a segment")
            out.append(s)
            pos += s.length
        return SegmentLayout(out)

    # text format -------------------------------------------------------
    def dumps(self) -> str:
        lines = [f"# layout v{LAYOUT_FORMAT_VERSION}"]
        for s in self.segments:
            line = f"{s.sample_id} {s.turn_index} {s.modality.value} {s.role.value} {s.length}"
            lines.append(line + (" active" if s.active else ""))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SegmentLayout":
        segs = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if line.startswith("# layout v"):
                version = int(line.split("v", 1)[1])
                if version != LAYOUT_FORMAT_VERSION:
                    raise LayoutError(f"unsupported layout format version {version}")
                continue
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (5, 6) or (len(parts) == 6 and parts[5] != "active"):
                raise LayoutError(f"line {lineno}: expected 'sample turn modality role length [active]'")
            sid, turn, mod, role, length = parts[:5]
            segs.append(Segment(Modality(mod), Role(role), int(length), int(sid), int(turn), len(parts) == 6))
        return cls(segs)


def loads_many(text: str) -> list[SegmentLayout]:
    """Parse several layouts separated by blank lines."""
    blocks, cur = [], []
    for line in text.splitlines():
        if line.strip():
            cur.append(line)
        elif cur:
            blocks.append("\n".join(cur))
            cur = []
    if cur:
        blocks.append("\n".join(cur))
    return [SegmentLayout.loads(b) for b in blocks]


@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray  # [total_len, total_len], allowed[q, k]

    def __post_init__(self):
        self.allowed.setflags(write=False)


def build_mask(layout: SegmentLayout) -> AttentionMask:
    seg = layout.segment_index()
    sample = layout.sample_ids()
    allowed = (sample[:, None] == sample[None, :]) & (seg[None, :] <= seg[:, None])
    return AttentionMask(allowed)


def prefix_boundary(layout: SegmentLayout) -> int:
    """Length of the fixed prefix in front of the trailing active block(s)."""
    first = next((i for i, s in enumerate(layout.segments) if s.active), None)
    if first is None:
        raise ContractError("layout has no active segment")
    if not all(s.active for s in layout.segments[first:]):
        raise ContractError("active segments must all be at the end of the layout")
    return sum(s.length for s in layout.segments[:first])


def loss_positions(layout: SegmentLayout, mode: LossMode | str) -> np.ndarray:
    mode = LossMode(mode)
    out = np.zeros(layout.total_len, dtype=bool)
    pos = 0
    for s in layout.segments:
        if mode is LossMode.UND:
            hit = s.modality is Modality.TEXT and s.role is Role.RESPONSE
        elif mode is LossMode.GEN:
            hit = s.is_latent and s.role is Role.TARGET
        else:
            hit = s.is_latent
        out[pos:pos + s.length] = hit
        pos += s.length
    return out


def single(modality, role, length, **kw) -> SegmentLayout:
    return SegmentLayout([Segment(Modality(modality), Role(role), length, **kw)])


def layout_of(spec: Sequence[tuple], sample_id: int = 0) -> SegmentLayout:
    """Build a one-sample layout from ``(modality, role, length[, turn[, active]])`` tuples."""
    segs = []
    for item in spec:
        modality, role, length, *rest = item
        turn = rest[0] if rest else 0
        active = rest[1] if len(rest) > 1 else False
        segs.append(Segment(Modality(modality), Role(role), length, sample_id, turn, active))
    return SegmentLayout(segs)
