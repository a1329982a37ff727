"""Unified token sequence assembly and 3D rotary positions.

The sequence layout is fixed as [target text, reference text, target video,
reference video, (concept tokens)]. Video tokens from the target and the
reference carry identical (t, y, x) rotary positions so attention between
them sees only relative spatial-temporal offsets; text tokens use a learned
per-slot bias instead, and concept tokens carry no positional encoding.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# ---------------------------------------------------------------------------
# closed prompt vocabulary

PAD, BOS = 0, 1
SHAPE_TOKENS = {"circle": 2, "square": 3, "triangle": 4}
COLOR_TOKEN_BASE = 5          # 6 palette colors: ids 5..10
NUM_COLORS = 6
EFFECT_TOKEN_BASE = 11        # family ids assigned in synthvfx registration order
EFFECT_TOKENS = {
    "dissolve": 11,
    "explode": 12,
    "melt": 13,
    "freeze": 14,
    "sparkle": 15,
}
VOCAB_SIZE = 16
PROMPT_LEN = 8

_EFFECT_ID_SET = frozenset(EFFECT_TOKENS.values())


class PromptError(ValueError):
    """Prompt token ids out of vocabulary or structurally invalid."""


@dataclass(frozen=True)
class PromptTokens:
    """Fixed-length prompt: [BOS, shape, subject color, background color, effect, PAD...]."""

    ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) != PROMPT_LEN:
            raise PromptError(f"prompt length {len(self.ids)} != {PROMPT_LEN}")
        if any(i < 0 or i >= VOCAB_SIZE for i in self.ids):
            raise PromptError(f"prompt id out of range: {self.ids}")
        if sum(1 for i in self.ids if i in _EFFECT_ID_SET) != 1:
            raise PromptError(f"prompt must contain exactly one effect token: {self.ids}")

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)


def build_prompt(shape: str, subject_color: int, background_color: int, family: str) -> PromptTokens:
    ids = [BOS, SHAPE_TOKENS[shape], COLOR_TOKEN_BASE + subject_color,
           COLOR_TOKEN_BASE + background_color, EFFECT_TOKENS[family]]
    ids += [PAD] * (PROMPT_LEN - len(ids))
    return PromptTokens(tuple(ids))


# ---------------------------------------------------------------------------
# segment layout

class SegmentKind(str, Enum):
    TARGET_TEXT = "target_text"
    REF_TEXT = "ref_text"
    TARGET_VIDEO = "target_video"
    REF_VIDEO = "ref_video"
    CONCEPT = "concept"


SEGMENT_ORDER = (
    SegmentKind.TARGET_TEXT,
    SegmentKind.REF_TEXT,
    SegmentKind.TARGET_VIDEO,
    SegmentKind.REF_VIDEO,
    SegmentKind.CONCEPT,
)

MANDATORY_SEGMENTS = SEGMENT_ORDER[:4]


class LayoutError(ValueError):
    """Segment layout violates ordering/contiguity rules."""


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    offset: int
    length: int


@dataclass(frozen=True)
class SegmentLayout:
    """Ordered, contiguous segments covering the whole token sequence."""

    segments: tuple[Segment, ...]

    def __post_init__(self):
        off = 0
        seen = set()
        for seg in self.segments:
            if seg.kind in seen:
                raise LayoutError(f"duplicate segment kind {seg.kind}")
            seen.add(seg.kind)
            if seg.offset != off:
                raise LayoutError(f"segment {seg.kind} offset {seg.offset} != expected {off}")
            if seg.length <= 0:
                raise LayoutError(f"segment {seg.kind} has non-positive length {seg.length}")
            off += seg.length
        for kind in MANDATORY_SEGMENTS:
            if kind not in seen:
                raise LayoutError(f"missing mandatory segment {kind}")

    @property
    def total(self) -> int:
        return sum(s.length for s in self.segments)

    def has(self, kind: SegmentKind) -> bool:
        return any(s.kind == kind for s in self.segments)

    def get(self, kind: SegmentKind) -> Segment:
        for s in self.segments:
            if s.kind == kind:
                return s
        raise LayoutError(f"layout has no segment {kind}")

    def slice_of(self, kind: SegmentKind) -> slice:
        s = self.get(kind)
        return slice(s.offset, s.offset + s.length)

    def lengths(self) -> list[int]:
        return [s.length for s in self.segments]


def standard_layout(prompt_len: int, video_tokens: int, concept_len: int = 0) -> SegmentLayout:
    segs = []
    off = 0
    for kind, length in (
        (SegmentKind.TARGET_TEXT, prompt_len),
        (SegmentKind.REF_TEXT, prompt_len),
        (SegmentKind.TARGET_VIDEO, video_tokens),
        (SegmentKind.REF_VIDEO, video_tokens),
        (SegmentKind.CONCEPT, concept_len),
    ):
        if length == 0 and kind is SegmentKind.CONCEPT:
            continue
        segs.append(Segment(kind, off, length))
        off += length
    return SegmentLayout(tuple(segs))


# ---------------------------------------------------------------------------
# rotary positions

ROPE_AXIS_RATIO = (1, 1, 2)  # rotary pairs allocated t : y : x


class RopeConfigError(ValueError):
    """Head dim incompatible with the t:y:x rotary pair allocation."""


def rope_pair_allocation(head_dim: int) -> tuple[int, int, int]:
    if head_dim % 2 != 0:
        raise RopeConfigError(f"head_dim {head_dim} must be even")
    pairs = head_dim // 2
    unit = sum(ROPE_AXIS_RATIO)
    if pairs % unit != 0:
        raise RopeConfigError(
            f"{pairs} rotary pairs cannot be split {ROPE_AXIS_RATIO[0]}:{ROPE_AXIS_RATIO[1]}:{ROPE_AXIS_RATIO[2]}"
        )
    k = pairs // unit
    return ROPE_AXIS_RATIO[0] * k, ROPE_AXIS_RATIO[1] * k, ROPE_AXIS_RATIO[2] * k


def grid_positions(grid: tuple[int, int, int]) -> np.ndarray:
    """(t, y, x) for each token of a frame-major flattened grid."""
    fp, hp, wp = grid
    t, y, x = np.meshgrid(np.arange(fp), np.arange(hp), np.arange(wp), indexing="ij")
    return np.stack([t.ravel(), y.ravel(), x.ravel()], axis=1).astype(np.int64)


def rope_tables(positions: np.ndarray, rotate_mask: np.ndarray, head_dim: int,
                base: float = 10000.0, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Per-token (cos, sin) of shape (N, head_dim // 2).

    Tokens where rotate_mask is False get the identity rotation (cos=1, sin=0):
    text and concept tokens are not positional content.
    """
    n = positions.shape[0]
    alloc = rope_pair_allocation(head_dim)
    angles = np.zeros((n, head_dim // 2), dtype=np.float64)
    col = 0
    for axis, pairs in enumerate(alloc):
        freqs = base ** (-np.arange(pairs) / pairs)
        angles[:, col:col + pairs] = positions[:, axis:axis + 1].astype(np.float64) * freqs
        col += pairs
    cos = np.cos(angles)
    sin = np.sin(angles)
    keep = rotate_mask.astype(bool)
    cos[~keep] = 1.0
    sin[~keep] = 0.0
    return cos.astype(dtype), sin.astype(dtype)


# ---------------------------------------------------------------------------
# sequence

@dataclass
class UnifiedSequence:
    """Batched token matrix plus layout and per-token rotary geometry."""

    tokens: Tensor                 # (B, N, model_dim)
    layout: SegmentLayout
    positions: np.ndarray          # (N, 3) int, zeros for non-video tokens
    rotate_mask: np.ndarray        # (N,) bool, True where rope applies
    grid: tuple[int, int, int]

    @property
    def batch(self) -> int:
        return self.tokens.data.shape[0]

    @property
    def total(self) -> int:
        return self.tokens.data.shape[1]


class AssemblyError(ValueError):
    """Inputs to sequence assembly disagree with each other or the layout."""


def embed_prompt(ids: np.ndarray, table: Tensor, pos_bias: Tensor) -> Tensor:
    """Lookup + learned per-slot positional bias; ids (B, L) -> (B, L, D)."""
    emb = ad.embedding(table, ids)
    return ad.add(emb, pos_bias)


def assemble(g_target: Tensor, g_ref: Tensor, z_target: Tensor, z_ref: Tensor,
             grid: tuple[int, int, int], z_concept: Tensor | None = None) -> UnifiedSequence:
    """Concatenate projected segments along the token axis and attach positions.

    All inputs must already be projected to the model width. z_target and
    z_ref must live on the same token grid; the reference is mandatory.
    """
    if z_ref is None:
        raise AssemblyError("reference video tokens are mandatory")
    b, lp, d = g_target.data.shape
    if g_ref.data.shape != (b, lp, d):
        raise AssemblyError(f"prompt shapes differ: {g_target.data.shape} vs {g_ref.data.shape}")
    video_tokens = int(np.prod(grid))
    if z_target.data.shape != (b, video_tokens, d):
        raise AssemblyError(
            f"target video tokens {z_target.data.shape} != (B={b}, {video_tokens}, {d}) for grid {grid}")
    if z_ref.data.shape != z_target.data.shape:
        raise AssemblyError(
            f"reference grid mismatch: {z_ref.data.shape} vs {z_target.data.shape}")
    parts = [g_target, g_ref, z_target, z_ref]
    concept_len = 0
    if z_concept is not None:
        if z_concept.data.ndim == 2:
            z_concept = ad.tile_leading(z_concept, b)
        if z_concept.data.shape[0] != b or z_concept.data.shape[2] != d:
            raise AssemblyError(f"concept tokens shape {z_concept.data.shape} incompatible")
        concept_len = z_concept.data.shape[1]
        parts.append(z_concept)
    tokens = ad.concat(parts, axis=1)
    layout = standard_layout(lp, video_tokens, concept_len)

    positions = np.zeros((layout.total, 3), dtype=np.int64)
    rotate_mask = np.zeros(layout.total, dtype=bool)
    vid_pos = grid_positions(grid)
    for kind in (SegmentKind.TARGET_VIDEO, SegmentKind.REF_VIDEO):
        sl = layout.slice_of(kind)
        positions[sl] = vid_pos
        rotate_mask[sl] = True
    return UnifiedSequence(tokens, layout, positions, rotate_mask, grid)
