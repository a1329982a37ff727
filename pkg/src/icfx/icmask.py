"""Segment-level attention flow rules compiled to boolean masks.

The canonical flow table routes information so that the target side can read
the reference video content but reference-side tokens never see target-side
or concept tokens, and target video tokens never read the reference prompt.
That last closed edge is the leakage guard: without it the generated video
can pick up subjects/backgrounds named only in the reference's prompt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import MANDATORY_SEGMENTS, SegmentKind, SegmentLayout

_ALL = frozenset(SegmentKind)

_CANONICAL = {
    SegmentKind.TARGET_TEXT: _ALL,
    SegmentKind.REF_TEXT: frozenset({SegmentKind.REF_TEXT, SegmentKind.REF_VIDEO}),
    SegmentKind.TARGET_VIDEO: frozenset({
        SegmentKind.TARGET_TEXT, SegmentKind.TARGET_VIDEO,
        SegmentKind.REF_VIDEO, SegmentKind.CONCEPT,
    }),
    SegmentKind.REF_VIDEO: frozenset({SegmentKind.REF_TEXT, SegmentKind.REF_VIDEO}),
    SegmentKind.CONCEPT: _ALL,
}


class FlowTableError(ValueError):
    """Flow table or layout unusable for mask construction."""


@dataclass(frozen=True)
class FlowTable:
    """Permission matrix over segment kinds: allowed(query_kind, key_kind)."""

    rules: dict[SegmentKind, frozenset[SegmentKind]]

    @classmethod
    def canonical(cls) -> "FlowTable":
        return cls(dict(_CANONICAL))

    @classmethod
    def all_allowed(cls) -> "FlowTable":
        """Ablation table: every segment attends everywhere (mask-off mode)."""
        return cls({k: _ALL for k in SegmentKind})

    @classmethod
    def for_mode(cls, mode: str) -> "FlowTable":
        if mode == "canonical":
            return cls.canonical()
        if mode == "none":
            return cls.all_allowed()
        raise FlowTableError(f"unknown mask mode {mode!r} (expected 'canonical' or 'none')")

    def allows(self, query: SegmentKind, key: SegmentKind) -> bool:
        return key in self.rules[query]

    def allowed_keys(self, query: SegmentKind) -> frozenset[SegmentKind]:
        return self.rules[query]


def leakage_paths(table: FlowTable) -> list[tuple[SegmentKind, SegmentKind]]:
    """All forbidden (query, key) segment pairs, in a stable order."""
    order = list(SegmentKind)
    return [(q, k) for q in order for k in order if not table.allows(q, k)]


def build_mask(layout: SegmentLayout, table: FlowTable) -> np.ndarray:
    """Boolean (total, total) matrix: entry (i, j) true iff query i may read key j."""
    for kind in MANDATORY_SEGMENTS:
        if not layout.has(kind) or layout.get(kind).length <= 0:
            raise FlowTableError(f"layout is missing mandatory segment {kind}")
    n = layout.total
    mask = np.zeros((n, n), dtype=bool)
    for q in layout.segments:
        qs = layout.slice_of(q.kind)
        for k in layout.segments:
            if table.allows(q.kind, k.kind):
                mask[qs, layout.slice_of(k.kind)] = True
    if not mask.any(axis=1).all():
        raise FlowTableError("flow table leaves a query segment with no allowed keys")
    return mask


def allowed_entry_count(layout: SegmentLayout, table: FlowTable) -> int:
    """Closed-form count of allowed (query, key) pairs from block arithmetic."""
    total = 0
    for q in layout.segments:
        keys = sum(k.length for k in layout.segments if table.allows(q.kind, k.kind))
        total += q.length * keys
    return total


def additive_mask(mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Boolean mask to additive form: 0 where allowed, -inf where not."""
    if not mask.any(axis=-1).all():
        raise FlowTableError("additive_mask: fully-masked row")
    out = np.zeros(mask.shape, dtype=dtype)
    out[~mask] = -np.inf
    return out


def mask_to_pbm(mask: np.ndarray) -> str:
    """Portable bitmap (P1) text; 1 = allowed. Used for golden-file tests."""
    h, w = mask.shape
    lines = [f"P1", f"{w} {h}"]
    lines += [" ".join("1" if v else "0" for v in row) for row in mask]
    return "\n".join(lines) + "\n"


def mask_from_pbm(text: str) -> np.ndarray:
    tokens = [t for line in text.splitlines()
              for t in line.split("#")[0].split()]
    if not tokens or tokens[0] != "P1":
        raise FlowTableError("not a P1 portable bitmap")
    w, h = int(tokens[1]), int(tokens[2])
    bits = np.array([int(t) for t in tokens[3:]], dtype=np.int64)
    if bits.size != w * h:
        raise FlowTableError(f"bitmap holds {bits.size} bits, expected {w * h}")
    return bits.reshape(h, w).astype(bool)
