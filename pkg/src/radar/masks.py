"""Attention-permission masks over a flattened ring-schedule sequence.

The mask encodes four rules: every query sees the conditioning prefix and all
strictly earlier steps, newly expanded (border) queries additionally see their
whole step, while already-generated (interior) queries are walled off from the
same step's border so correction decisions cannot be swayed by content that is
itself being generated.  Dropping the interior restriction yields the plain
block-causal baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import REGION_INTERIOR, SequenceLayout

# Dense boolean matrices are materialized up to this sequence length; longer
# sequences fall back to the rule predicate evaluated per row block.
DENSE_LIMIT = 4096


@dataclass(frozen=True)
class NestedMask:
    """Boolean query-by-key permission matrix for one sequence layout."""

    n: int  # total sequence length including the prefix
    prefix_len: int
    layout_ref: SequenceLayout
    interior_restriction: bool
    allowed: np.ndarray | None  # dense (n, n) bool, None beyond DENSE_LIMIT

    def rows(self, start: int, stop: int) -> np.ndarray:
        """Permission rows [start, stop), materialized on the fly if needed."""
        if self.allowed is not None:
            return self.allowed[start:stop]
        return _rule_rows(self.layout_ref, self.prefix_len,
                          self.interior_restriction, start, stop)

    def dense(self) -> np.ndarray:
        if self.allowed is not None:
            return self.allowed
        return self.rows(0, self.n)


def _rule_rows(layout: SequenceLayout, prefix_len: int, interior_restriction: bool,
               start: int, stop: int) -> np.ndarray:
    n = prefix_len + layout.total_len
    steps = np.concatenate([np.zeros(prefix_len, dtype=np.int64), layout.steps])
    interior = np.concatenate([np.zeros(prefix_len, dtype=bool),
                               layout.region == REGION_INTERIOR])
    sq, iq = steps[start:stop, None], interior[start:stop, None]
    sv, iv = steps[None, :], interior[None, :]
    if interior_restriction:
        same_step = (sv == sq) & (~iq | iv)
    else:
        same_step = sv == sq
    out = (sv < sq) | same_step
    # Prefix rows attend the prefix only; prefix columns are open to everyone.
    out[:, :prefix_len] = True
    is_prefix_row = np.arange(start, stop) < prefix_len
    out[is_prefix_row, prefix_len:] = False
    return out


def build_nested_mask(layout: SequenceLayout, prefix_len: int,
                      interior_restriction: bool = True) -> NestedMask:
    """Construct the permission mask for a layout plus conditioning prefix."""
    if prefix_len < 0:
        raise ValueError("prefix_len must be non-negative")
    n = prefix_len + layout.total_len
    allowed = None
    if n <= DENSE_LIMIT:
        allowed = _rule_rows(layout, prefix_len, interior_restriction, 0, n)
        allowed.setflags(write=False)
    return NestedMask(n, prefix_len, layout, interior_restriction, allowed)


@dataclass(frozen=True)
class MaskReport:
    ok: bool
    mismatch: tuple[int, int] | None = None
    detail: str = ""


def check_mask(mask: NestedMask) -> MaskReport:
    """Re-derive every entry from the rules, independently of the builder.

    Walks the matrix with explicit per-entry logic (no vectorized reuse of the
    construction path) and reports the first disagreement.  Test-only oracle;
    quadratic in sequence length.
    """
    layout, p = mask.layout_ref, mask.prefix_len
    step = [0] * p + [int(s) for s in layout.steps]
    inner = [False] * p + [bool(r == REGION_INTERIOR) for r in layout.region]
    got = mask.dense()
    if got.shape != (mask.n, mask.n):
        return MaskReport(False, None, f"matrix shape {got.shape} != ({mask.n}, {mask.n})")
    for q in range(mask.n):
        for v in range(mask.n):
            if v < p:
                want = True  # conditioning prefix is visible to every query
            elif q < p:
                want = False  # prefix queries attend only the prefix
            elif step[v] > step[q]:
                want = False  # no future steps
            elif step[v] < step[q]:
                want = True  # full visibility of earlier steps
            elif not mask.interior_restriction:
                want = True  # block-causal: bidirectional within a step
            elif not inner[q]:
                want = True  # border queries see their whole step
            else:
                want = inner[v]  # interior queries see same-step interior only
            if bool(got[q, v]) != want:
                return MaskReport(False, (q, v),
                                  f"entry ({q}, {v}) is {bool(got[q, v])}, rules say {want}")
    return MaskReport(True)


def block_causal_reference(layout: SequenceLayout, prefix_len: int) -> np.ndarray:
    """Independently built step-causal / within-step-bidirectional matrix."""
    n = prefix_len + layout.total_len
    steps = np.concatenate([np.zeros(prefix_len, dtype=np.int64), layout.steps])
    out = np.zeros((n, n), dtype=bool)
    for q in range(n):
        for v in range(n):
            out[q, v] = steps[v] <= steps[q]
    out[:, :prefix_len] = True
    out[:prefix_len, prefix_len:] = False
    return out
