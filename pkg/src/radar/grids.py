"""2D token-grid geometry: ring schedules, crops, center-fill and sequence layouts.

Everything in this module is pure and operates on immutable values, so any
function may be called concurrently from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

REGION_BORDER = 0
REGION_INTERIOR = 1

VALID_ANCHORS = (
    "center",
    "edge:top", "edge:bottom", "edge:left", "edge:right",
    "corner:top_left", "corner:top_right", "corner:bottom_left", "corner:bottom_right",
)


class ScheduleError(ValueError):
    """Raised when a ring schedule cannot be constructed as requested."""


@dataclass(frozen=True)
class TokenGrid:
    """A rectangular grid of discrete token ids drawn from [0, vocab_size)."""

    height: int
    width: int
    vocab_size: int
    cells: np.ndarray  # (height, width) int64, read-only

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid dimensions must be positive")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        cells = np.ascontiguousarray(self.cells, dtype=np.int64)
        if cells.shape != (self.height, self.width):
            raise ValueError(f"cells shape {cells.shape} != ({self.height}, {self.width})")
        if cells.size and (cells.min() < 0 or cells.max() >= self.vocab_size):
            raise ValueError("token id out of range [0, vocab_size)")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def from_array(cls, cells: np.ndarray, vocab_size: int) -> "TokenGrid":
        cells = np.asarray(cells, dtype=np.int64)
        return cls(cells.shape[0], cells.shape[1], vocab_size, cells)

    @classmethod
    def constant(cls, height: int, width: int, token: int, vocab_size: int) -> "TokenGrid":
        return cls(height, width, vocab_size, np.full((height, width), token, dtype=np.int64))

    def to_text(self) -> str:
        return "\n".join(" ".join(str(v) for v in row) for row in self.cells) + "\n"

    @classmethod
    def from_text(cls, text: str, vocab_size: int) -> "TokenGrid":
        rows = [[int(v) for v in line.split()] for line in text.splitlines() if line.strip()]
        if not rows:
            raise ValueError("empty grid text")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise ValueError("ragged grid text")
        return cls.from_array(np.array(rows, dtype=np.int64), vocab_size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return (self.height, self.width, self.vocab_size) == (
            other.height, other.width, other.vocab_size
        ) and bool(np.array_equal(self.cells, other.cells))


@dataclass(frozen=True, order=True)
class CropExtent:
    """Half-open rectangle: rows [top, bottom), cols [left, right)."""

    top: int
    left: int
    bottom: int
    right: int

    def __post_init__(self):
        if not (self.top < self.bottom and self.left < self.right):
            raise ValueError(f"degenerate extent {self}")
        if self.top < 0 or self.left < 0:
            raise ValueError(f"extent {self} escapes the grid")

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def area(self) -> int:
        return self.height * self.width

    def contains(self, other: "CropExtent") -> bool:
        return (self.top <= other.top and self.left <= other.left
                and self.bottom >= other.bottom and self.right >= other.right)

    def covers(self, row: int, col: int) -> bool:
        return self.top <= row < self.bottom and self.left <= col < self.right

    @classmethod
    def full(cls, height: int, width: int) -> "CropExtent":
        return cls(0, 0, height, width)


GrowthStep = tuple[int, int, int, int]  # per-side thickness (top, bottom, left, right)


@dataclass(frozen=True)
class RingSchedule:
    """Strictly nested crop extents growing from an anchor out to the full grid."""

    anchor: str
    extents: tuple[CropExtent, ...]
    grid_height: int
    grid_width: int

    def __post_init__(self):
        if self.anchor not in VALID_ANCHORS:
            raise ScheduleError(f"unknown anchor {self.anchor!r}")
        if not self.extents:
            raise ScheduleError("empty schedule")
        full = CropExtent.full(self.grid_height, self.grid_width)
        for ext in self.extents:
            if not full.contains(ext):
                raise ScheduleError(f"extent {ext} escapes {self.grid_height}x{self.grid_width} grid")
        for prev, cur in zip(self.extents, self.extents[1:]):
            if not cur.contains(prev) or cur.area <= prev.area:
                raise ScheduleError(f"extents not strictly nested: {prev} -> {cur}")
        if self.extents[-1] != full:
            raise ScheduleError("final extent must cover the full grid")

    @property
    def num_steps(self) -> int:
        return len(self.extents)

    def __len__(self) -> int:
        return len(self.extents)


def _initial_extent(grid_h: int, grid_w: int, anchor: str,
                    initial: tuple[int, int] | None) -> CropExtent:
    """Seed extent for an anchor; sizes default to grid parity (1 or 2 per axis)."""
    def parity_size(dim: int) -> int:
        return min(dim, 2 - dim % 2)

    kind, _, detail = anchor.partition(":")
    if initial is not None:
        h0, w0 = initial
    elif kind == "center":
        h0, w0 = parity_size(grid_h), parity_size(grid_w)
    elif kind == "corner":
        h0, w0 = 1, 1
    elif kind == "edge":
        if detail in ("top", "bottom"):
            h0, w0 = 1, parity_size(grid_w)
        else:
            h0, w0 = parity_size(grid_h), 1
    else:  # pragma: no cover - anchor validated upstream
        raise ScheduleError(f"unknown anchor {anchor!r}")
    if not (1 <= h0 <= grid_h and 1 <= w0 <= grid_w):
        raise ScheduleError(f"initial extent {h0}x{w0} does not fit {grid_h}x{grid_w}")

    # Ties (odd margins) break toward the top-left.
    if kind == "center":
        top, left = (grid_h - h0) // 2, (grid_w - w0) // 2
    elif kind == "corner":
        top = 0 if detail.startswith("top") else grid_h - h0
        left = 0 if detail.endswith("left") else grid_w - w0
    else:
        if detail == "top":
            top, left = 0, (grid_w - w0) // 2
        elif detail == "bottom":
            top, left = grid_h - h0, (grid_w - w0) // 2
        elif detail == "left":
            top, left = (grid_h - h0) // 2, 0
        else:
            top, left = (grid_h - h0) // 2, grid_w - w0
    return CropExtent(top, left, top + h0, left + w0)


def _normalize_growth(step) -> GrowthStep:
    if isinstance(step, int):
        g = (step, step, step, step)
    else:
        g = tuple(int(v) for v in step)
        if len(g) != 4:
            raise ScheduleError(f"growth step must be an int or 4-tuple, got {step!r}")
    if any(v < 0 for v in g) or all(v == 0 for v in g):
        raise ScheduleError(f"growth step {g} must be non-negative with at least one positive side")
    return g


def _grow(ext: CropExtent, g: GrowthStep, grid_h: int, grid_w: int,
          clamp: bool) -> CropExtent:
    """Grow each side by its thickness; sides at the grid boundary stay put."""
    gt, gb, gl, gr = g
    sides = []
    for cur, limit, amount, inward in (
        (ext.top, 0, gt, -1), (ext.bottom, grid_h, gb, +1),
        (ext.left, 0, gl, -1), (ext.right, grid_w, gr, +1),
    ):
        room = (cur - limit) if inward < 0 else (limit - cur)
        if amount > room:
            if not clamp and room > 0:
                raise ScheduleError(f"growth step {g} overshoots the grid from {ext}")
            amount = room
        sides.append(cur + inward * amount)
    new_top, new_bottom, new_left, new_right = sides
    return CropExtent(new_top, new_left, new_bottom, new_right)


def make_schedule(grid_h: int, grid_w: int, anchor: str = "center",
                  growth: int | Sequence = 1,
                  initial: tuple[int, int] | None = None) -> RingSchedule:
    """Build a ring schedule for a grid.

    ``growth`` is either a uniform per-side border thickness (repeated until
    the full grid is reached, clamped at the boundary) or an explicit list of
    per-step thicknesses, each an int or a ``(top, bottom, left, right)``
    tuple.  Explicit lists must land exactly on the full grid: a step that
    overshoots a side not already at the boundary, adds no area, or leaves the
    grid uncovered is a :class:`ScheduleError`.
    """
    if grid_h < 1 or grid_w < 1:
        raise ScheduleError("grid dimensions must be positive")
    if anchor not in VALID_ANCHORS:
        raise ScheduleError(f"unknown anchor {anchor!r}")
    full = CropExtent.full(grid_h, grid_w)
    ext = _initial_extent(grid_h, grid_w, anchor, initial)
    extents = [ext]

    if ext != full:
        if isinstance(growth, int):
            g = _normalize_growth(growth)
            while ext != full:
                nxt = _grow(ext, g, grid_h, grid_w, clamp=True)
                if nxt.area <= ext.area:  # pragma: no cover - positive growth always has room
                    raise ScheduleError("uniform growth stalled before covering the grid")
                ext = nxt
                extents.append(ext)
        else:
            for raw in growth:
                if ext == full:
                    raise ScheduleError("growth spec overshoots: grid already covered")
                g = _normalize_growth(raw)
                nxt = _grow(ext, g, grid_h, grid_w, clamp=False)
                if nxt.area <= ext.area:
                    raise ScheduleError(f"growth step {g} adds no area at {ext}")
                ext = nxt
                extents.append(ext)
            if ext != full:
                raise ScheduleError("growth spec never reaches the full grid")
    return RingSchedule(anchor, tuple(extents), grid_h, grid_w)


def make_stepcount_schedule(grid_h: int, grid_w: int, n_steps: int,
                            anchor: str = "center") -> RingSchedule:
    """Build a center-out schedule with an exact number of steps.

    Uses single-axis growth steps to stretch beyond the uniform ring count and
    all-side steps to compress toward it, so intermediate step counts such as
    10 or 13 on a 16x16 grid are expressible.
    """
    if anchor != "center":
        raise ScheduleError("exact step counts are only supported for the center anchor")
    ext0 = _initial_extent(grid_h, grid_w, anchor, None)
    v = (grid_h - ext0.height + 1) // 2  # uniform-1 vertical ring count
    p = (grid_w - ext0.width + 1) // 2
    if n_steps == 1 and v == 0 and p == 0:
        return make_schedule(grid_h, grid_w, anchor, 1)
    a = v + p - (n_steps - 1)  # number of all-side steps
    if not (0 <= a <= min(v, p)):
        raise ScheduleError(
            f"{n_steps} steps infeasible on a {grid_h}x{grid_w} grid "
            f"(feasible range {max(v, p) + 1}..{v + p + 1})")
    growth: list[GrowthStep] = []
    for i in range(max(v - a, p - a)):
        if i < v - a:
            growth.append((1, 1, 0, 0))
        if i < p - a:
            growth.append((0, 0, 1, 1))
    growth.extend([(1, 1, 1, 1)] * a)
    return make_schedule(grid_h, grid_w, anchor, growth)


def make_anchored_stepcount_schedule(grid_h: int, grid_w: int, anchor: str,
                                     n_steps: int) -> RingSchedule:
    """Exact step count for any anchor by thickening rings as needed.

    Each side's remaining distance to the grid edge is spread as evenly as
    possible over the growth steps, so anchors can be compared at equal
    parallelism (same number of decode forwards).
    """
    ext0 = _initial_extent(grid_h, grid_w, anchor, None)
    if n_steps < 1:
        raise ScheduleError("need at least one step")
    if n_steps == 1:
        if (ext0.height, ext0.width) != (grid_h, grid_w):
            raise ScheduleError("one step only covers a grid the initial extent fills")
        return RingSchedule(anchor, (ext0,), grid_h, grid_w)
    k = n_steps - 1
    totals = (ext0.top, grid_h - ext0.bottom, ext0.left, grid_w - ext0.right)
    if max(totals) < 1:
        raise ScheduleError("initial extent already covers the grid")

    def spread(total: int) -> list[int]:
        base, rem = divmod(total, k)
        return [base + (1 if i < rem else 0) for i in range(k)]

    per_side = [spread(t) for t in totals]
    growth = [tuple(side[i] for side in per_side) for i in range(k)]
    return make_schedule(grid_h, grid_w, anchor, growth)


def schedule_subset(s: RingSchedule, keep: Iterable[int]) -> RingSchedule:
    """Restrict a schedule to the kept step indices (must retain the last)."""
    idx = sorted(set(int(i) for i in keep))
    if not idx:
        raise ScheduleError("keep set is empty")
    if idx[0] < 0 or idx[-1] >= s.num_steps:
        raise ScheduleError(f"keep indices out of range 0..{s.num_steps - 1}")
    if idx[-1] != s.num_steps - 1:
        raise ScheduleError("keep set must contain the final extent")
    return RingSchedule(s.anchor, tuple(s.extents[i] for i in idx), s.grid_height, s.grid_width)


def crop(g: TokenGrid, e: CropExtent) -> TokenGrid:
    if not CropExtent.full(g.height, g.width).contains(e):
        raise ValueError(f"extent {e} out of bounds for {g.height}x{g.width} grid")
    return TokenGrid.from_array(g.cells[e.top:e.bottom, e.left:e.right], g.vocab_size)


def center_fill(outer_extent: CropExtent, inner: TokenGrid | None,
                inner_extent: CropExtent | None, fill_marker: int) -> np.ndarray:
    """Paste ``inner`` into a ``fill_marker``-initialized canvas over ``outer_extent``.

    Returns an annotated ``(outer.height, outer.width)`` int array: positions
    covered by ``inner_extent`` carry the inner grid's ids, the surrounding
    border carries the marker.  The marker is a sentinel, not a vocabulary id;
    it is resolved to the learned prompt vector at embedding time.
    """
    out = np.full((outer_extent.height, outer_extent.width), fill_marker, dtype=np.int64)
    if inner is None and inner_extent is None:
        return out
    if inner is None or inner_extent is None:
        raise ValueError("inner grid and inner extent must be given together")
    if not outer_extent.contains(inner_extent):
        raise ValueError(f"inner extent {inner_extent} not nested in {outer_extent}")
    if (inner.height, inner.width) != (inner_extent.height, inner_extent.width):
        raise ValueError("inner grid dimensions do not match inner extent")
    r0, c0 = inner_extent.top - outer_extent.top, inner_extent.left - outer_extent.left
    out[r0:r0 + inner.height, c0:c0 + inner.width] = inner.cells
    return out


@dataclass(frozen=True)
class StepSegment:
    """One step's slice of the flattened sequence, in row-major position order."""

    step_index: int  # 1-based
    extent: CropExtent
    interior_extent: CropExtent | None  # previous step's extent, None for step 1
    start: int  # offset of this segment in the flat sequence
    rows: np.ndarray
    cols: np.ndarray
    region: np.ndarray  # REGION_BORDER / REGION_INTERIOR per position

    @property
    def length(self) -> int:
        return self.rows.shape[0]

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class SequenceLayout:
    """Flattened (step, row, col, region) metadata for a schedule's sequence."""

    segments: tuple[StepSegment, ...]
    steps: np.ndarray  # 1-based step ordinal per position
    rows: np.ndarray
    cols: np.ndarray
    region: np.ndarray
    grid_height: int
    grid_width: int

    @property
    def total_len(self) -> int:
        return self.steps.shape[0]

    @property
    def num_steps(self) -> int:
        return len(self.segments)


def _segment_positions(extent: CropExtent, interior: CropExtent | None):
    rr, cc = np.meshgrid(
        np.arange(extent.top, extent.bottom),
        np.arange(extent.left, extent.right),
        indexing="ij",
    )
    rows, cols = rr.ravel(), cc.ravel()
    if interior is None:
        region = np.full(rows.shape, REGION_BORDER, dtype=np.int8)
    else:
        inside = ((rows >= interior.top) & (rows < interior.bottom)
                  & (cols >= interior.left) & (cols < interior.right))
        region = np.where(inside, REGION_INTERIOR, REGION_BORDER).astype(np.int8)
    return rows, cols, region


def layout_from_schedule(s: RingSchedule) -> SequenceLayout:
    segments = []
    offset = 0
    for k, ext in enumerate(s.extents, start=1):
        interior = s.extents[k - 2] if k >= 2 else None
        rows, cols, region = _segment_positions(ext, interior)
        for arr in (rows, cols, region):
            arr.setflags(write=False)
        segments.append(StepSegment(k, ext, interior, offset, rows, cols, region))
        offset += rows.shape[0]
    steps = np.concatenate([np.full(seg.length, seg.step_index, dtype=np.int64)
                            for seg in segments])
    rows = np.concatenate([seg.rows for seg in segments])
    cols = np.concatenate([seg.cols for seg in segments])
    region = np.concatenate([seg.region for seg in segments])
    for arr in (steps, rows, cols, region):
        arr.setflags(write=False)
    return SequenceLayout(tuple(segments), steps, rows, cols, region,
                          s.grid_height, s.grid_width)


def raster_layout(grid_h: int, grid_w: int) -> SequenceLayout:
    """Token-by-token layout: each position is its own step, all border.

    Feeding this layout to the mask builder yields a plain causal mask, which
    is the sequential-baseline configuration.
    """
    n = grid_h * grid_w
    rows = np.repeat(np.arange(grid_h), grid_w)
    cols = np.tile(np.arange(grid_w), grid_h)
    steps = np.arange(1, n + 1, dtype=np.int64)
    region = np.full(n, REGION_BORDER, dtype=np.int8)
    segments = []
    for i in range(n):
        r, c = int(rows[i]), int(cols[i])
        segments.append(StepSegment(
            i + 1, CropExtent(r, c, r + 1, c + 1), None, i,
            rows[i:i + 1], cols[i:i + 1], region[i:i + 1]))
    for arr in (steps, rows, cols, region):
        arr.setflags(write=False)
    return SequenceLayout(tuple(segments), steps, rows, cols, region, grid_h, grid_w)


def radial_encode(g: TokenGrid, s: RingSchedule,
                  prompt_id: int | None = None) -> tuple[list[np.ndarray], list[TokenGrid], SequenceLayout]:
    """Expand a grid into per-step teacher-forcing inputs and targets.

    Targets are the successive crops of ``g``.  Input ``k`` is the previous
    crop pasted into a prompt-marker canvas over extent ``k``; the first input
    is all markers so every target has an aligned input segment.
    """
    if (s.grid_height, s.grid_width) != (g.height, g.width):
        raise ValueError("schedule grid dimensions do not match the token grid")
    prompt = g.vocab_size if prompt_id is None else prompt_id
    targets = [crop(g, e) for e in s.extents]
    inputs = [center_fill(s.extents[0], None, None, prompt)]
    for k in range(1, s.num_steps):
        inputs.append(center_fill(s.extents[k], targets[k - 1], s.extents[k - 1], prompt))
    return inputs, targets, layout_from_schedule(s)


def flatten_segments(grids: Sequence[np.ndarray | TokenGrid]) -> np.ndarray:
    """Concatenate per-step grids into one flat id vector in layout order."""
    parts = [g.cells.ravel() if isinstance(g, TokenGrid) else np.asarray(g).ravel()
             for g in grids]
    return np.concatenate(parts).astype(np.int64)


def ring_diff(s: RingSchedule, k: int) -> list[tuple[int, int]]:
    """Row-major coordinates newly covered at step ``k`` (1-based)."""
    if not 1 <= k <= s.num_steps:
        raise ValueError(f"step {k} out of range 1..{s.num_steps}")
    ext = s.extents[k - 1]
    prev = s.extents[k - 2] if k >= 2 else None
    out = []
    for r in range(ext.top, ext.bottom):
        for c in range(ext.left, ext.right):
            if prev is None or not prev.covers(r, c):
                out.append((r, c))
    return out


def assemble_grid(s: RingSchedule, targets: Sequence[TokenGrid]) -> TokenGrid:
    """Rebuild the full grid from per-step target crops (round-trip check)."""
    if len(targets) != s.num_steps:
        raise ValueError("one target crop per step required")
    cells = np.zeros((s.grid_height, s.grid_width), dtype=np.int64)
    for ext, tgt in zip(s.extents, targets):
        cells[ext.top:ext.bottom, ext.left:ext.right] = tgt.cells
    return TokenGrid.from_array(cells, targets[-1].vocab_size)


def schedule_to_text(s: RingSchedule) -> str:
    lines = [f"grid: {s.grid_height} {s.grid_width}", f"anchor: {s.anchor}"]
    for k, e in enumerate(s.extents, start=1):
        lines.append(f"{k}: {e.top},{e.left},{e.bottom},{e.right}")
    return "\n".join(lines) + "\n"


def schedule_from_text(text: str) -> RingSchedule:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if len(lines) < 3 or not lines[0].startswith("grid:") or not lines[1].startswith("anchor:"):
        raise ScheduleError("malformed schedule file: expected grid/anchor header")
    try:
        grid_h, grid_w = (int(v) for v in lines[0].split(":", 1)[1].split())
    except ValueError as exc:
        raise ScheduleError(f"malformed grid line {lines[0]!r}") from exc
    anchor = lines[1].split(":", 1)[1].strip()
    extents = []
    for expected, line in enumerate(lines[2:], start=1):
        head, _, body = line.partition(":")
        if int(head) != expected:
            raise ScheduleError(f"schedule steps out of order at line {line!r}")
        t, l, b, r = (int(v) for v in body.split(","))
        extents.append(CropExtent(t, l, b, r))
    return RingSchedule(anchor, tuple(extents), grid_h, grid_w)


def extend_schedule(s: RingSchedule, target_h: int, target_w: int) -> RingSchedule:
    """Re-anchor a schedule inside a larger grid and append thickness-1 rings.

    The original extents are shifted so their anchor keeps its meaning in the
    target frame (centered schedules stay centered, corner schedules stay in
    their corner), then the border grows one ring at a time to the target.
    """
    if target_h < s.grid_height or target_w < s.grid_width:
        raise ScheduleError("target grid must be at least the schedule's grid")
    kind, _, detail = s.anchor.partition(":")
    dh, dw = target_h - s.grid_height, target_w - s.grid_width
    if kind == "center":
        off_r, off_c = dh // 2, dw // 2
    elif kind == "corner":
        off_r = 0 if detail.startswith("top") else dh
        off_c = 0 if detail.endswith("left") else dw
    else:
        if detail == "top":
            off_r, off_c = 0, dw // 2
        elif detail == "bottom":
            off_r, off_c = dh, dw // 2
        elif detail == "left":
            off_r, off_c = dh // 2, 0
        else:
            off_r, off_c = dh // 2, dw
    extents = [CropExtent(e.top + off_r, e.left + off_c, e.bottom + off_r, e.right + off_c)
               for e in s.extents]
    ext = extents[-1]
    full = CropExtent.full(target_h, target_w)
    while ext != full:
        ext = _grow(ext, (1, 1, 1, 1), target_h, target_w, clamp=True)
        extents.append(ext)
    return RingSchedule(s.anchor, tuple(extents), target_h, target_w)
