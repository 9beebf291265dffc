"""Ring-parallel generation with a KV-cache and in-flight error correction.

Each step feeds the freshly assembled input segment (already-generated area
plus prompt markers on the new border) through one unmasked incremental
forward, samples all border positions in parallel, and lets the same forward's
logits over the already-generated area revise earlier choices.  Sampling draws
one counter-based uniform per (step, row, col), so results are reproducible
and independent of evaluation order within a step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .grids import (CropExtent, RingSchedule, TokenGrid, center_fill,
                    extend_schedule, make_schedule)
from .model import RingTransformer

CORRECTION_MODES = ("off", "greedy", "thresholded")


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    top_k: int | None = None
    cfg_scale: float | None = None    # guidance scale; None disables guidance
    correction_mode: str = "greedy"
    correction_threshold: float = 0.5  # acceptance bar for thresholded mode
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.cfg_scale is not None and self.cfg_scale < 1.0:
            raise ValueError("cfg_scale must be at least 1")
        if self.correction_mode not in CORRECTION_MODES:
            raise ValueError(f"correction_mode must be one of {CORRECTION_MODES}")


@dataclass(frozen=True)
class Revision:
    step: int
    row: int
    col: int
    old: int
    new: int


@dataclass
class DecodeState:
    """Cache, running grid and audit trail of one generation."""

    schedule: RingSchedule
    class_id: int
    kv_cache: list = field(default_factory=list)
    kv_cache_uncond: list = field(default_factory=list)
    current: np.ndarray | None = None  # defined inside the last processed extent
    revision_log: list[Revision] = field(default_factory=list)
    step_cursor: int = 0
    forwards: int = 0
    fed_inputs: list[np.ndarray] = field(default_factory=list)
    border_logits: list[np.ndarray] = field(default_factory=list)  # when captured

    @property
    def cache_len(self) -> int:
        return int(self.kv_cache[0][0].shape[2]) if self.kv_cache else 0


def position_uniform(seed: int, step: int, row: int, col: int) -> float:
    """One uniform from a counter-based stream keyed by (seed, step, row, col)."""
    bits = np.random.Philox(counter=[row, col, 0, 0], key=[seed, step])
    return float(np.random.Generator(bits).random())


def ring_uniforms(seed: int, step: int, rows: np.ndarray,
                  cols: np.ndarray) -> np.ndarray:
    return np.array([position_uniform(seed, step, int(r), int(c))
                     for r, c in zip(rows, cols)], dtype=np.float64)


def combine_guidance(cond: np.ndarray, uncond: np.ndarray,
                     scale: float) -> np.ndarray:
    if scale == 1.0:
        return cond
    return uncond + scale * (cond - uncond)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_border(logits: np.ndarray, sampler: SamplerConfig,
                  uniforms: np.ndarray) -> np.ndarray:
    """Independent tempered, truncated categorical draws, one per position."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite logits passed to the sampler")
    if sampler.top_k is not None:
        if sampler.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if sampler.top_k > logits.shape[-1]:
            raise ValueError("top_k exceeds the vocabulary size")
        if sampler.top_k == 1:
            return logits.argmax(axis=-1).astype(np.int64)
        order = np.argsort(-logits, axis=-1, kind="stable")[:, :sampler.top_k]
        kept = np.full_like(logits, -np.inf)
        np.put_along_axis(kept, order, np.take_along_axis(logits, order, axis=-1),
                          axis=-1)
        logits = kept
    probs = _softmax(logits / sampler.temperature)
    cum = np.cumsum(probs, axis=-1)
    ids = (cum < uniforms[:, None]).sum(axis=-1)
    return np.minimum(ids, logits.shape[-1] - 1).astype(np.int64)


def correct_interior(logits: np.ndarray, current: np.ndarray, mode: str,
                     threshold: float = 0.5) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """Revise already-generated tokens from their refreshed logits.

    Greedy mode takes the new argmax; thresholded mode additionally requires
    the challenger's probability to exceed the threshold.  Returns the updated
    ids and (index, old, new) for every change.
    """
    current = np.asarray(current, dtype=np.int64)
    if mode == "off":
        return current.copy(), []
    logits = np.asarray(logits, dtype=np.float64)
    new = logits.argmax(axis=-1).astype(np.int64)
    if mode == "greedy":
        accept = new != current
    elif mode == "thresholded":
        probs = _softmax(logits)
        p_new = probs[np.arange(len(new)), new]
        accept = (new != current) & (p_new > threshold)
    else:
        raise ValueError(f"unknown correction mode {mode!r}")
    updated = np.where(accept, new, current)
    revisions = [(int(i), int(current[i]), int(new[i])) for i in np.flatnonzero(accept)]
    return updated, revisions


def _segment_meta(extent: CropExtent, interior: CropExtent | None):
    rr, cc = np.meshgrid(np.arange(extent.top, extent.bottom),
                         np.arange(extent.left, extent.right), indexing="ij")
    rows, cols = rr.ravel(), cc.ravel()
    if interior is None:
        inside = np.zeros(rows.shape, dtype=bool)
    else:
        inside = ((rows >= interior.top) & (rows < interior.bottom)
                  & (cols >= interior.left) & (cols < interior.right))
    return rows, cols, inside


def _forward_segment(model: RingTransformer, state: DecodeState, ids: np.ndarray,
                     rows: np.ndarray, cols: np.ndarray, step_ordinal: int,
                     class_id: int, cache: list, with_prefix: bool):
    with torch.no_grad():
        h = model.embed_tokens(torch.from_numpy(ids)[None, :], rows, cols,
                               np.full(len(ids), step_ordinal, dtype=np.int64))
        bias = None
        if with_prefix:
            prefix = model.embed_class(torch.tensor([class_id]))
            h = torch.cat([prefix, h], dim=1)
            # The conditioning prefix attends only itself (as in training);
            # its cached keys/values must not absorb the first segment.
            bias = torch.zeros(h.shape[1], h.shape[1], dtype=model.dtype)
            bias[0, 1:] = float("-inf")
        logits, new_cache = model(h, bias=bias, kv_cache=cache or None)
    state.forwards += 1
    seg_logits = logits[0, 1:, :] if with_prefix else logits[0]
    return seg_logits.to(torch.float64).numpy(), new_cache


def decode(model: RingTransformer, class_id: int, schedule: RingSchedule,
           sampler: SamplerConfig, known: dict[tuple[int, int], int] | None = None,
           allow_extrapolation: bool = False, step_hook=None,
           capture_logits: bool = False) -> tuple[TokenGrid, DecodeState]:
    """Generate a full grid in exactly ``len(schedule)`` model forwards.

    ``known`` pins positions to fixed ids for out-painting and editing: a
    pinned position is forced whenever it is sampled or corrected, so the
    output always agrees with it.  ``step_hook(state)`` runs after every step
    and may mutate ``state.current`` (instrumentation/fault injection).
    """
    cfg = model.cfg
    if not 0 <= class_id <= cfg.num_classes:
        raise ValueError(f"class id {class_id} out of range")
    max_h, max_w = cfg.max_grid
    if (schedule.grid_height > max_h or schedule.grid_width > max_w) \
            and not allow_extrapolation:
        raise ValueError("schedule exceeds the model grid; enable extrapolation")
    known = dict(known or {})
    for (r, c), v in known.items():
        if not (0 <= r < schedule.grid_height and 0 <= c < schedule.grid_width):
            raise ValueError(f"known position {(r, c)} outside the grid")
        if not 0 <= v < cfg.vocab_size:
            raise ValueError(f"known id {v} outside the vocabulary")

    guided = sampler.cfg_scale is not None
    state = DecodeState(schedule=schedule, class_id=class_id)
    state.current = np.full((schedule.grid_height, schedule.grid_width), -1,
                            dtype=np.int64)

    for k, extent in enumerate(schedule.extents, start=1):
        interior = schedule.extents[k - 2] if k >= 2 else None
        rows, cols, inside = _segment_meta(extent, interior)
        if interior is None:
            ids = np.full(extent.area, cfg.prompt_id, dtype=np.int64)
        else:
            inner = TokenGrid.from_array(
                state.current[interior.top:interior.bottom,
                              interior.left:interior.right], cfg.vocab_size)
            ids = center_fill(extent, inner, interior, cfg.prompt_id).ravel()
        state.fed_inputs.append(ids.copy())

        logits, state.kv_cache = _forward_segment(
            model, state, ids, rows, cols, k, class_id, state.kv_cache,
            with_prefix=(k == 1))
        if guided:
            null_logits, state.kv_cache_uncond = _forward_segment(
                model, state, ids, rows, cols, k, cfg.num_classes,
                state.kv_cache_uncond, with_prefix=(k == 1))
            logits = combine_guidance(logits, null_logits, sampler.cfg_scale)
        if not np.isfinite(logits).all():
            raise FloatingPointError(f"non-finite logits at step {k}")

        border = ~inside
        b_rows, b_cols = rows[border], cols[border]
        uniforms = ring_uniforms(sampler.seed, k, b_rows, b_cols)
        sampled = sample_border(logits[border], sampler, uniforms)
        for i, (r, c) in enumerate(zip(b_rows, b_cols)):
            pin = known.get((int(r), int(c)))
            if pin is not None:
                sampled[i] = pin
        if capture_logits:
            state.border_logits.append(logits[border].copy())

        if interior is not None:
            i_rows, i_cols = rows[inside], cols[inside]
            old = state.current[i_rows, i_cols]
            updated, revisions = correct_interior(
                logits[inside], old, sampler.correction_mode,
                sampler.correction_threshold)
            for idx, old_id, new_id in revisions:
                r, c = int(i_rows[idx]), int(i_cols[idx])
                if (r, c) in known:
                    updated[idx] = known[(r, c)]
                    continue
                state.revision_log.append(Revision(k, r, c, old_id, new_id))
            state.current[i_rows, i_cols] = updated
        state.current[b_rows, b_cols] = sampled
        state.step_cursor = k
        if step_hook is not None:
            step_hook(state)

    grid = TokenGrid.from_array(state.current, cfg.vocab_size)
    return grid, state


def constrained_decode(model: RingTransformer, class_id: int,
                       schedule: RingSchedule,
                       known: dict[tuple[int, int], int],
                       sampler: SamplerConfig) -> tuple[TokenGrid, DecodeState]:
    """Generation with pinned tokens (out-painting / region editing)."""
    return decode(model, class_id, schedule, sampler, known=known)


def extrapolate_decode(model: RingTransformer, class_id: int, target_h: int,
                       target_w: int, sampler: SamplerConfig,
                       base_schedule: RingSchedule | None = None
                       ) -> tuple[TokenGrid, DecodeState]:
    """Generate beyond the training grid by appending thickness-1 rings.

    Early steps reuse the base schedule re-anchored in the larger frame; step
    embeddings past the table clamp to its last entry.
    """
    max_h, max_w = model.cfg.max_grid
    if target_h < max_h or target_w < max_w:
        raise ValueError("extrapolation target must be at least the training grid")
    if base_schedule is None:
        base_schedule = make_schedule(max_h, max_w, "center", 1)
    extended = extend_schedule(base_schedule, target_h, target_w)
    return decode(model, class_id, extended, sampler, allow_extrapolation=True)


def raster_decode(model: RingTransformer, class_id: int,
                  sampler: SamplerConfig,
                  grid_h: int | None = None, grid_w: int | None = None
                  ) -> tuple[TokenGrid, DecodeState]:
    """Token-by-token baseline: one forward per grid cell, KV-cached."""
    cfg = model.cfg
    h, w = (grid_h or cfg.max_grid[0]), (grid_w or cfg.max_grid[1])
    dummy = make_schedule(h, w, "center", 1)
    state = DecodeState(schedule=dummy, class_id=class_id)
    state.current = np.full((h, w), -1, dtype=np.int64)
    cells = state.current.ravel()
    cache: list = []
    with torch.no_grad():
        prev = model.embed_class(torch.tensor([class_id]))
        for i in range(h * w):
            logits, cache = model(prev, bias=None, kv_cache=cache or None)
            state.forwards += 1
            r, c = divmod(i, w)
            u = np.array([position_uniform(sampler.seed, i + 1, r, c)])
            row_logits = logits[0, -1:, :].to(torch.float64).numpy()
            if not np.isfinite(row_logits).all():
                raise FloatingPointError(f"non-finite logits at raster position {i}")
            cells[i] = sample_border(row_logits, sampler, u)[0]
            prev = model.embed_tokens(
                torch.tensor([[cells[i]]]), np.array([r]), np.array([c]),
                np.array([i + 1]))
            state.step_cursor = i + 1
    state.kv_cache = cache
    grid = TokenGrid.from_array(state.current, cfg.vocab_size)
    return grid, state
