"""Quantitative harness: held-out NLL, throughput, correction and ablations.

Also hosts the raster-scan sequential baseline: the same transformer trained
with a plain causal mask over a next-token raster sequence, used both as a
quality comparator and as the step-count reference (H*W forwards per grid).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .decode import DecodeState, SamplerConfig, decode, raster_decode
from .grids import (REGION_INTERIOR, RingSchedule, TokenGrid,
                    flatten_segments, layout_from_schedule,
                    make_anchored_stepcount_schedule, make_schedule,
                    radial_encode)
from .masks import build_nested_mask
from .model import ModelConfig, RingTransformer, attention_bias
from .synthetic import SyntheticSource
from .train import (AdamWState, TrainConfig, adamw_step, decay_mask,
                    train_model)

TSV_COLUMNS = ("method", "params", "steps", "forwards", "wallclock_s",
               "wallclock_std", "grids_per_s", "heldout_nll",
               "border_accuracy", "revision_rate", "revision_benefit")


@dataclass
class BenchRow:
    method: str
    params: int = 0
    steps: int = 0
    forwards: int = 0
    wallclock_s: float = float("nan")
    wallclock_std: float = float("nan")
    grids_per_s: float = float("nan")
    heldout_nll: float = float("nan")
    border_accuracy: float = float("nan")
    revision_rate: float = float("nan")
    revision_benefit: float = float("nan")

    def tsv(self) -> str:
        vals = []
        for col in TSV_COLUMNS:
            v = getattr(self, col)
            vals.append(f"{v:.6g}" if isinstance(v, float) else str(v))
        return "\t".join(vals)


def report_tsv(rows: list[BenchRow]) -> str:
    return "\n".join(["\t".join(TSV_COLUMNS)] + [r.tsv() for r in rows]) + "\n"


def nll_report(model: RingTransformer, src, schedule: RingSchedule,
               n_grids: int, rng: np.random.Generator,
               interior_restriction: bool = True,
               batch_size: int = 8) -> dict:
    """Teacher-forced NLL per token over fresh grids, canonical schedule.

    Returns total / border / interior means, per-step sums and border argmax
    accuracy.  No step dropout or input noise is applied.
    """
    layout = layout_from_schedule(schedule)
    mask = build_nested_mask(layout, 1, interior_restriction)
    inner = layout.region == REGION_INTERIOR
    steps = layout.steps
    per_step_sum = np.zeros(schedule.num_steps)
    totals = np.zeros(3)  # loss sums: all, border, interior
    counts = np.zeros(3)
    correct = np.zeros(1)
    remaining = n_grids
    while remaining > 0:
        b = min(batch_size, remaining)
        remaining -= b
        pairs = [src.sample_pair(rng) for _ in range(b)]
        flat_inputs = torch.from_numpy(np.stack(
            [flatten_segments(radial_encode(g, schedule)[0]) for g, _ in pairs]))
        flat_targets = torch.from_numpy(np.stack(
            [flatten_segments(radial_encode(g, schedule)[1]) for g, _ in pairs]))
        classes = torch.tensor([c for _, c in pairs])
        with torch.no_grad():
            h = model.embed_sequence(layout, flat_inputs, classes)
            logits, _ = model(h, attention_bias(mask, model.dtype))
            logits = logits[:, 1:, :]
            losses = F.cross_entropy(
                logits.reshape(-1, model.cfg.vocab_size),
                flat_targets.reshape(-1), reduction="none").view(flat_targets.shape)
            preds = logits.argmax(dim=-1)
        ls = losses.numpy()
        totals += (ls.sum(), ls[:, ~inner].sum(), ls[:, inner].sum())
        counts += (ls.size, ls[:, ~inner].size, ls[:, inner].size)
        for k in range(schedule.num_steps):
            per_step_sum[k] += ls[:, steps == k + 1].sum()
        correct += (preds.numpy()[:, ~inner] == flat_targets.numpy()[:, ~inner]).sum()
    return {
        "nll": totals[0] / counts[0],
        "border_nll": totals[1] / counts[1],
        "interior_nll": totals[2] / counts[2] if counts[2] else 0.0,
        "per_step_sum": per_step_sum,
        "total_sum": totals[0],
        "total_count": counts[0],
        "border_accuracy": float(correct[0] / counts[1]),
    }


def heldout_nll(model: RingTransformer, src, schedule: RingSchedule,
                n_grids: int, rng: np.random.Generator) -> float:
    """Mean held-out negative log-likelihood per token (nats)."""
    return float(nll_report(model, src, schedule, n_grids, rng)["nll"])


# ---------------------------------------------------------------------------
# Raster-scan sequential baseline
# ---------------------------------------------------------------------------

def raster_batch(model: RingTransformer, grids: list[TokenGrid],
                 classes: np.ndarray):
    """Shifted next-token tensors: class prefix predicts the first token."""
    h, w = grids[0].height, grids[0].width
    n = h * w
    tokens = np.stack([g.cells.ravel() for g in grids])
    rows = np.repeat(np.arange(h), w)[:n - 1]
    cols = np.tile(np.arange(w), h)[:n - 1]
    steps = np.arange(1, n, dtype=np.int64)
    inputs = torch.from_numpy(tokens[:, :n - 1])
    targets = torch.from_numpy(tokens)
    emb = model.embed_tokens(inputs, rows, cols, steps)
    prefix = model.embed_class(torch.from_numpy(classes))
    return torch.cat([prefix, emb], dim=1), targets


def raster_losses(model: RingTransformer, grids: list[TokenGrid],
                  classes: np.ndarray) -> torch.Tensor:
    """(B, H*W) per-token cross-entropy under the causal raster order."""
    h, targets = raster_batch(model, grids, classes)
    n = h.shape[1]
    bias = torch.zeros(n, n, dtype=model.dtype)
    bias.masked_fill_(torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1),
                      float("-inf"))
    logits, _ = model(h, bias)
    return F.cross_entropy(logits.reshape(-1, model.cfg.vocab_size),
                           targets.reshape(-1), reduction="none"
                           ).view(targets.shape)


def train_raster(model: RingTransformer, src, cfg: TrainConfig) -> list[float]:
    """Equal-budget trainer for the baseline (same optimizer and data flow)."""
    rng = np.random.default_rng(cfg.seed)
    state = AdamWState()
    decay = decay_mask(model)
    params = dict(model.named_parameters())
    history = []
    n_batches = max(1, math.ceil(cfg.grids_per_epoch / cfg.batch_size))
    for _ in range(cfg.epochs):
        total, count = 0.0, 0
        for _ in range(n_batches):
            pairs = [src.sample_pair(rng) for _ in range(cfg.batch_size)]
            grids = [g for g, _ in pairs]
            classes = np.array([c for _, c in pairs], dtype=np.int64)
            model.zero_grad(set_to_none=True)
            losses = raster_losses(model, grids, classes)
            loss = losses.mean()
            if not torch.isfinite(loss):
                raise RuntimeError("non-finite loss in raster baseline training")
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            adamw_step({k: params[k] for k in grads}, grads, state, cfg, decay)
            total += loss.item() * losses.numel()
            count += losses.numel()
        history.append(total / count)
    return history


def raster_nll(model: RingTransformer, src, n_grids: int,
               rng: np.random.Generator, batch_size: int = 8) -> float:
    total, count = 0.0, 0
    remaining = n_grids
    while remaining > 0:
        b = min(batch_size, remaining)
        remaining -= b
        pairs = [src.sample_pair(rng) for _ in range(b)]
        with torch.no_grad():
            losses = raster_losses(model, [g for g, _ in pairs],
                                   np.array([c for _, c in pairs]))
        total += float(losses.sum())
        count += losses.numel()
    return total / count


# ---------------------------------------------------------------------------
# Correction statistics
# ---------------------------------------------------------------------------

def interior_exposures(schedule: RingSchedule) -> int:
    """Total number of interior positions shown across all steps of one decode."""
    return sum(e.area for e in schedule.extents[:-1])


def correction_stats(states: list[DecodeState],
                     truths: list[TokenGrid]) -> dict:
    """Revision frequency and its net effect against known ground truth.

    ``revision_benefit`` is the fraction of revisions that move a wrong token
    to the true one minus the fraction that corrupt an already-correct token.
    """
    exposures = sum(interior_exposures(st.schedule) for st in states)
    n_rev = n_fix = n_break = 0
    for st, truth in zip(states, truths):
        for rev in st.revision_log:
            n_rev += 1
            t = int(truth.cells[rev.row, rev.col])
            if rev.old != t and rev.new == t:
                n_fix += 1
            elif rev.old == t and rev.new != t:
                n_break += 1
    return {
        "revision_rate": n_rev / exposures if exposures else 0.0,
        "revision_benefit": (n_fix - n_break) / n_rev if n_rev else 0.0,
        "revisions": n_rev,
    }


# ---------------------------------------------------------------------------
# Throughput
# ---------------------------------------------------------------------------

def time_decodes(fn, n: int = 100, warmup: int = 10) -> dict:
    """Wallclock stats over n timed decodes after warmup; single-threaded."""
    for _ in range(warmup):
        fn()
    times = []
    forwards = []
    for _ in range(n):
        t0 = time.perf_counter()
        _, state = fn()
        times.append(time.perf_counter() - t0)
        forwards.append(state.forwards)
    times_arr = np.array(times)
    return {
        "mean_s": float(times_arr.mean()),
        "std_s": float(times_arr.std()),
        "grids_per_s": float(1.0 / times_arr.mean()),
        "forwards": int(forwards[0]),
        "all_same_forwards": len(set(forwards)) == 1,
    }


def speed_suite(ring_model: RingTransformer, raster_model: RingTransformer,
                schedules: dict[str, RingSchedule], sampler: SamplerConfig,
                n: int = 100, warmup: int = 10) -> list[BenchRow]:
    rows = []
    for name, sched in schedules.items():
        stats = time_decodes(
            lambda sched=sched: decode(ring_model, 0, sched, sampler),
            n=n, warmup=warmup)
        rows.append(BenchRow(
            method=f"ring[{name}]", params=ring_model.num_parameters(),
            steps=sched.num_steps, forwards=stats["forwards"],
            wallclock_s=stats["mean_s"], wallclock_std=stats["std_s"],
            grids_per_s=stats["grids_per_s"]))
    stats = time_decodes(lambda: raster_decode(raster_model, 0, sampler),
                         n=n, warmup=warmup)
    h, w = raster_model.cfg.max_grid
    rows.append(BenchRow(
        method="raster", params=raster_model.num_parameters(),
        steps=h * w, forwards=stats["forwards"],
        wallclock_s=stats["mean_s"], wallclock_std=stats["std_s"],
        grids_per_s=stats["grids_per_s"]))
    return rows


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

def ablation_suite(model_cfg: ModelConfig, train_cfg: TrainConfig,
                   src_factory, eval_grids: int = 64,
                   anchors: tuple[str, ...] = ("center", "edge:top", "corner:top_left"),
                   seeds: tuple[int, ...] = (0, 1, 2),
                   mask_train_cfg: TrainConfig | None = None) -> dict:
    """Equal-budget variant trainings mirroring the directional claims.

    Trains the interior-restriction mask against the block-causal baseline at
    one seed, then the anchor variants across seeds, and reports held-out NLL
    per variant plus pass/fail on the expected orderings.  Anchors are
    compared at the center schedule's step count (thicker rings toward the
    open sides), so the starting position is isolated from the number of
    parallel steps.
    """
    h, w = model_cfg.max_grid
    n_steps = make_schedule(h, w, "center", 1).num_steps
    rows: list[BenchRow] = []
    results: dict = {"mask": {}, "anchor": {}}

    def run(anchor: str, restriction: bool, seed: int) -> dict:
        sched = make_anchored_stepcount_schedule(h, w, anchor, n_steps)
        src = src_factory()
        model = RingTransformer(model_cfg)
        model.init_parameters(seed)
        cfg = TrainConfig(**{**asdict(train_cfg),
                             "seed": seed,
                             "interior_restriction": restriction})
        train_model(model, src, cfg, sched)
        rep = nll_report(model, src, sched, eval_grids,
                         np.random.default_rng(seed + 7919), restriction)
        rows.append(BenchRow(
            method=f"anchor={anchor},nested={restriction},seed={seed}",
            params=model.num_parameters(), steps=sched.num_steps,
            heldout_nll=float(rep["nll"]),
            border_accuracy=rep["border_accuracy"]))
        return rep

    # Mask pair: same layout, so total NLL (interior included) is comparable.
    s0 = seeds[0]
    results["mask"]["nested"] = float(run("center", True, s0)["nll"])
    results["mask"]["block_causal"] = float(run("center", False, s0)["nll"])
    results["mask"]["pass"] = results["mask"]["nested"] < results["mask"]["block_causal"]

    # Anchor ordering: layouts differ in interior share, so compare the
    # border-only NLL (each grid cell predicted exactly once for any anchor).
    per_anchor: dict[str, list[float]] = {a: [] for a in anchors}
    for seed in seeds:
        for anchor in anchors:
            per_anchor[anchor].append(float(run(anchor, True, seed)["border_nll"]))
    results["anchor"]["nll"] = per_anchor
    votes = 0
    for i in range(len(seeds)):
        vals = [per_anchor[a][i] for a in anchors]
        votes += int(all(vals[j] <= vals[j + 1] for j in range(len(vals) - 1)))
    results["anchor"]["ordered_votes"] = votes
    results["anchor"]["pass"] = votes * 2 > len(seeds)
    results["rows"] = rows
    return results


# ---------------------------------------------------------------------------
# Manifest round trip
# ---------------------------------------------------------------------------

def dump_manifest(model_cfg: ModelConfig, train_cfg: TrainConfig,
                  source_kind: str, anchor: str, eval_grids: int,
                  eval_seed: int) -> str:
    payload = {
        "model": asdict(model_cfg),
        "train": asdict(train_cfg),
        "source_kind": source_kind,
        "anchor": anchor,
        "eval_grids": eval_grids,
        "eval_seed": eval_seed,
    }
    return json.dumps(payload, sort_keys=True, indent=2)


def run_manifest(manifest: str) -> dict:
    """Re-run a dumped configuration end to end and report its numbers."""
    payload = json.loads(manifest)
    m = dict(payload["model"])
    m["max_grid"] = tuple(m["max_grid"])
    model_cfg = ModelConfig(**m)
    train_cfg = TrainConfig(**payload["train"])
    h, w = model_cfg.max_grid
    src = SyntheticSource(payload["source_kind"], model_cfg.vocab_size, h, w,
                          model_cfg.num_classes)
    sched = make_schedule(h, w, payload["anchor"], 1)
    model = RingTransformer(model_cfg)
    model.init_parameters(train_cfg.seed)
    history = train_model(model, src, train_cfg, sched)
    rep = nll_report(model, src, sched, payload["eval_grids"],
                     np.random.default_rng(payload["eval_seed"]))
    return {"final_train_loss": history[-1].loss, "nll": float(rep["nll"]),
            "border_accuracy": rep["border_accuracy"]}
