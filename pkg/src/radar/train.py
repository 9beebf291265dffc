"""Training loop: schedule-step dropout, interior input noise, AdamW.

One epoch is ``grids_per_epoch`` grids drawn from a source, encoded under a
per-batch schedule (every ``canonical_every``-th batch keeps the full schedule,
the rest drop intermediate steps at random), corrupted on interior inputs,
and optimized with decoupled-weight-decay AdamW.  All randomness flows from
the config seed; single-threaded runs are bitwise reproducible.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .grids import (REGION_INTERIOR, RingSchedule, SequenceLayout, TokenGrid,
                    flatten_segments, layout_from_schedule, radial_encode,
                    schedule_subset)
from .masks import build_nested_mask
from .model import RingTransformer, attention_bias, position_losses


@dataclass
class TrainConfig:
    # lr is desk-tuned: 1e-4 cannot move a from-scratch model of this size in
    # 20 epochs on a single CPU core; set it explicitly to taste.
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 8
    grids_per_epoch: int = 192
    step_drop_prob: float = 0.25      # per-intermediate-step dropout probability
    interior_noise_prob: float = 0.1  # per-interior-position corruption probability
    canonical_every: int = 4          # every k-th batch keeps the full schedule
    interior_loss_weight: float = 1.0
    class_dropout_prob: float = 0.0   # > 0 trains the null class for guidance
    interior_restriction: bool = True  # False trains the block-causal baseline
    grad_clip: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("step_drop_prob", "interior_noise_prob", "class_dropout_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        # lr = 0 is allowed: a zero-rate epoch must leave parameters untouched.
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


def apply_rds(schedule: RingSchedule, rng: np.random.Generator,
              drop_prob: float) -> RingSchedule:
    """Randomly drop intermediate schedule steps; the final extent always stays."""
    keep = [i for i in range(schedule.num_steps - 1) if rng.random() >= drop_prob]
    keep.append(schedule.num_steps - 1)
    return schedule_subset(schedule, keep)


def apply_rni(inputs: list[np.ndarray], layout: SequenceLayout,
              rng: np.random.Generator, corrupt_prob: float,
              vocab_size: int) -> list[np.ndarray]:
    """Replace interior input tokens with uniform noise at the given rate.

    Prompt-marker positions and targets are never touched; only the
    already-revealed area of each step's input is eligible.
    """
    out = []
    for seg, grid in zip(layout.segments, inputs):
        grid = np.array(grid, copy=True)
        if seg.interior_extent is not None:
            r0 = seg.interior_extent.top - seg.extent.top
            c0 = seg.interior_extent.left - seg.extent.left
            h, w = seg.interior_extent.height, seg.interior_extent.width
            hit = rng.random((h, w)) < corrupt_prob
            noise = rng.integers(0, vocab_size, size=(h, w))
            block = grid[r0:r0 + h, c0:c0 + w]
            grid[r0:r0 + h, c0:c0 + w] = np.where(hit, noise, block)
        out.append(grid)
    return out


class AdamWState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self):
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.t: int = 0


def decay_mask(model: RingTransformer) -> dict[str, bool]:
    """True where decoupled weight decay applies: weight matrices only.

    The prompt vector, all embedding tables, norm parameters and biases are
    excluded.
    """
    mask = {}
    for name, p in model.named_parameters():
        is_matrix = p.dim() >= 2
        excluded = ("emb" in name or name == "prompt" or ".ln" in name
                    or name.startswith("ln_") or name.endswith("bias"))
        mask[name] = is_matrix and not excluded
    return mask


def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
               state: AdamWState, cfg: TrainConfig,
               decay: dict[str, bool] | None = None) -> None:
    """One bias-corrected AdamW update, in place, with decoupled decay."""
    state.t += 1
    t = state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
            m_hat = m / (1 - cfg.beta1 ** t)
            v_hat = v / (1 - cfg.beta2 ** t)
            p.add_(m_hat / (v_hat.sqrt() + cfg.eps), alpha=-cfg.lr)
            if decay is None or decay.get(name, False):
                p.add_(p, alpha=-cfg.lr * cfg.weight_decay)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    border_loss: float
    interior_loss: float
    grad_norm: float
    wallclock_s: float

    def log_line(self) -> str:
        return (f"{self.epoch}\t{self.loss:.6f}\t{self.border_loss:.6f}\t"
                f"{self.interior_loss:.6f}\t{self.grad_norm:.6f}\t{self.wallclock_s:.3f}")


def encode_batch(grids: list[TokenGrid], schedule: RingSchedule,
                 rng: np.random.Generator, noise_prob: float):
    """Teacher-forcing tensors for one batch sharing a schedule."""
    layout = layout_from_schedule(schedule)
    ins, tgts = [], []
    for g in grids:
        inputs, targets, _ = radial_encode(g, schedule)
        inputs = apply_rni(inputs, layout, rng, noise_prob, g.vocab_size)
        ins.append(flatten_segments(inputs))
        tgts.append(flatten_segments(targets))
    flat_inputs = torch.from_numpy(np.stack(ins))
    flat_targets = torch.from_numpy(np.stack(tgts))
    return layout, flat_inputs, flat_targets


def batch_loss(model: RingTransformer, layout: SequenceLayout,
               flat_inputs: torch.Tensor, flat_targets: torch.Tensor,
               class_ids: torch.Tensor, interior_restriction: bool,
               interior_loss_weight: float = 1.0):
    """(weighted scalar loss, border mean, interior mean) for one batch."""
    mask = build_nested_mask(layout, prefix_len=1,
                             interior_restriction=interior_restriction)
    losses = position_losses(model, layout, flat_inputs, flat_targets,
                             class_ids, mask)
    inner = torch.from_numpy(layout.region == REGION_INTERIOR)
    border_losses = losses[:, ~inner]
    interior_losses = losses[:, inner]
    n_b, n_i = border_losses.numel(), interior_losses.numel()
    w = interior_loss_weight
    denom = n_b + w * n_i
    loss = (border_losses.sum() + w * (interior_losses.sum() if n_i else 0.0)) / denom
    border_mean = border_losses.mean()
    interior_mean = (interior_losses.mean() if n_i
                     else torch.zeros((), dtype=loss.dtype))
    return loss, border_mean, interior_mean


def train_epoch(model: RingTransformer, src, cfg: TrainConfig,
                rng: np.random.Generator, schedule: RingSchedule,
                state: AdamWState, epoch: int = 0) -> EpochMetrics:
    """One optimization pass over ``grids_per_epoch`` freshly sampled grids."""
    t0 = time.perf_counter()
    decay = decay_mask(model)
    params = dict(model.named_parameters())
    n_batches = max(1, math.ceil(cfg.grids_per_epoch / cfg.batch_size))
    sums = np.zeros(3)
    counts = np.zeros(3)
    grad_norms = []
    for b in range(n_batches):
        if cfg.canonical_every and b % cfg.canonical_every == 0:
            sched_b = schedule
        else:
            sched_b = apply_rds(schedule, rng, cfg.step_drop_prob)
        pairs = [src.sample_pair(rng) for _ in range(cfg.batch_size)]
        grids = [g for g, _ in pairs]
        classes = np.array([c for _, c in pairs], dtype=np.int64)
        if cfg.class_dropout_prob > 0:
            dropped = rng.random(len(classes)) < cfg.class_dropout_prob
            classes = np.where(dropped, model.cfg.num_classes, classes)
        layout, flat_inputs, flat_targets = encode_batch(
            grids, sched_b, rng, cfg.interior_noise_prob)
        model.zero_grad(set_to_none=True)
        loss, border_mean, interior_mean = batch_loss(
            model, layout, flat_inputs, flat_targets,
            torch.from_numpy(classes), cfg.interior_restriction,
            cfg.interior_loss_weight)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss in epoch {epoch} batch {b} "
                f"(schedule steps={sched_b.num_steps})")
        loss.backward()
        if cfg.grad_clip is not None:
            grad_norms.append(float(torch.nn.utils.clip_grad_norm_(
                model.parameters(), cfg.grad_clip)))
        else:
            total = torch.sqrt(sum((p.grad.detach() ** 2).sum()
                                   for p in model.parameters() if p.grad is not None))
            grad_norms.append(float(total))
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        adamw_step({k: params[k] for k in grads}, grads, state, cfg, decay)
        inner = layout.region == REGION_INTERIOR
        n_i = int(inner.sum()) * len(grids)
        n_b_pos = int((~inner).sum()) * len(grids)
        sums += (loss.item() * (n_b_pos + n_i), border_mean.item() * n_b_pos,
                 interior_mean.item() * n_i)
        counts += (n_b_pos + n_i, n_b_pos, n_i)
    mean = sums / np.maximum(counts, 1)
    return EpochMetrics(epoch, mean[0], mean[1], mean[2],
                        float(np.mean(grad_norms)) if grad_norms else 0.0,
                        time.perf_counter() - t0)


def train_model(model: RingTransformer, src, cfg: TrainConfig,
                schedule: RingSchedule, log=None) -> list[EpochMetrics]:
    """Run the full training loop; returns per-epoch metrics."""
    rng = np.random.default_rng(cfg.seed)
    state = AdamWState()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        metrics = train_epoch(model, src, cfg, rng, schedule, state, epoch)
        history.append(metrics)
        if log is not None:
            log(metrics)
    return history


def mix_codes(gt: np.ndarray, predicted: np.ndarray, mix_ratio: float,
              rng: np.random.Generator) -> np.ndarray:
    """Per-position Bernoulli mix of generator output into ground-truth codes."""
    if gt.shape != predicted.shape:
        raise ValueError("code grids must share a shape")
    take_pred = rng.random(gt.shape) < mix_ratio
    return np.where(take_pred, predicted, gt)


def finetune_decoder_on_mixed_codes(tokenizer, model: RingTransformer,
                                    schedule: RingSchedule,
                                    images: list, classes: np.ndarray,
                                    heldout_images: list,
                                    heldout_classes: np.ndarray,
                                    mix_ratio: float, steps: int,
                                    rng: np.random.Generator,
                                    lr: float = 1e-3) -> dict:
    """Close the gap between generator-sampled codes and the pixel decoder.

    Each step encodes one training image, swaps a ``mix_ratio`` fraction of
    its codes for the generator's teacher-forced predictions, and takes one
    decoder-only gradient step toward reconstructing the original pixels from
    the mixed codes.  Encoder and codebook stay frozen.  Returns decoder MSE
    on held-out ground-truth codes and on held-out mixed codes, before and
    after.
    """
    from .vq import vq_encode

    def decoder_mse(imgs, clss, ratio):
        total = 0.0
        for img, cls in zip(imgs, clss):
            gt = vq_encode(img, tokenizer)
            codes = gt.cells
            if ratio > 0:
                pred = teacher_forced_predictions(model, gt, schedule, int(cls))
                codes = mix_codes(gt.cells, pred.cells, ratio,
                                  np.random.default_rng(1000 + int(cls)))
            flat = tokenizer.decoder(
                tokenizer.codes[torch.from_numpy(np.asarray(codes).ravel().copy())])
            target = tokenizer.patches(img)
            total += float(((flat.clamp(0, 1) - target) ** 2).mean())
        return total / len(imgs)

    with torch.no_grad():
        before_gt = decoder_mse(heldout_images, heldout_classes, 0.0)
        before_mixed = decoder_mse(heldout_images, heldout_classes, mix_ratio)
    opt = torch.optim.Adam(tokenizer.decoder.parameters(), lr=lr)
    n = len(images)
    for step in range(steps):
        idx = int(rng.integers(0, n))
        img, cls = images[idx], int(classes[idx])
        gt = vq_encode(img, tokenizer)
        if mix_ratio > 0:
            pred = teacher_forced_predictions(model, gt, schedule, cls)
            codes = mix_codes(gt.cells, pred.cells, mix_ratio, rng)
        else:
            codes = gt.cells
        flat = tokenizer.decoder(
            tokenizer.codes[torch.from_numpy(np.asarray(codes).ravel().copy())])
        loss = ((flat - tokenizer.patches(img)) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        after_gt = decoder_mse(heldout_images, heldout_classes, 0.0)
        after_mixed = decoder_mse(heldout_images, heldout_classes, mix_ratio)
    return {"gt_mse_before": before_gt, "gt_mse_after": after_gt,
            "mixed_mse_before": before_mixed, "mixed_mse_after": after_mixed}


def teacher_forced_predictions(model: RingTransformer, grid: TokenGrid,
                               schedule: RingSchedule, class_id: int,
                               interior_restriction: bool = True) -> TokenGrid:
    """One-shot argmax generation under teacher forcing.

    Border positions across steps partition the grid, so their argmax
    predictions reassemble into a full predicted grid.
    """
    inputs, _, layout = radial_encode(grid, schedule)
    flat_inputs = torch.from_numpy(flatten_segments(inputs))[None, :]
    mask = build_nested_mask(layout, 1, interior_restriction)
    with torch.no_grad():
        h = model.embed_sequence(layout, flat_inputs,
                                 torch.tensor([class_id]))
        logits, _ = model(h, attention_bias(mask, model.dtype))
    preds = logits[0, 1:, :].argmax(dim=-1).numpy()
    cells = np.zeros((grid.height, grid.width), dtype=np.int64)
    border = layout.region != REGION_INTERIOR
    cells[layout.rows[border], layout.cols[border]] = preds[border]
    return TokenGrid.from_array(cells, model.cfg.vocab_size)
