"""Decoder-only transformer over ring-schedule sequences.

Embeddings are additive: token (or learned prompt vector for not-yet-generated
positions) + fixed 2D sinusoidal encoding of the absolute grid coordinate +
a learned step embedding.  Attention is masked by an additive bias built from
a :class:`~radar.masks.NestedMask`; the incremental cache path runs unmasked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grids import SequenceLayout
from .masks import NestedMask


@dataclass
class ModelConfig:
    vocab_size: int = 64
    num_classes: int = 8
    dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    max_grid: tuple[int, int] = (16, 16)
    max_steps: int = 32
    dropout: float = 0.0
    # Fixed positional channels are unit-amplitude; scaled down so token
    # content is not drowned at the 0.02-std embedding init used here.
    pos_scale: float = 0.1
    dtype: str = "float32"  # float64 exists for gradient-check tests

    def __post_init__(self):
        if min(self.vocab_size, self.num_classes, self.dim, self.num_layers,
               self.num_heads, self.max_steps) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.dim % self.num_heads != 0:
            raise ValueError("dim must be divisible by num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be a probability below 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def prompt_id(self) -> int:
        """Sentinel id marking prompt-filled positions; never a vocabulary id."""
        return self.vocab_size

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def sinusoidal_2d(rows: np.ndarray, cols: np.ndarray, dim: int,
                  dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Fixed 2D positional encoding: row and column each fill half the channels.

    Absolute coordinates keep their meaning on grids larger than the training
    size, which is what makes zero-shot resolution growth possible.
    """
    if dim % 4 != 0:
        raise ValueError("dim must be divisible by 4 for 2D sinusoidal encoding")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(0, half, 2, dtype=dtype) / half)
    out = torch.empty((len(rows), dim), dtype=dtype)
    for offset, coords in ((0, rows), (half, cols)):
        angles = torch.as_tensor(np.array(coords), dtype=dtype)[:, None] * freqs[None, :]
        out[:, offset:offset + half:2] = torch.sin(angles)
        out[:, offset + 1:offset + half:2] = torch.cos(angles)
    return out


def attention_bias(mask: NestedMask, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Additive bias: 0 where attention is allowed, -inf where forbidden.

    The diagonal is forced open so a hypothetical all-masked row degrades to
    self-attention instead of a NaN softmax.
    """
    allowed = np.array(mask.dense(), dtype=bool)
    np.fill_diagonal(allowed, True)
    bias = torch.zeros(allowed.shape, dtype=dtype)
    bias.masked_fill_(~torch.from_numpy(allowed), float("-inf"))
    return bias


class Block(nn.Module):
    """Pre-norm attention + MLP block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.dim // cfg.num_heads
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.qkv = nn.Linear(cfg.dim, 3 * cfg.dim)
        self.proj = nn.Linear(cfg.dim, cfg.dim)
        self.ln2 = nn.LayerNorm(cfg.dim)
        hidden = int(cfg.dim * cfg.mlp_ratio)
        self.fc1 = nn.Linear(cfg.dim, hidden)
        self.fc2 = nn.Linear(hidden, cfg.dim)
        self.dropout = nn.Dropout(cfg.dropout)

    def attend(self, x: torch.Tensor, bias: torch.Tensor | None,
               cache: tuple[torch.Tensor, torch.Tensor] | None,
               need_attn: bool = False):
        b, t, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=2)
        q = q.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        if cache is not None:
            k = torch.cat([cache[0], k], dim=2)
            v = torch.cat([cache[1], v], dim=2)
        if need_attn:
            att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
            if bias is not None:
                att = att + bias
            att = F.softmax(att, dim=-1)
            y = att @ v
        else:
            att = None
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=bias)
        y = y.transpose(1, 2).reshape(b, t, d)
        return self.proj(y), (k, v), att

    def forward(self, x, bias, cache, need_attn=False):
        y, new_cache, att = self.attend(x, bias, cache, need_attn)
        x = x + self.dropout(y)
        x = x + self.dropout(self.fc2(F.gelu(self.fc1(self.ln2(x)))))
        return x, new_cache, att


class RingTransformer(nn.Module):
    """The function approximator behind the ring-factorized likelihood."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.prompt = nn.Parameter(torch.zeros(cfg.dim))
        # Last class slot is the unconditional (null) class.
        self.class_emb = nn.Embedding(cfg.num_classes + 1, cfg.dim)
        self.step_emb = nn.Embedding(cfg.max_steps, cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_layers))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.vocab_size, bias=False)
        self.forward_count = 0  # instrumented: one increment per forward call
        self.to(cfg.torch_dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def init_parameters(self, seed: int) -> None:
        """Deterministic GPT-style init from an explicit seed."""
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if p.dim() >= 2 or name == "prompt" or "emb" in name:
                    noise = torch.randn(p.shape, generator=gen, dtype=torch.float32)
                    p.copy_((noise * 0.02).to(p.dtype))
                elif name.endswith("bias"):
                    p.zero_()
                else:  # layer-norm weights
                    p.fill_(1.0)

    def embed_tokens(self, ids: torch.Tensor, rows: np.ndarray, cols: np.ndarray,
                     steps: np.ndarray) -> torch.Tensor:
        """Embed (B, T) token-or-prompt ids placed at absolute grid coordinates.

        ``steps`` holds 1-based step ordinals (position within the schedule in
        use); ordinals beyond the step table clamp to its last row.
        """
        if ids.dim() == 1:
            ids = ids[None, :]
        if ids.min() < 0 or ids.max() > self.cfg.prompt_id:
            raise ValueError("token id outside vocabulary and prompt sentinel")
        is_prompt = ids == self.cfg.prompt_id
        tok = self.tok_emb(ids.clamp(max=self.cfg.vocab_size - 1))
        tok = torch.where(is_prompt[..., None], self.prompt.to(tok.dtype), tok)
        pos = sinusoidal_2d(rows, cols, self.cfg.dim, self.dtype) * self.cfg.pos_scale
        ordinals = torch.as_tensor(np.array(steps) - 1).clamp(max=self.cfg.max_steps - 1)
        return tok + pos[None, :, :] + self.step_emb(ordinals)[None, :, :]

    def embed_class(self, class_ids: torch.Tensor) -> torch.Tensor:
        if class_ids.min() < 0 or class_ids.max() > self.cfg.num_classes:
            raise ValueError("class id out of range (last slot is the null class)")
        return self.class_emb(class_ids)[:, None, :]

    def embed_sequence(self, layout: SequenceLayout, flat_inputs: torch.Tensor,
                       class_ids: torch.Tensor) -> torch.Tensor:
        """Embed a full teacher-forcing sequence: class prefix + every segment."""
        body = self.embed_tokens(flat_inputs, layout.rows, layout.cols, layout.steps)
        prefix = self.embed_class(class_ids).expand(body.shape[0], 1, -1)
        return torch.cat([prefix, body], dim=1)

    def forward(self, h: torch.Tensor, bias: torch.Tensor | None = None,
                kv_cache: list[tuple[torch.Tensor, torch.Tensor]] | None = None,
                return_attn: bool = False):
        """Run the block stack over embedded inputs.

        Returns ``(logits, new_cache)`` and, with ``return_attn``, the per-layer
        attention matrices.  ``bias`` must be ``(Tq, Tk)`` additive; ``None``
        means unrestricted attention (the cache path during generation).
        """
        self.forward_count += 1
        new_cache, attns = [], []
        for i, block in enumerate(self.blocks):
            h, kv, att = block(h, bias, kv_cache[i] if kv_cache else None,
                               need_attn=return_attn)
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activations after layer {i}")
            new_cache.append(kv)
            if return_attn:
                attns.append(att)
        logits = self.head(self.ln_f(h))
        if not torch.isfinite(logits).all():
            raise FloatingPointError("non-finite logits at output head")
        if return_attn:
            return logits, new_cache, attns
        return logits, new_cache

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def position_losses(model: RingTransformer, layout: SequenceLayout,
                    flat_inputs: torch.Tensor, flat_targets: torch.Tensor,
                    class_ids: torch.Tensor, mask: NestedMask) -> torch.Tensor:
    """Per-position cross-entropy (B, T) over the layout's target positions."""
    if flat_inputs.shape != flat_targets.shape \
            or flat_targets.shape[-1] != layout.total_len:
        raise ValueError(
            f"inputs {tuple(flat_inputs.shape)} / targets "
            f"{tuple(flat_targets.shape)} do not match layout of {layout.total_len}")
    h = model.embed_sequence(layout, flat_inputs, class_ids)
    bias = attention_bias(mask, model.dtype)
    logits, _ = model(h, bias)
    logits = logits[:, mask.prefix_len:, :]
    return F.cross_entropy(logits.reshape(-1, model.cfg.vocab_size),
                           flat_targets.reshape(-1), reduction="none"
                           ).view(flat_targets.shape)


def loss_and_grads(model: RingTransformer, layout: SequenceLayout,
                   flat_inputs: torch.Tensor, flat_targets: torch.Tensor,
                   class_ids: torch.Tensor, mask: NestedMask):
    """Mean cross-entropy over all sequence positions plus exact gradients.

    Gradients are reverse-mode and exact for the computation as implemented.
    Returns ``(loss, grads)`` with one gradient tensor per named parameter.
    """
    model.zero_grad(set_to_none=True)
    losses = position_losses(model, layout, flat_inputs, flat_targets, class_ids, mask)
    loss = losses.mean()
    loss.backward()
    grads = {name: (p.grad.detach().clone() if p.grad is not None
                    else torch.zeros_like(p))
             for name, p in model.named_parameters()}
    return loss.detach(), grads
