"""Minimal patch-level vector-quantization tokenizer.

A linear encoder maps each ``patch_size`` x ``patch_size`` pixel block to a
latent, the latent snaps to its nearest codebook row (the token id), and a
linear decoder maps codes back to pixels.  The codebook is maintained by EMA
counts/sums with dead-code reseeding; encoder and decoder train on
reconstruction plus a commitment term through a straight-through estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import read_checkpoint, write_checkpoint
from .grids import TokenGrid


@dataclass
class VqConfig:
    vocab_size: int = 64
    latent_dim: int = 8
    patch_size: int = 4
    channels: int = 1
    commitment_weight: float = 0.25
    # Pulls encode(decode(code)) back onto the code, so token ids survive a
    # decode -> encode round trip instead of hopping to a neighboring cell.
    cycle_weight: float = 1.0
    ema_decay: float = 0.99
    lr: float = 5e-3
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.vocab_size, self.latent_dim, self.patch_size) < 1:
            raise ValueError("vocab_size, latent_dim and patch_size must be positive")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


class VqTokenizer(nn.Module):
    def __init__(self, cfg: VqConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = nn.Linear(cfg.patch_dim, cfg.latent_dim)
        self.decoder = nn.Linear(cfg.latent_dim, cfg.patch_dim)
        self.register_buffer("codes", torch.zeros(cfg.vocab_size, cfg.latent_dim))
        self.register_buffer("ema_counts", torch.zeros(cfg.vocab_size))
        self.register_buffer("ema_sums", torch.zeros(cfg.vocab_size, cfg.latent_dim))

    def patches(self, img: np.ndarray) -> torch.Tensor:
        """(grid_h * grid_w, patch_dim) float tensor in row-major patch order."""
        ps, ch = self.cfg.patch_size, self.cfg.channels
        arr = np.asarray(img, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[..., None]
        h, w, c = arr.shape
        if c != ch:
            raise ValueError(f"image has {c} channels, tokenizer expects {ch}")
        if h % ps or w % ps:
            raise ValueError("image dimensions must be multiples of patch_size")
        blocks = arr.reshape(h // ps, ps, w // ps, ps, c).transpose(0, 2, 1, 3, 4)
        return torch.from_numpy(blocks.reshape(-1, ps * ps * c).copy())

    def unpatch(self, flat: torch.Tensor, grid_h: int, grid_w: int) -> np.ndarray:
        ps, ch = self.cfg.patch_size, self.cfg.channels
        blocks = flat.detach().numpy().reshape(grid_h, grid_w, ps, ps, ch)
        img = blocks.transpose(0, 2, 1, 3, 4).reshape(grid_h * ps, grid_w * ps, ch)
        img = np.clip(img, 0.0, 1.0)
        return img[..., 0] if ch == 1 else img

    def quantize(self, latents: torch.Tensor) -> torch.Tensor:
        """Index of the nearest codebook row (squared L2) per latent."""
        d = (latents.pow(2).sum(1, keepdim=True)
             - 2 * latents @ self.codes.T
             + self.codes.pow(2).sum(1)[None, :])
        return d.argmin(dim=1)


def vq_encode(img: np.ndarray, tok: VqTokenizer) -> TokenGrid:
    """Tokenize an image: one id per patch, grid dims = image dims / patch_size."""
    ps = tok.cfg.patch_size
    arr = np.asarray(img)
    h, w = arr.shape[0] // ps, arr.shape[1] // ps
    with torch.no_grad():
        ids = tok.quantize(tok.encoder(tok.patches(arr)))
    return TokenGrid.from_array(ids.numpy().reshape(h, w), tok.cfg.vocab_size)


def vq_decode(grid: TokenGrid, tok: VqTokenizer) -> np.ndarray:
    """Decode a token grid to pixels in [0, 1]."""
    if grid.vocab_size > tok.cfg.vocab_size:
        raise ValueError("grid vocabulary exceeds the codebook")
    with torch.no_grad():
        flat = tok.decoder(tok.codes[torch.from_numpy(grid.cells.ravel().copy())])
    return tok.unpatch(flat, grid.height, grid.width)


@dataclass
class VqMetrics:
    epoch: int
    recon_mse: float
    commit_loss: float
    usage_fraction: float
    reseeded: int


def vq_train(images: list[np.ndarray] | np.ndarray, cfg: VqConfig,
             rng: np.random.Generator | None = None
             ) -> tuple[VqTokenizer, list[VqMetrics]]:
    """Train encoder/decoder and EMA codebook on a set of images."""
    if len(images) == 0:
        raise ValueError("empty image set")
    rng = rng or np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    tok = VqTokenizer(cfg)
    all_patches = torch.cat([tok.patches(img) for img in images])
    n = all_patches.shape[0]
    with torch.no_grad():
        # Seed the codebook from encoder outputs of random training patches.
        pick = torch.from_numpy(rng.integers(0, n, size=cfg.vocab_size))
        tok.codes.copy_(tok.encoder(all_patches[pick]))
        tok.ema_counts.fill_(1.0)
        tok.ema_sums.copy_(tok.codes)
    opt = torch.optim.Adam(list(tok.encoder.parameters())
                           + list(tok.decoder.parameters()), lr=cfg.lr)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        used = torch.zeros(cfg.vocab_size, dtype=torch.bool)
        recon_sum = commit_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = all_patches[order[start:start + cfg.batch_size]]
            z = tok.encoder(batch)
            idx = tok.quantize(z.detach())
            q = tok.codes[idx]
            z_q = z + (q - z).detach()  # straight-through to the decoder
            recon = F.mse_loss(tok.decoder(z_q), batch)
            commit = F.mse_loss(z, q.detach())
            cycle = F.mse_loss(
                tok.encoder(tok.decoder(q.detach()).clamp(0.0, 1.0)), q.detach())
            loss = recon + cfg.commitment_weight * commit + cfg.cycle_weight * cycle
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                one_hot = F.one_hot(idx, cfg.vocab_size).float()
                tok.ema_counts.mul_(cfg.ema_decay).add_(one_hot.sum(0),
                                                        alpha=1 - cfg.ema_decay)
                tok.ema_sums.mul_(cfg.ema_decay).add_(one_hot.T @ z.detach(),
                                                      alpha=1 - cfg.ema_decay)
                alive = tok.ema_counts > 1e-3
                tok.codes[alive] = tok.ema_sums[alive] / tok.ema_counts[alive, None]
            used[idx] = True
            recon_sum += recon.item() * len(batch)
            commit_sum += commit.item() * len(batch)
        reseeded = 0
        with torch.no_grad():
            dead = ~used
            if bool(dead.all()):
                raise RuntimeError("codebook collapsed: no code was used this epoch")
            if bool(dead.any()):
                # Re-seed dead codes from random encoder outputs.
                pick = torch.from_numpy(rng.integers(0, n, size=int(dead.sum())))
                fresh = tok.encoder(all_patches[pick])
                tok.codes[dead] = fresh
                tok.ema_counts[dead] = 1.0
                tok.ema_sums[dead] = fresh
                reseeded = int(dead.sum())
        history.append(VqMetrics(epoch, recon_sum / n, commit_sum / n,
                                 float(used.float().mean()), reseeded))
    with torch.no_grad():
        _separate_duplicate_codes(tok, rng)
    return tok, history


def _separate_duplicate_codes(tok: VqTokenizer, rng: np.random.Generator,
                              min_gap: float = 1e-6) -> None:
    """Nudge coincident codebook rows apart so ids decode distinctly."""
    codes = tok.codes
    for i in range(1, codes.shape[0]):
        d = (codes[:i] - codes[i]).pow(2).sum(1).min()
        if float(d) < min_gap ** 2:
            codes[i] += torch.from_numpy(
                rng.normal(0, 1e-3, size=codes.shape[1])).float()


def reconstruction_mse(tok: VqTokenizer, images) -> float:
    total, count = 0.0, 0
    for img in images:
        rec = vq_decode(vq_encode(img, tok), tok)
        ref = np.asarray(img, dtype=np.float64)
        total += float(((rec - ref) ** 2).mean()) * ref.size
        count += ref.size
    return total / count


def psnr(mse: float) -> float:
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)


def save_tokenizer(tok: VqTokenizer, path) -> None:
    cfg = tok.cfg
    config = {
        "kind": "tokenizer",
        "vocab_size": str(cfg.vocab_size),
        "latent_dim": str(cfg.latent_dim),
        "patch_size": str(cfg.patch_size),
        "channels": str(cfg.channels),
    }
    tensors = {name: t.detach().to(torch.float32).numpy()
               for name, t in tok.state_dict().items()}
    write_checkpoint(path, config, tensors)


def load_tokenizer(path) -> VqTokenizer:
    config, tensors = read_checkpoint(path)
    if config.get("kind") != "tokenizer":
        raise ValueError(f"{path}: checkpoint holds a {config.get('kind')!r}, not a tokenizer")
    cfg = VqConfig(vocab_size=int(config["vocab_size"]),
                   latent_dim=int(config["latent_dim"]),
                   patch_size=int(config["patch_size"]),
                   channels=int(config["channels"]))
    tok = VqTokenizer(cfg)
    tok.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    return tok
