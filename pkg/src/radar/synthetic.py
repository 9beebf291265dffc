"""Synthetic token-grid sources with strong spatial locality.

Stands in for tokenized natural images: every source emits grids whose
neighboring cells agree far more often than i.i.d.-uniform draws, which is the
structure the ring-wise decoder exploits.  All sampling is driven by an
explicit numpy Generator so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import TokenGrid

KINDS = ("quantized_field", "potts_gibbs", "vq_of_procedural_images")


@dataclass
class SyntheticSource:
    """Class-conditional grid sampler.

    ``class_params`` holds one row per class; its meaning depends on the kind:
    for ``quantized_field`` a row is (num_waves, max_freq, amplitude, offset),
    for ``potts_gibbs`` a row is (coupling, field_strength, palette_start,
    palette_size).  ``vq_of_procedural_images`` carries a tokenizer instead.
    """

    kind: str
    vocab_size: int
    grid_height: int
    grid_width: int
    num_classes: int
    class_params: np.ndarray | None = None
    gibbs_sweeps: int = 12
    tokenizer: object | None = None  # VqTokenizer for the vq-backed kind

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.kind == "quantized_field" and self.class_params is None:
            self.class_params = default_field_params(self.num_classes)
        if self.kind == "potts_gibbs" and self.class_params is None:
            self.class_params = default_potts_params(self.num_classes, self.vocab_size)
        if self.kind == "vq_of_procedural_images" and self.tokenizer is None:
            raise ValueError("vq_of_procedural_images needs a trained tokenizer")

    def sample_grid(self, class_id: int, rng: np.random.Generator) -> TokenGrid:
        return sample_grid(self, class_id, rng)

    def sample_pair(self, rng: np.random.Generator) -> tuple[TokenGrid, int]:
        class_id = int(rng.integers(0, self.num_classes))
        return self.sample_grid(class_id, rng), class_id


def default_field_params(num_classes: int) -> np.ndarray:
    """Per-class (num_waves, max_freq, amplitude, offset) rows.

    Frequencies stay low (wavelength of 10+ tokens) so quantization preserves
    locality; offsets spread the classes across the palette so the class label
    is recoverable from the grid.
    """
    rows = []
    for c in range(num_classes):
        rows.append((3.0, 0.03 + 0.02 * (c % 3), 0.30, (c + 0.5) / num_classes))
    return np.array(rows, dtype=np.float64)


def default_potts_params(num_classes: int, vocab_size: int) -> np.ndarray:
    """Per-class (coupling, field_strength, palette_start, palette_size) rows."""
    slot = max(1, vocab_size // num_classes)
    rows = []
    for c in range(num_classes):
        rows.append((1.4, 0.5, c * slot % vocab_size, slot))
    return np.array(rows, dtype=np.float64)


def constant_source(vocab_size: int, grid_height: int, grid_width: int,
                    num_classes: int) -> SyntheticSource:
    """Degenerate sanity source: each class is one constant grid."""
    rows = [(0.0, 0.05, 0.0, (c + 0.5) / num_classes) for c in range(num_classes)]
    return SyntheticSource("quantized_field", vocab_size, grid_height, grid_width,
                           num_classes, np.array(rows, dtype=np.float64))


def sample_grid(src: SyntheticSource, class_id: int,
                rng: np.random.Generator) -> TokenGrid:
    """Draw one grid of the given class from the source."""
    if not 0 <= class_id < src.num_classes:
        raise ValueError(f"class id {class_id} out of range 0..{src.num_classes - 1}")
    if src.kind == "quantized_field":
        cells = _quantized_field(src, class_id, rng)
    elif src.kind == "potts_gibbs":
        cells = _potts_gibbs(src, class_id, rng)
    else:
        cells = _vq_of_procedural(src, class_id, rng)
    return TokenGrid.from_array(cells, src.vocab_size)


def _quantized_field(src: SyntheticSource, class_id: int,
                     rng: np.random.Generator) -> np.ndarray:
    num_waves, max_freq, amplitude, offset = src.class_params[class_id]
    rr, cc = np.meshgrid(np.arange(src.grid_height), np.arange(src.grid_width),
                         indexing="ij")
    mix = np.zeros((src.grid_height, src.grid_width), dtype=np.float64)
    n = int(num_waves)
    freqs = rng.uniform(0.3 * max_freq, max_freq, size=n)
    angles = rng.uniform(0.0, 2 * np.pi, size=n)
    phases = rng.uniform(0.0, 2 * np.pi, size=n)
    weights = rng.uniform(0.5, 1.0, size=n)
    for f, a, ph, w in zip(freqs, angles, phases, weights):
        mix += w * np.cos(2 * np.pi * f * (np.cos(a) * rr + np.sin(a) * cc) + ph)
    if n:
        mix /= np.sum(weights)
    value = np.clip(offset + amplitude * mix, 0.0, 1.0 - 1e-9)
    return np.floor(value * src.vocab_size).astype(np.int64)


def _potts_gibbs(src: SyntheticSource, class_id: int,
                 rng: np.random.Generator) -> np.ndarray:
    coupling, strength, start, size = src.class_params[class_id]
    start, size = int(start), int(size)
    h, w, v = src.grid_height, src.grid_width, src.vocab_size
    state = rng.integers(start, start + size, size=(h, w)) % v
    palette_bias = np.zeros(v)
    palette_bias[np.arange(start, start + size) % v] = strength
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    checker = (rr + cc) % 2
    for _ in range(src.gibbs_sweeps):
        for color in (0, 1):
            logits = np.tile(palette_bias, (h, w, 1))
            flat = logits.reshape(h * w, v)
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nbr = np.roll(np.roll(state, dr, axis=0), dc, axis=1)
                flat[np.arange(h * w), nbr.ravel()] += coupling
            probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
            probs /= probs.sum(axis=-1, keepdims=True)
            u = rng.random((h, w, 1))
            draw = (np.cumsum(probs, axis=-1) < u).sum(axis=-1)
            mask = checker == color
            state[mask] = draw[mask]
    return state.astype(np.int64)


def _vq_of_procedural(src: SyntheticSource, class_id: int,
                      rng: np.random.Generator) -> np.ndarray:
    from .vq import vq_encode  # local import: tokenizer is optional machinery

    img = procedural_image(src.grid_height * src.tokenizer.cfg.patch_size,
                           src.grid_width * src.tokenizer.cfg.patch_size,
                           class_id, src.num_classes, rng,
                           channels=src.tokenizer.cfg.channels)
    return vq_encode(img, src.tokenizer).cells.copy()


def procedural_image(height: int, width: int, class_id: int, num_classes: int,
                     rng: np.random.Generator, channels: int = 1) -> np.ndarray:
    """Smooth synthetic picture: class-tilted ramp plus a random disk or stripe."""
    rr, cc = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width),
                         indexing="ij")
    angle = 2 * np.pi * (class_id + rng.uniform(-0.2, 0.2)) / max(num_classes, 1)
    img = 0.5 + 0.35 * (np.cos(angle) * (rr - 0.5) + np.sin(angle) * (cc - 0.5))
    if rng.random() < 0.5:
        r0, c0, rad = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.3)
        img = np.where((rr - r0) ** 2 + (cc - c0) ** 2 < rad ** 2,
                       np.clip(img + 0.3, 0, 1), img)
    else:
        freq = rng.uniform(1.0, 3.0)
        img = np.clip(img + 0.15 * np.sin(2 * np.pi * freq * (rr + cc)), 0, 1)
    img = np.clip(img, 0.0, 1.0)
    if channels == 3:
        shift = rng.uniform(-0.1, 0.1, size=3)
        img = np.clip(img[..., None] + shift[None, None, :], 0, 1)
    return img.astype(np.float64)


def procedural_images(n: int, height: int, width: int, num_classes: int,
                      rng: np.random.Generator, channels: int = 1) -> tuple[np.ndarray, np.ndarray]:
    classes = rng.integers(0, num_classes, size=n)
    imgs = np.stack([procedural_image(height, width, int(c), num_classes, rng,
                                      channels=channels) for c in classes])
    return imgs, classes


@dataclass
class ArraySource:
    """Dataset-backed sampler with the same surface as SyntheticSource."""

    grids: np.ndarray  # (n, H, W) int token ids
    classes: np.ndarray  # (n,) int
    vocab_size: int

    def __post_init__(self):
        self.grids = np.asarray(self.grids, dtype=np.int64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if self.grids.ndim != 3 or len(self.classes) != len(self.grids):
            raise ValueError("grids must be (n, H, W) with one class per grid")
        self.grid_height, self.grid_width = self.grids.shape[1:]
        self.num_classes = int(self.classes.max()) + 1 if len(self.classes) else 1
        self._by_class = {c: np.flatnonzero(self.classes == c)
                          for c in range(self.num_classes)}

    def sample_grid(self, class_id: int, rng: np.random.Generator) -> TokenGrid:
        pool = self._by_class.get(int(class_id))
        if pool is None or not len(pool):
            raise ValueError(f"no grids of class {class_id} in the dataset")
        idx = int(pool[rng.integers(0, len(pool))])
        return TokenGrid.from_array(self.grids[idx], self.vocab_size)

    def sample_pair(self, rng: np.random.Generator) -> tuple[TokenGrid, int]:
        idx = int(rng.integers(0, len(self.grids)))
        return (TokenGrid.from_array(self.grids[idx], self.vocab_size),
                int(self.classes[idx]))


class SequentialSource:
    """Cycles through a fixed dataset in order; for exact held-out evaluation."""

    def __init__(self, grids: np.ndarray, classes: np.ndarray, vocab_size: int):
        self.grids = np.asarray(grids, dtype=np.int64)
        self.classes = np.asarray(classes, dtype=np.int64)
        self.vocab_size = vocab_size
        self._cursor = 0

    def sample_pair(self, rng=None) -> tuple[TokenGrid, int]:
        idx = self._cursor % len(self.grids)
        self._cursor += 1
        return (TokenGrid.from_array(self.grids[idx], self.vocab_size),
                int(self.classes[idx]))
