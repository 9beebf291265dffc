"""Binary PPM (P6) / PGM (P5) image files and token-grid palette rendering."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .grids import TokenGrid


def write_image(path: str | Path, img: np.ndarray) -> None:
    """Write [0,1] floats as 8-bit PGM (2D input) or PPM (HxWx3 input)."""
    arr = np.asarray(img, dtype=np.float64)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if data.ndim == 2:
        header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = f"P6\n{data.shape[1]} {data.shape[0]}\n255\n"
    else:
        raise ValueError(f"cannot write image of shape {arr.shape}")
    Path(path).write_bytes(header.encode("ascii") + data.tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """Read a binary PGM/PPM file back to [0,1] floats."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace after maxval
    magic, width, height, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    if magic == b"P5":
        shape: tuple[int, ...] = (height, width)
    elif magic == b"P6":
        shape = (height, width, 3)
    else:
        raise ValueError(f"unsupported image magic {magic!r}")
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=pos)
    return data.reshape(shape).astype(np.float64) / 255.0


def palette(vocab_size: int) -> np.ndarray:
    """Fixed (vocab_size, 3) color table; distinct colors for ids up to 64."""
    ids = np.arange(vocab_size)
    hue = (ids * 360.0 / max(vocab_size, 1)) % 360.0
    val = 0.55 + 0.45 * ((ids // 8) % 2)
    sat = 0.9 - 0.35 * ((ids // 16) % 2)
    c = val * sat
    x = c * (1 - np.abs((hue / 60.0) % 2 - 1))
    m = val - c
    rgb = np.zeros((vocab_size, 3))
    sector = (hue // 60).astype(int) % 6
    lookup = [(0, 1), (1, 0), (1, 2), (2, 1), (2, 0), (0, 2)]
    for s, (hi, lo) in enumerate(lookup):
        rows = sector == s
        rgb[rows, hi] = c[rows]
        rgb[rows, lo] = x[rows]
    return np.clip(rgb + m[:, None], 0.0, 1.0)


def palette_render(grid: TokenGrid, scale: int = 8) -> np.ndarray:
    """Map token ids to palette colors; each token becomes a scale x scale block."""
    colors = palette(grid.vocab_size)
    img = colors[grid.cells]
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    return img
