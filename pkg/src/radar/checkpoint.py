"""Binary checkpoint container shared by the generator and the tokenizer.

Layout: magic ``RADR``, format version (u32 LE), a length-prefixed UTF-8 block
of ``key=value`` lines, then a tensor table of (name, rank, dims, raw float32
little-endian data) records.  Unknown versions are rejected on load.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

import torch

from .model import ModelConfig, RingTransformer

MAGIC = b"RADR"
VERSION = 1


def write_checkpoint(path: str | Path, config: dict[str, str],
                     tensors: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg_bytes = "".join(f"{k}={v}\n" for k, v in config.items()).encode("utf-8")
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<I", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<Q", data.ndim)
        blob += struct.pack(f"<{data.ndim}Q", *data.shape)
        blob += data.tobytes()
    Path(path).write_bytes(bytes(blob))


def read_checkpoint(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, 8)
    offset = 12
    config = {}
    for line in raw[offset:offset + cfg_len].decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            config[key] = value
    offset += cfg_len
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        dims = struct.unpack_from(f"<{rank}Q", raw, offset)
        offset += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(dims)
        tensors[name] = arr.copy()
        offset += 4 * size
    return config, tensors


def save_model(model: RingTransformer, path: str | Path,
               extra: dict[str, str] | None = None) -> None:
    cfg = model.cfg
    config = {
        "kind": "model",
        "vocab_size": str(cfg.vocab_size),
        "num_classes": str(cfg.num_classes),
        "dim": str(cfg.dim),
        "num_layers": str(cfg.num_layers),
        "num_heads": str(cfg.num_heads),
        "mlp_ratio": repr(cfg.mlp_ratio),
        "max_grid": f"{cfg.max_grid[0]},{cfg.max_grid[1]}",
        "max_steps": str(cfg.max_steps),
        "dropout": repr(cfg.dropout),
        "pos_scale": repr(cfg.pos_scale),
    }
    config.update(extra or {})
    tensors = {name: t.detach().to(torch.float32).numpy()
               for name, t in model.state_dict().items()}
    write_checkpoint(path, config, tensors)


def load_model(path: str | Path) -> tuple[RingTransformer, dict[str, str]]:
    config, tensors = read_checkpoint(path)
    if config.get("kind") != "model":
        raise ValueError(f"{path}: checkpoint holds a {config.get('kind')!r}, not a model")
    h, w = (int(v) for v in config["max_grid"].split(","))
    cfg = ModelConfig(
        vocab_size=int(config["vocab_size"]),
        num_classes=int(config["num_classes"]),
        dim=int(config["dim"]),
        num_layers=int(config["num_layers"]),
        num_heads=int(config["num_heads"]),
        mlp_ratio=float(config["mlp_ratio"]),
        max_grid=(h, w),
        max_steps=int(config["max_steps"]),
        dropout=float(config["dropout"]),
        pos_scale=float(config.get("pos_scale", "0.1")),
    )
    model = RingTransformer(cfg)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    model.load_state_dict(state)
    model.eval()
    return model, config
