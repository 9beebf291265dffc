"""Strict ``key = value`` run-configuration files.

Lines hold one assignment each, ``#`` starts a comment, and unknown keys are
errors so typos fail loudly instead of silently training the wrong thing.
"""

from __future__ import annotations

from dataclasses import dataclass

from .grids import RingSchedule, make_schedule, make_stepcount_schedule
from .model import ModelConfig
from .train import TrainConfig

_MODEL_KEYS = {
    "vocab_size": int, "num_classes": int, "dim": int, "num_layers": int,
    "num_heads": int, "mlp_ratio": float, "grid_height": int, "grid_width": int,
    "max_steps": int, "dropout": float,
}
_TRAIN_KEYS = {
    "lr": float, "beta1": float, "beta2": float, "weight_decay": float,
    "eps": float, "epochs": int, "batch_size": int, "grids_per_epoch": int,
    "step_drop_prob": float, "interior_noise_prob": float,
    "canonical_every": int, "interior_loss_weight": float,
    "class_dropout_prob": float, "interior_restriction": bool,
    "grad_clip": float, "seed": int,
}
_RUN_KEYS = {
    "anchor": str, "thickness": int, "schedule_steps": int,
    "source": str, "heldout_grids": int,
}
KNOWN_KEYS = {**_MODEL_KEYS, **_TRAIN_KEYS, **_RUN_KEYS}


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in KNOWN_KEYS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, value: str):
    typ = KNOWN_KEYS[key]
    if typ is bool:
        if value.lower() in ("true", "1", "yes", "on"):
            return True
        if value.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    return typ(value)


@dataclass
class RunSetup:
    model: ModelConfig
    train: TrainConfig
    schedule: RingSchedule
    source: str
    heldout_grids: int


def load_run_setup(text: str) -> RunSetup:
    """Materialize model/train configs and the schedule from a config file."""
    raw = parse_config_text(text)
    values = {k: _coerce(k, v) for k, v in raw.items()}
    grid_h = values.pop("grid_height", 16)
    grid_w = values.pop("grid_width", 16)
    model_kwargs = {k: values.pop(k) for k in list(values) if k in _MODEL_KEYS}
    model = ModelConfig(max_grid=(grid_h, grid_w), **model_kwargs)
    if "grad_clip" in values and values["grad_clip"] <= 0:
        values["grad_clip"] = None
    train_kwargs = {k: values.pop(k) for k in list(values) if k in _TRAIN_KEYS}
    train = TrainConfig(**train_kwargs)
    anchor = values.pop("anchor", "center")
    if "schedule_steps" in values:
        schedule = make_stepcount_schedule(grid_h, grid_w, values.pop("schedule_steps"))
        if "thickness" in values:
            raise ValueError("give either thickness or schedule_steps, not both")
    else:
        schedule = make_schedule(grid_h, grid_w, anchor, values.pop("thickness", 1))
    source = values.pop("source", "quantized_field")
    heldout = values.pop("heldout_grids", 48)
    return RunSetup(model, train, schedule, source, heldout)
