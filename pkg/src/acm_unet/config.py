"""Flat key=value run configuration shared by the CLI and scripts.

Recognized keys: model.* (architecture), train.* (optimization), data.*
(manifest path and pixel spacing), io.out_dir. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import ModelConfig
from .training import TrainParams
from .data import AUGMENT_FLAGS


class ValidationError(Exception):
    pass


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"expected a boolean, got {v!r}")


def _parse_augment(v: str) -> tuple:
    v = v.strip()
    if not v or v.lower() == "none":
        return ()
    flags = tuple(s.strip() for s in v.split(","))
    for f in flags:
        if f not in AUGMENT_FLAGS:
            raise ValidationError(f"unknown augment flag {f!r}")
    return flags


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainParams = field(default_factory=TrainParams)
    manifest: str = ""
    spacing: tuple = (1.0, 1.0)
    out_dir: str = "run"


_MODEL_KEYS = {
    "model.base_width": ("base_width", int),
    "model.n_vss": ("n_vss", int),
    "model.num_classes": ("num_classes", int),
    "model.input_size": ("input_size", int),
    "model.use_mswt": ("use_mswt", _parse_bool),
    "model.use_vss": ("use_vss", _parse_bool),
    "model.d_state": ("d_state", int),
    "model.expansion_factor": ("expansion_factor", float),
    "model.wavelet_levels": ("wavelet_levels", int),
    "model.depths": ("depths", lambda v: tuple(int(s) for s in v.split(","))),
    "model.dt_rank": ("dt_rank", int),
    "model.shared_projections": ("shared_projections", _parse_bool),
}

_TRAIN_KEYS = {
    "train.lr": ("lr", float),
    "train.weight_decay": ("weight_decay", float),
    "train.epochs": ("epochs", int),
    "train.batch_size": ("batch_size", int),
    "train.alpha": ("alpha", float),
    "train.seed": ("seed", int),
    "train.augment": ("augment_flags", _parse_augment),
    "train.max_steps": ("max_steps", int),
    "train.eval_every": ("eval_every", int),
}


def parse_run_config_text(text: str, path: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not sep:
            raise ValidationError(f"{path}:{ln}: expected key=value, got {raw!r}")
        try:
            if key in _MODEL_KEYS:
                attr, conv = _MODEL_KEYS[key]
                setattr(cfg.model, attr, conv(value))
            elif key in _TRAIN_KEYS:
                attr, conv = _TRAIN_KEYS[key]
                setattr(cfg.train, attr, conv(value))
            elif key == "data.manifest":
                cfg.manifest = value
            elif key == "data.spacing":
                parts = [float(s) for s in value.split(",")]
                if len(parts) != 2 or parts[0] <= 0 or parts[1] <= 0:
                    raise ValidationError("spacing needs two positive floats")
                cfg.spacing = tuple(parts)
            elif key == "io.out_dir":
                cfg.out_dir = value
            else:
                raise ValidationError(f"{path}:{ln}: unknown key {key!r}")
        except ValidationError:
            raise
        except Exception as exc:
            raise ValidationError(f"{path}:{ln}: bad value for {key}: {exc}")
    try:
        cfg.model.validate()
        cfg.train.validate()
    except Exception as exc:
        raise ValidationError(f"{path}: {exc}")
    return cfg


def parse_run_config(path) -> RunConfig:
    with open(path) as f:
        return parse_run_config_text(f.read(), str(path))
