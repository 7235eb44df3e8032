"""INI config files (key = value under [model] / [data] / [train] sections).

Every key is optional; omitted keys take the dataclass defaults.  Unknown
keys are rejected so typos fail loudly.  All keys are documented in the
README.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .backbone import BackboneConfig, ModelConfig
from .harness import DataConfig, TrainConfig


class ConfigFileError(ValueError):
    """Missing file, unknown key, or unparsable value."""


_MODEL_KEYS = {
    "task": str,
    "mode": str,
    "n_parts": int,
    "pruned": bool,
    "prompt": str,
    "input_len": int,
    "horizon": int,
    "n_classes": int,
    "patch_size": int,
    "patch_stride": int,
    "normalize": bool,
    "dsca_enabled": bool,
    "coarse_enabled": bool,
    "adjacency": str,
    # backbone
    "layers": int,
    "width": int,
    "heads": int,
    "ff_mult": int,
    "insertion_positions": "int_list",
    "freeze_policy": str,
    "max_seq_len": int,
}

_DATA_KEYS = {
    "source": str,
    "path": str,
    "kind": str,
    "length": int,
    "channels": int,
    "noise": float,
    "data_seed": int,
    "timestamp_col": "optional_int",
    "has_header": bool,
    "window_stride": int,
    "train_frac": float,
    "val_frac": float,
    "test_frac": float,
    "few_shot_ratio": float,
    "seasonality": int,
    "class_period_base": float,
}

_TRAIN_KEYS = {
    "lr0": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "t_max": int,
    "eta_min": float,
    "batch_size": int,
    "patience": int,
    "max_epochs": int,
    "seed": int,
    "loss": str,
    "optimizer": str,
}

_BACKBONE_FIELDS = {
    "layers",
    "width",
    "heads",
    "ff_mult",
    "insertion_positions",
    "freeze_policy",
    "max_seq_len",
}


def _parse(value: str, kind, key: str):
    try:
        if kind is bool:
            lowered = value.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int_list":
            return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
        if kind == "optional_int":
            return None if value.strip().lower() in ("", "none") else int(value)
        return kind(value)
    except ValueError as exc:
        raise ConfigFileError(f"bad value for {key!r}: {value!r}") from exc


def _section(parser: configparser.ConfigParser, name: str, schema: dict) -> dict:
    out: dict = {}
    if not parser.has_section(name):
        return out
    for key, value in parser.items(name):
        if key not in schema:
            raise ConfigFileError(f"unknown key {key!r} in section [{name}]")
        out[key] = _parse(value, schema[key], key)
    return out


def load_config(path: str | Path) -> tuple[ModelConfig, DataConfig, TrainConfig]:
    path = Path(path)
    if not path.is_file():
        raise ConfigFileError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigFileError(f"cannot parse {path}: {exc}") from exc
    for section in parser.sections():
        if section not in ("model", "data", "train"):
            raise ConfigFileError(f"unknown section [{section}]")

    model_raw = _section(parser, "model", _MODEL_KEYS)
    backbone_raw = {k: v for k, v in model_raw.items() if k in _BACKBONE_FIELDS}
    model_raw = {k: v for k, v in model_raw.items() if k not in _BACKBONE_FIELDS}
    if backbone_raw:
        if "layers" in backbone_raw and "insertion_positions" not in backbone_raw:
            # default hooks sit at the input and after the last block
            layers = backbone_raw["layers"]
            backbone_raw["insertion_positions"] = (0, layers) if layers > 0 else (0,)
        model_raw["backbone"] = BackboneConfig(**backbone_raw)
    mcfg = ModelConfig(**model_raw)

    data_raw = _section(parser, "data", _DATA_KEYS)
    fractions = (
        data_raw.pop("train_frac", 0.7),
        data_raw.pop("val_frac", 0.1),
        data_raw.pop("test_frac", 0.2),
    )
    dcfg = DataConfig(fractions=fractions, **data_raw)

    train_raw = _section(parser, "train", _TRAIN_KEYS)
    betas = (train_raw.pop("beta1", 0.9), train_raw.pop("beta2", 0.999))
    tcfg = TrainConfig(betas=betas, **train_raw)
    return mcfg, dcfg, tcfg
