"""Flat ``key = value`` run configuration with ``#`` comments."""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import SynthSpec
from .trainer import TrainSpec


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _optional_int(text: str):
    return None if text.lower() in ("", "none", "auto") else int(text)


# key -> parser
SYNTH_KEYS = {
    "num_coarse_groups": int,
    "subclasses_per_group": int,
    "samples_per_subclass": int,
    "test_samples_per_subclass": int,
    "feature_dim": int,
    "coarse_separation": float,
    "fine_separation": float,
    "noise_sigma": float,
    "synth_seed": int,
    "image": _bool,
    "image_block": int,
}
TRAIN_KEYS = {
    "K": int,
    "hidden": _int_tuple,
    "conv_channels": int,
    "learning_rate": float,
    "batch_size": int,
    "pretrain_epochs": int,
    "expert_epochs": int,
    "joint_epochs": int,
    "seed": int,
    "alpha_gradient_mode": str,
    "gated_procedure": int,
    "lda_dim": _optional_int,
    "bag_fraction": float,
}
PATH_KEYS = {"train_data": str, "test_data": str, "partition": str, "dataset_name": str}
GRADCHECK_KEYS = {"gradcheck_triples": int, "gradcheck_max_experts": int, "gradcheck_max_classes": int}
KEYS = {**SYNTH_KEYS, **TRAIN_KEYS, **PATH_KEYS, **GRADCHECK_KEYS}

SYNTH_REQUIRED = ("num_coarse_groups", "subclasses_per_group", "samples_per_subclass", "feature_dim",
                  "coarse_separation", "fine_separation", "noise_sigma", "synth_seed")
TRAIN_REQUIRED = ("train_data", "test_data", "seed")


@dataclass
class Config:
    values: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)
    path: str = "<config>"

    def require(self, *keys: str) -> None:
        for key in keys:
            if key not in self.values:
                raise ConfigError(f"{self.path}: missing required key '{key}'")

    def get(self, key, default=None):
        return self.values.get(key, default)

    def __getitem__(self, key):
        self.require(key)
        return self.values[key]

    def synth_spec(self) -> SynthSpec:
        self.require(*SYNTH_REQUIRED)
        kw = {k: v for k, v in self.values.items() if k in SYNTH_KEYS and k != "synth_seed"}
        return self._build(SynthSpec, kw | {"seed": self.values["synth_seed"]}, SYNTH_KEYS)

    def train_spec(self, architecture: str = "mix") -> TrainSpec:
        kw = {k: v for k, v in self.values.items() if k in TRAIN_KEYS}
        return self._build(TrainSpec, kw | {"architecture": architecture}, TRAIN_KEYS)

    def _build(self, cls, kw, keys):
        try:
            obj = cls(**kw)
            if hasattr(obj, "validate"):
                obj.validate()
            return obj
        except ValueError as err:
            where = ", ".join(f"{k} (line {self.lines[k]})" for k in kw if k in self.lines and k in keys)
            raise ConfigError(f"{self.path}: invalid settings [{where}]: {err}") from err


def parse_config(text: str, path: str = "<config>") -> Config:
    cfg = Config(path=path)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}, line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{path}, line {lineno}: unknown key '{key}'")
        if key in cfg.values:
            raise ConfigError(f"{path}, line {lineno}: duplicate key '{key}' (first set on line {cfg.lines[key]})")
        try:
            cfg.values[key] = KEYS[key](value)
        except ValueError as err:
            raise ConfigError(f"{path}, line {lineno}: bad value for '{key}': {err}") from err
        cfg.lines[key] = lineno
    return cfg


def load_config(path) -> Config:
    with open(path) as f:
        return parse_config(f.read(), str(path))
