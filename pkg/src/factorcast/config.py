"""Run configuration: a human-editable YAML file with sim/model/train/eval
sections plus a top-level seed. Absent fields fall back to the documented
defaults; unknown keys and type mismatches are rejected with the offending
key path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

import yaml

from .losses import LossWeights
from .model import ModelConfig
from .simulator import SimConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    zetas: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    horizons: list = field(default_factory=lambda: [1, 5])
    plan_horizons: list = field(default_factory=lambda: [3, 5])
    plan_family: str = "all"          # or "one-hot"
    seeds: list = field(default_factory=lambda: [0])
    factor_zeta: float = 0.7
    n_plan_patients: int = 200

    def validate(self) -> None:
        if not self.zetas or any(not 0.0 <= z <= 1.0 for z in self.zetas):
            raise ConfigError("eval.zetas must be non-empty values in [0, 1]")
        if any(h < 1 for h in self.horizons):
            raise ConfigError("eval.horizons must be >= 1")
        if any(not 1 <= h <= 5 for h in self.plan_horizons):
            raise ConfigError("eval.plan_horizons must lie in [1, 5] (exhaustive enumeration)")
        if self.plan_family not in ("all", "one-hot"):
            raise ConfigError("eval.plan_family must be 'all' or 'one-hot'")
        if not 0.0 <= self.factor_zeta <= 1.0:
            raise ConfigError("eval.factor_zeta must lie in [0, 1]")
        if self.n_plan_patients < 1:
            raise ConfigError("eval.n_plan_patients must be >= 1")


@dataclass
class RunConfig:
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def apply_seed(self, seed: int | None = None) -> "RunConfig":
        if seed is not None:
            self.seed = int(seed)
        self.sim.seed = self.seed
        self.train.seed = self.seed
        return self

    def validate(self) -> None:
        try:
            self.sim.validate()
            self.model.validate()
            self.train.validate()
            self.eval.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


# Keys accepted per section; train.alpha/beta/gamma/l2 address the loss weights.
_TRAIN_WEIGHT_KEYS = ("alpha", "beta", "gamma", "l2")
_SECTION_CLASSES = {"sim": SimConfig, "model": ModelConfig,
                    "train": TrainConfig, "eval": EvalConfig}
_SKIP_FIELDS = {"sim": {"seed"}, "train": {"seed", "weights"}, "model": set(), "eval": set()}


def _coerce(path: str, value, target_type):
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if target_type is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    return value


def _field_type(cls, name):
    for f in fields(cls):
        if f.name == name:
            if f.type in ("float", float):
                return float
            if f.type in ("int", int):
                return int
            if f.type in ("bool", bool):
                return bool
            if f.type in ("str", str):
                return str
            if f.type in ("list", list):
                return list
            return None
    raise KeyError(name)


def _build_section(name: str, cls, data: dict):
    obj = cls()
    allowed = {f.name for f in fields(cls)} - _SKIP_FIELDS[name]
    if name == "train":
        allowed |= set(_TRAIN_WEIGHT_KEYS)
    for key, value in data.items():
        path = f"{name}.{key}"
        if key not in allowed:
            raise ConfigError(f"{path}: unknown key")
        if name == "train" and key in _TRAIN_WEIGHT_KEYS:
            setattr(obj.weights, key, _coerce(path, value, float))
            continue
        if name == "train" and key == "mmd_bandwidth":
            if not (value == "median" or isinstance(value, (int, float))):
                raise ConfigError(f"{path}: expected 'median' or a number")
            setattr(obj, key, value if value == "median" else float(value))
            continue
        setattr(obj, key, _coerce(path, value, _field_type(cls, key)))
    return obj


def config_from_dict(data: dict | None) -> RunConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(data) - set(_SECTION_CLASSES) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = RunConfig()
    if "seed" in data:
        cfg.seed = _coerce("seed", data["seed"], int)
    for name, cls in _SECTION_CLASSES.items():
        section = data.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"{name}: expected a mapping")
        setattr(cfg, name, _build_section(name, cls, section))
    cfg.apply_seed()
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from None
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    def section(obj, name):
        d = {}
        for f in fields(obj):
            if f.name in _SKIP_FIELDS[name]:
                continue
            d[f.name] = getattr(obj, f.name)
        if name == "train":
            for k in _TRAIN_WEIGHT_KEYS:
                d[k] = getattr(cfg.train.weights, k)
        return d

    return {
        "seed": cfg.seed,
        "sim": section(cfg.sim, "sim"),
        "model": section(cfg.model, "model"),
        "train": section(cfg.train, "train"),
        "eval": section(cfg.eval, "eval"),
    }


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()
