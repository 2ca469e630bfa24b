"""Run configuration: YAML files, dotted overrides, strict schema."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .mask import ConfigError, DecayConfig
from .model import ModelConfig
from .optim import SCHEDULES


@dataclass
class SyntheticSpec:
    kind: str = "triangle"
    count: int = 700
    n_min: int = 8
    n_max: int = 16
    p_edge: float = 0.15
    d_in: int = 8
    seed: int = 0


@dataclass
class DataConfig:
    path: str | None = None
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    split_seed: int = 0
    # explicit (train, val, test) sizes; 8:1:1 ratio when absent
    split_sizes: list[int] | None = None
    train_fraction: float = 1.0


@dataclass
class ModelSection:
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn_mult: int = 2
    dropout: float = 0.0
    attn_dropout: float = 0.5
    pe: str = "rwse"
    pe_dim: int = 20
    mpnn: str = "gcn"
    gcn_activation: str = "sigmoid"


@dataclass
class DecaySection:
    enabled: bool = True
    lam: float = 0.6
    decay_fn: str = "exponential"
    linear_endpoint: float = 6.0
    zero_mode: str = "multiplicative"
    unreachable_policy: str = "max_plus_one"
    unreachable_value: float | None = None
    index: str = "sph"


@dataclass
class OptimSection:
    name: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "warmup_cosine"
    warmup_fraction: float = 0.05
    grad_clip: float | None = None


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 32


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    decay: DecaySection = field(default_factory=DecaySection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def decay_config(self) -> DecayConfig | None:
        d = self.decay
        if not d.enabled:
            return None
        return DecayConfig(
            lam=d.lam,
            decay_fn=d.decay_fn,
            linear_endpoint=d.linear_endpoint,
            zero_mode=d.zero_mode,
            unreachable_policy=d.unreachable_policy,
            unreachable_value=d.unreachable_value,
            index=d.index,
        )

    def model_config(self, d_in: int, task: str, num_classes: int | None) -> ModelConfig:
        m = self.model
        return ModelConfig(
            d_in=d_in,
            task=task,
            num_classes=num_classes or 1,
            layers=m.layers,
            hidden=m.hidden,
            heads=m.heads,
            ffn_mult=m.ffn_mult,
            dropout=m.dropout,
            attn_dropout=m.attn_dropout,
            pe=m.pe,
            pe_dim=m.pe_dim,
            mpnn=m.mpnn,
            gcn_activation=m.gcn_activation,
            decay=self.decay_config(),
        )

    def validate(self) -> None:
        if self.data.path is None and self.data.synthetic is None:
            raise ConfigError("data: give either data.path or data.synthetic")
        if self.data.synthetic is not None and self.data.synthetic.kind not in ("triangle", "hopcount"):
            raise ConfigError("data.synthetic.kind must be 'triangle' or 'hopcount'")
        if self.data.split_sizes is not None and len(self.data.split_sizes) != 3:
            raise ConfigError("data.split_sizes must list three sizes")
        if not 0.0 < self.data.train_fraction <= 1.0:
            raise ConfigError("data.train_fraction must lie in (0, 1]")
        if self.optim.name not in ("adamw", "adam"):
            raise ConfigError("optim.name must be 'adamw' or 'adam'")
        if self.optim.schedule not in SCHEDULES:
            raise ConfigError(f"optim.schedule must be one of {SCHEDULES}")
        if self.train.epochs < 0 or self.train.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
        if self.decay.index not in ("sph", "curve", "fs"):
            raise ConfigError("decay.index must be one of sph, curve, fs")
        self.model_config(1, "graph_cls", 2).validate()


# YAML uses "lambda" for readability; the attribute is ``lam``
_ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


def _build(cls, data: Any, path: str):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        attr = _ALIASES.get(key, key)
        full = f"{path}.{key}" if path else key
        if attr not in fields:
            raise ConfigError(f"unknown config key {full!r}")
        sub = _nested_type(cls, attr)
        kwargs[attr] = _build(sub, value, full) if sub is not None else _coerce(value, fields[attr], full)
    return cls(**kwargs)


_NESTED = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): ModelSection,
    (RunConfig, "decay"): DecaySection,
    (RunConfig, "optim"): OptimSection,
    (RunConfig, "train"): TrainSection,
    (DataConfig, "synthetic"): SyntheticSpec,
}


def _nested_type(cls, attr):
    return _NESTED.get((cls, attr))


def _coerce(value, f: dataclasses.Field, path: str):
    default = f.default if f.default is not dataclasses.MISSING else None
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an int")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string")
    return value


def _rename_out(d):
    if isinstance(d, dict):
        return {_REVERSE.get(k, k): _rename_out(v) for k, v in d.items()}
    return d


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "")
    cfg.validate()
    return cfg


def config_to_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(_rename_out(cfg.to_dict()), sort_keys=False)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments; values are parsed as YAML scalars."""
    data = copy.deepcopy(data or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = {}
                node[part] = nxt
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
            node = nxt
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    # start from resolved defaults so partial overrides of nested sections work
    base = _rename_out(RunConfig().to_dict())
    merged = _deep_merge(base, data)
    merged = apply_overrides(merged, overrides or [])
    return config_from_dict(merged)


def _deep_merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (top or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out
