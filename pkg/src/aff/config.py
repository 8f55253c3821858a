"""TOML run configuration: ``[data]``, ``[train]``, ``[model]`` and ``[eval]``.

Every key has an explicit default (see ``dumps(default_config())``) and any
key the loader does not know is rejected, so typos fail loudly.
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .fusion import MixerConfig
from .synth import FamilySpec, GenSpec
from .training import TrainConfig


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    hidden: int = 64
    depth: int = 4
    heads: int = 4
    share_weights: bool = True
    encoder_hidden: int = 32

    def mixer(self):
        return MixerConfig(self.dim, self.hidden, self.depth, self.heads, self.share_weights)


@dataclass(frozen=True)
class EvalConfig:
    top_k: int = 0

    def __post_init__(self):
        if self.top_k < 0:
            raise ConfigError("top_k must be >= 0 (0 means the full ranking)")


@dataclass(frozen=True)
class Config:
    data: GenSpec = field(default_factory=GenSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def default_config():
    return Config()


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _check_type(section, key, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"[{section}] {key} must be {type(default).__name__}, got {value!r}")


def _build(cls, section, values):
    if not isinstance(values, dict):
        raise ConfigError(f"[{section}] must be a table")
    unknown = sorted(set(values) - _fields(cls))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    # required fields have no default to compare against; use a typed stand-in
    stand_in = {"int": 0, "float": 0.0, "str": "", "bool": False}
    defaults = {f.name: stand_in.get(f.type) if f.default is dataclasses.MISSING else f.default
                for f in dataclasses.fields(cls)}
    for key, value in values.items():
        _check_type(section, key, defaults[key], value)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def from_dict(doc):
    unknown = sorted(set(doc) - _fields(Config))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    data = dict(doc.get("data", {}))
    if "families" in data:
        fams = data["families"]
        if not isinstance(fams, list) or not fams:
            raise ConfigError("[data] families must be a non-empty array of tables")
        data["families"] = tuple(_build(FamilySpec, "data.families", f) for f in fams)
    return Config(
        data=_build(GenSpec, "data", data),
        train=_build(TrainConfig, "train", dict(doc.get("train", {}))),
        model=_build(ModelConfig, "model", dict(doc.get("model", {}))),
        eval=_build(EvalConfig, "eval", dict(doc.get("eval", {}))),
    )


def to_dict(cfg):
    data = dataclasses.asdict(cfg.data)
    data["split"] = list(data["split"])
    data["families"] = [dataclasses.asdict(f) for f in cfg.data.families]
    return {"data": data, "train": dataclasses.asdict(cfg.train),
            "model": dataclasses.asdict(cfg.model), "eval": dataclasses.asdict(cfg.eval)}


def loads(text):
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return from_dict(doc)


def load(path):
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def dumps(cfg):
    return tomli_w.dumps(to_dict(cfg))


def replace_section(cfg, section, **changes):
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **changes)})
