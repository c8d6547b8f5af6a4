"""Run configuration: one INI file with sections mapped onto config dataclasses.

Sections are ``run``, ``paths``, ``oracle``, ``generation``, ``training`` and
``experiment``. Every key has a default (see ``data/default.ini``); unknown
sections or keys are rejected. The master seed lives in ``[run]`` and is
copied into the oracle, generator, and trainer.
"""
from __future__ import annotations

import configparser
import io
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datagen import GenConfig
from .evalcore import OracleConfig
from .models import ARCHS
from .tasks import ExperimentConfig, Variant
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    jobs: int = 1
    arch: str = "treelstm"
    split: str = "random"
    holdout_depth: int = 4
    gradcheck_configs: int = 100
    gradcheck_max_dim: int = 8


@dataclass(frozen=True)
class PathsSection:
    axioms: str = ""
    dataset: str = "dataset.jsonl"
    checkpoint: str = "model.ckpt"
    out_dir: str = "reports"


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    paths: PathsSection = field(default_factory=PathsSection)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    generation: GenConfig = field(default_factory=GenConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, run=replace(self.run, seed=seed)).synced()

    def synced(self) -> "RunConfig":
        """Copy the master seed into the seeded sections."""
        s = self.run.seed
        exp = self.experiment
        if not exp.seeds:
            exp = replace(exp, seeds=(s,))
        return replace(self, oracle=replace(self.oracle, seed=s),
                       generation=replace(self.generation, seed=s),
                       training=replace(self.training, seed=s),
                       experiment=replace(exp, split_seed=s))


SECTIONS = {f.name: f for f in fields(RunConfig)}
# seeds are driven by [run] seed
_DERIVED = {"oracle": {"seed"}, "generation": {"seed"}, "training": {"seed"},
            "experiment": {"split_seed"}}


def section_keys(name: str) -> list[str]:
    cls = _section_class(name)
    return [f.name for f in fields(cls) if f.name not in _DERIVED.get(name, set())]


def _section_class(name: str):
    hints = typing.get_type_hints(RunConfig)
    return hints[name]


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(text: str, tp, default):
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(types, "UnionType", None)):
        if text.lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(text, inner, default)
    if tp is bool:
        return _parse_bool(text)
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    if origin is tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        inner = args[0]
        if inner is Variant:
            return tuple(Variant.parse(t) for t in items)
        return tuple(_coerce(t, inner, None) for t in items)
    raise TypeError(f"unsupported config type {tp!r}")


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(v.name if isinstance(v, Variant) else _render(v) for v in value)
    return str(value)


def load_config(path: str | Path | None = None, text: str | None = None) -> RunConfig:
    """Parse an INI run config; missing keys keep their defaults."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cp.read_string(p.read_text(), source=str(p))
    if text is not None:
        cp.read_string(text)
    cfg = RunConfig()
    updates = {}
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        cls = _section_class(sec)
        allowed = set(section_keys(sec))
        hints = typing.get_type_hints(cls)
        current = getattr(cfg, sec)
        kw = {}
        for key, raw in cp.items(sec):
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            try:
                kw[key] = _coerce(raw, hints[key], getattr(current, key))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{sec}] {key}: {exc}") from None
        try:
            updates[sec] = replace(current, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{sec}]: {exc}") from None
    cfg = replace(cfg, **updates)
    if cfg.run.arch not in ARCHS:
        raise ConfigError(f"[run] arch must be one of {ARCHS}")
    if cfg.run.split not in ("random", "holdout"):
        raise ConfigError("[run] split must be 'random' or 'holdout'")
    return cfg.synced()


def dump_config(cfg: RunConfig) -> str:
    """INI text that :func:`load_config` maps back to ``cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        cp[sec] = {k: _render(getattr(obj, k)) for k in section_keys(sec)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def as_dict(cfg: RunConfig) -> dict:
    out = {}
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        out[sec] = {k: _render(getattr(obj, k)) for k in section_keys(sec)}
    return out


__all__ = ["RunConfig", "RunSection", "PathsSection", "ConfigError", "load_config", "dump_config",
           "as_dict", "section_keys"]
