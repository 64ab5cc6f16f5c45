"""Run configuration: an INI file with [model], [train] and [data] sections.

Every key maps onto a field of ModelSpec, TrainConfig or DataConfig. Unknown
keys are errors. Values can be overridden with ``section.key=value`` strings
(the CLI's ``--set``), and the effective configuration round-trips through
``to_text`` so a run directory records exactly what was used.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .dataio import CLASSES
from .model import ModelSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    root: str = ""
    fold_plan: str = ""
    out_dir: str = "runs"
    k: int = 5
    split_seed: int = 0
    stratified: bool = True
    classes: tuple[str, ...] = CLASSES
    # >0 and no root: train on this many generated ellipse images
    synthetic: int = 0


# the model's input size always follows train.input_size
_MODEL_SKIP = {"input_size", "in_channels"}
FULL_PROFILE = {"train.input_size": "256", "train.epochs": "200"}


@dataclass
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def spec(self) -> ModelSpec:
        """Model spec with the input size taken from the training config."""
        return self.model.with_input(self.train.input_size)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: {k: _format(v) for k, v in _fields(obj).items()} for name, obj in self._sections().items()}

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_dict(self.to_dict())
        lines = []
        for sect in cp.sections():
            lines.append(f"[{sect}]")
            lines += [f"{k} = {v}" for k, v in cp[sect].items()]
            lines.append("")
        return "\n".join(lines)

    def _sections(self) -> dict[str, Any]:
        return {"model": self.model, "train": self.train, "data": self.data}


def _fields(obj) -> dict[str, Any]:
    skip = _MODEL_SKIP if isinstance(obj, ModelSpec) else set()
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if f.name not in skip}


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join("".join("1" if b else "0" for b in pair) for pair in v)
        return ",".join(str(x) for x in v)
    return str(v)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(text: str, key: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _parse(text: str, default: Any, key: str) -> Any:
    try:
        if isinstance(default, bool):
            return _parse_bool(text, key)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], tuple):
                pairs = []
                for it in items:
                    if len(it) != 2 or set(it) - {"0", "1"}:
                        raise ConfigError(f"{key}: skip pairs are two 0/1 digits, got {it!r}")
                    pairs.append((it[0] == "1", it[1] == "1"))
                return tuple(pairs)
            elem = type(default[0]) if default else str
            return tuple(elem(it) for it in items)
        return text.strip()
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{key}: cannot parse {text!r} ({e})") from None


def apply_values(cfg: RunConfig, values: dict[str, dict[str, str]]) -> RunConfig:
    """Return ``cfg`` with ``{section: {key: text}}`` values parsed and applied."""
    sections = cfg._sections()
    updated = {}
    for sect, items in values.items():
        if sect not in sections:
            raise ConfigError(f"unknown section [{sect}]; expected one of {', '.join(sections)}")
        current = _fields(sections[sect])
        changes = {}
        for key, text in items.items():
            if key not in current:
                raise ConfigError(f"unknown key {sect}.{key}")
            changes[key] = _parse(text, current[key], f"{sect}.{key}")
        try:
            updated[sect] = dataclasses.replace(sections[sect], **changes)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"[{sect}]: {e}") from None
    merged = {**sections, **updated}
    return RunConfig(merged["model"], merged["train"], merged["data"])


def parse_overrides(pairs: Sequence[str]) -> dict[str, dict[str, str]]:
    """``["train.epochs=5", ...]`` into ``{"train": {"epochs": "5"}}``."""
    out: dict[str, dict[str, str]] = {}
    for p in pairs:
        key, sep, value = p.partition("=")
        sect, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {p!r} is not of the form section.key=value")
        out.setdefault(sect, {})[name.strip().lower()] = value.strip()
    return out


def parse_config(text: str, overrides: Sequence[str] = (), full: bool = False) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {str(e).splitlines()[0]}") from None
    cfg = apply_values(RunConfig(), {s: dict(cp[s]) for s in cp.sections()})
    if full:
        cfg = apply_values(cfg, parse_overrides([f"{k}={v}" for k, v in FULL_PROFILE.items()]))
    if overrides:
        cfg = apply_values(cfg, parse_overrides(overrides))
    return cfg


def load_config(path: str | Path | None, overrides: Sequence[str] = (), full: bool = False) -> RunConfig:
    """Read ``path`` (or start from defaults when None) and apply overrides."""
    text = "" if path is None else Path(path).read_text()
    return parse_config(text, overrides, full)
