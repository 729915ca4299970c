"""The run configuration file.

One INI document (parsed with :mod:`configparser`) with four sections::

    [nerv]         NervConfig fields
    [hypernet]     HypernetConfig fields, plus ``tokens`` and ``token_mode``
    [train]        TrainConfig for hyper-network training
    [fit]          TrainConfig for the per-video gradient baseline

Sequences are comma separated (``upscales = 2, 2, 2, 4``), booleans are
``true``/``false`` and ``none`` clears an optional value. Every section and
key is optional; anything not listed in the dataclasses is rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, NervcError
from .hypernet import HypernetConfig, TokenSpec
from .nerv import NervConfig
from .training import TrainConfig

SECTIONS = ("nerv", "hypernet", "train", "fit")


def _fit_default() -> TrainConfig:
    return TrainConfig(steps=2000, lr=1e-2, batch_size=1)


@dataclass(frozen=True)
class RunConfig:
    nerv: NervConfig = field(default_factory=NervConfig.desk)
    hypernet: HypernetConfig = field(default_factory=HypernetConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig)
    fit: TrainConfig = field(default_factory=_fit_default)


def _parse_value(raw: str, kind, key: str):
    text = raw.strip()
    origin = typing.get_origin(kind)
    args = typing.get_args(kind)
    if origin is typing.Union or type(kind).__name__ == "UnionType":
        if text.lower() == "none":
            return None
        kind = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(kind), typing.get_args(kind)
    try:
        if origin is tuple:
            return tuple(_parse_value(part, args[0], key) for part in text.split(",") if part.strip())
        if kind is bool:
            if text.lower() in ("true", "yes", "1"):
                return True
            if text.lower() in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None
    raise ConfigError(f"{key}: unsupported field type {kind}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _section_values(parser, section: str, cls, skip=()) -> tuple[dict, dict]:
    types = {k: v for k, v in _field_types(cls).items() if k not in skip}
    known, extra = {}, {}
    if not parser.has_section(section):
        return known, extra
    for key, raw in parser.items(section):
        if key in types:
            known[key] = _parse_value(raw, types[key], f"[{section}] {key}")
        else:
            extra[key] = raw
    return known, extra


def _reject(section: str, extra: dict) -> None:
    if extra:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(extra))}")


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {str(exc).splitlines()[0]}") from exc
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    try:
        nerv_values, extra = _section_values(parser, "nerv", NervConfig)
        _reject("nerv", extra)
        nerv = NervConfig.desk()
        nerv = dataclasses.replace(nerv, **nerv_values) if nerv_values else nerv

        hyper_values, extra = _section_values(parser, "hypernet", HypernetConfig, skip=("nerv", "tokens"))
        mode = extra.pop("token_mode", "layer-adaptive").strip()
        counts_raw = extra.pop("tokens", None)
        _reject("hypernet", extra)
        if counts_raw is None:
            tokens = TokenSpec.desk(mode) if nerv == NervConfig.desk() else None
            if tokens is None:
                raise ConfigError("[hypernet] tokens is required when [nerv] differs from the desk decoder")
        else:
            tokens = TokenSpec(_parse_value(counts_raw, tuple[int, ...], "[hypernet] tokens"), mode)
        hypernet = HypernetConfig(nerv=nerv, tokens=tokens, **hyper_values)

        train_values, extra = _section_values(parser, "train", TrainConfig)
        _reject("train", extra)
        fit_values, extra = _section_values(parser, "fit", TrainConfig)
        _reject("fit", extra)
        return RunConfig(nerv, hypernet, TrainConfig(**train_values),
                         dataclasses.replace(_fit_default(), **fit_values))
    except ConfigError:
        raise
    except (NervcError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def format_config(run: RunConfig) -> str:
    """Canonical text for ``run``; ``parse_config(format_config(r)) == r``."""
    lines = ["[nerv]"]
    for f in fields(NervConfig):
        lines.append(f"{f.name} = {_format_value(getattr(run.nerv, f.name))}")
    lines += ["", "[hypernet]", f"tokens = {_format_value(run.hypernet.tokens.counts)}",
              f"token_mode = {run.hypernet.tokens.mode}"]
    for f in fields(HypernetConfig):
        if f.name not in ("nerv", "tokens"):
            lines.append(f"{f.name} = {_format_value(getattr(run.hypernet, f.name))}")
    for section, cfg in (("train", run.train), ("fit", run.fit)):
        lines += ["", f"[{section}]"]
        for f in fields(TrainConfig):
            lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)
