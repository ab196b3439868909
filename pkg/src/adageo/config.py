"""Run configuration files.

A config file has up to four sections, each mapping ``key = value`` onto the
fields of one dataclass::

    [data]    SynthConfig   (plus ``seed``)
    [train]   TrainConfig scalars
    [net]     NetConfig
    [ddda]    DddaConfig

Tuples are comma separated, booleans accept true/false/yes/no/on/off/1/0.
Unknown sections or keys and unparsable values raise ``ConfigError`` naming
the file, line and field.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .ddda import DddaConfig
from .geodata import SynthConfig
from .model import NetConfig
from .trainer import TrainConfig

_BOOL = {"true": True, "yes": True, "on": True, "1": True,
         "false": False, "no": False, "off": False, "0": False}


class ConfigError(ValueError):
    def __init__(self, msg: str, path=None, line: int | None = None, key: str | None = None):
        where = str(path) if path else "<config>"
        if line is not None:
            where += f":{line}"
        if key:
            where += f" [{key}]"
        super().__init__(f"{where}: {msg}")
        self.path, self.line, self.key = path, line, key


@dataclass
class RunConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    data_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def with_overrides(self, **train_kw) -> "RunConfig":
        kw = {k: v for k, v in train_kw.items() if v is not None}
        return replace(self, train=replace(self.train, **kw)) if kw else self


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in _BOOL:
            raise ValueError(f"expected a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        proto = default[0] if default else ""
        return tuple(_parse_value(s, proto) for s in items)
    if isinstance(default, str):
        return raw
    raise ValueError(f"unsupported field type {type(default).__name__}")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _scalar_fields(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name))}


def _line_numbers(text: str) -> dict:
    """(section, key) -> 1-based line number."""
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            out[(section, None)] = i
        elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = s.split("=", 1)[0] if "=" in s else s.split(":", 1)[0]
            out[(section, key.strip().lower())] = i
    return out


def _apply(obj, items: dict, section: str, lines: dict, path):
    known = _scalar_fields(obj)
    updates = {}
    for key, raw in items.items():
        line = lines.get((section, key))
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{section}]", path, line, key)
        try:
            updates[key] = _parse_value(raw, known[key])
        except ValueError as exc:
            raise ConfigError(str(exc), path, line, key) from None
    try:
        return replace(obj, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc), path, lines.get((section, None)), section) from None


def parse_config(text: str, path=None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path or "<config>"))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(exc.message.splitlines()[0] if hasattr(exc, "message") else str(exc),
                          path, line) from None
    lines = _line_numbers(text)
    for sec in parser.sections():
        if sec not in ("data", "train", "net", "ddda"):
            raise ConfigError(f"unknown section [{sec}]", path, lines.get((sec, None)))
    cfg = RunConfig()
    data_items = dict(parser["data"]) if parser.has_section("data") else {}
    if "seed" in data_items:
        try:
            cfg.data_seed = int(data_items.pop("seed"))
        except ValueError:
            raise ConfigError("expected an integer", path, lines.get(("data", "seed")), "seed") from None
    try:
        data = _apply(cfg.data, data_items, "data", lines, path)
        net = _apply(NetConfig(), dict(parser["net"]) if parser.has_section("net") else {}, "net", lines, path)
        ddda = _apply(DddaConfig(), dict(parser["ddda"]) if parser.has_section("ddda") else {},
                      "ddda", lines, path)
        train_items = dict(parser["train"]) if parser.has_section("train") else {}
        train = _apply(TrainConfig(net=net, ddda_cfg=ddda), train_items, "train", lines, path)
        data.check()
        net.check()
        ddda.check()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc), path) from None
    cfg.data, cfg.train = data, train
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    return parse_config(text, path)


def dump_config(cfg: RunConfig) -> str:
    """Effective configuration in the same file format; ``parse_config`` round-trips it."""
    out = ["[data]", f"seed = {cfg.data_seed}"]
    out += [f"{k} = {_format_value(v)}" for k, v in _scalar_fields(cfg.data).items()]
    for name, obj in (("train", cfg.train), ("net", cfg.train.net), ("ddda", cfg.train.ddda_cfg)):
        out.append("")
        out.append(f"[{name}]")
        out += [f"{k} = {_format_value(v)}" for k, v in _scalar_fields(obj).items()]
    return "\n".join(out) + "\n"
