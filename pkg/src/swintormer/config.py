"""``key = value`` run configuration files mirroring the CLI flags.

Keys are flag names without the leading dashes (``attn-window`` and ``attn_window``
are the same key).  ``#`` starts a comment at the beginning of a line or after
whitespace.  Flags given on the command line override file values.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def _strip_comment(line: str) -> str:
    if line.lstrip().startswith("#"):
        return ""
    for i, ch in enumerate(line):
        if ch == "#" and i > 0 and line[i - 1].isspace():
            return line[:i]
    return line


def parse_text(text: str) -> dict[str, str]:
    """Raw ``{key: value}`` strings from config text; later lines win."""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(line).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if not key:
            raise ConfigError(f"line {n}: empty key")
        out[key] = value.strip()
    return out


def read_config(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc})") from None
    return parse_text(text)


def _format(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    """Resolved settings of one subcommand (every flag, after file and flag merging)."""

    command: str
    values: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"# swintormer {self.command}"]
        for key in sorted(self.values):
            value = self.values[key]
            if value is None:
                continue
            lines.append(f"{key.replace('_', '-')} = {_format(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_namespace(cls, ns: argparse.Namespace, skip=("command", "config", "func")) -> "RunConfig":
        values = {k: v for k, v in vars(ns).items() if k not in skip}
        return cls(ns.command, values)


def _convert(action: argparse.Action, key: str, raw: str):
    if action.nargs == 0:  # store_true / store_false
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            flag = True
        elif low in ("0", "false", "no", "off"):
            flag = False
        else:
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return flag if action.const is True or action.const is None else not flag
    value = action.type(raw) if action.type is not None else raw
    if action.choices is not None and value not in action.choices:
        raise ConfigError(f"{key}: {value!r} not in {sorted(action.choices)}")
    return value


def apply_config(parser: argparse.ArgumentParser, raw: dict[str, str]) -> None:
    """Install file values as parser defaults, so explicit flags still take precedence."""
    actions = {a.dest: a for a in parser._actions if a.option_strings and a.dest not in ("help", "config")}
    unknown = sorted(set(raw) - set(actions))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    defaults = {}
    for key, text in raw.items():
        try:
            defaults[key] = _convert(actions[key], key, text)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: {exc}") from None
    parser.set_defaults(**defaults)
