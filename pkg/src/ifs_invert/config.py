"""Run configuration files.

Config files are ``key = value`` lines under ``[run]`` and ``[loss]`` sections,
whose keys mirror :class:`RunConfig` and :class:`LossWeights`. The resolved
snapshot written next to every run (``run.toml``) uses the same layout, so it
can be fed back with ``--config`` to repeat the run.
"""

from __future__ import annotations

import configparser
import dataclasses
from typing import Any

from .objective import LossWeights
from .optimizer import RunConfig


class ConfigError(ValueError):
    pass


def _coerce(raw: str, default: Any, key: str):
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    return raw


_SECTIONS = {"run": RunConfig, "loss": LossWeights}


def _defaults(cls) -> dict:
    return {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}


def parse_config(text: str) -> tuple[dict, dict]:
    """Overrides for ``RunConfig`` and ``LossWeights`` from config text.

    Keys may sit under ``[run]`` / ``[loss]`` or be dotted (``loss.mse = 5``);
    lines before any section header belong to ``[run]``.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case
    body = [ln.strip() for ln in text.splitlines() if ln.strip() and ln.strip()[0] not in "#;"]
    if body and not body[0].startswith("["):
        text = "[run]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(parser.sections()) - {"run", "loss", "meta"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    out = {"run": {}, "loss": {}}
    for section in ("run", "loss"):
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            target, name = section, key
            if "." in key:
                target, name = key.split(".", 1)
                if target not in _SECTIONS:
                    raise ConfigError(f"unknown key {key!r}")
            defaults = _defaults(_SECTIONS[target])
            if name not in defaults:
                raise ConfigError(f"unknown key {name!r} in [{target}]")
            out[target][name] = _coerce(raw, defaults[name], f"{target}.{name}")
    return out["run"], out["loss"]


def load_config(path) -> tuple[dict, dict]:
    with open(path) as fh:
        return parse_config(fh.read())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_snapshot(cfg: RunConfig, weights: LossWeights, meta: dict | None = None) -> str:
    lines = ["[run]"]
    lines += [f"{f.name} = {_fmt(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    lines += ["", "[loss]"]
    lines += [f"{f.name} = {_fmt(getattr(weights, f.name))}" for f in dataclasses.fields(weights)]
    if meta:
        lines += ["", "[meta]"]
        lines += [f"{k} = {_fmt(v)}" for k, v in sorted(meta.items())]
    return "\n".join(lines) + "\n"
