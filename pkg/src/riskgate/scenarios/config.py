"""Scenario configuration files: JSON with sections ``model``, ``noise``,
``barriers``, ``cascade``, ``nominal`` and ``mc``, plus dotted-key overrides."""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

SECTIONS = ("scenario", "model", "noise", "barriers", "cascade", "nominal", "mc")
BUNDLED = ("robot_scbf.cfg", "robot_racbf.cfg", "merge.cfg", "merge_rho12.cfg", "wiener.cfg")


class ConfigError(ValueError):
    """Malformed configuration or a failed build-time check."""


def bundled_path(name: str) -> Path:
    """Path of a config shipped with the package (``.cfg`` suffix optional)."""
    if not name.endswith(".cfg"):
        name += ".cfg"
    ref = resources.files("riskgate.scenarios") / "configs" / name
    if not ref.is_file():
        raise ConfigError(f"no bundled config named {name!r}; have {', '.join(BUNDLED)}")
    return Path(str(ref))


def load_config(source: str | Path | dict) -> dict:
    """Read a config from a dict, a file path, or a bundled config name."""
    if isinstance(source, dict):
        cfg = copy.deepcopy(source)
    else:
        path = Path(source)
        if not path.exists():
            path = bundled_path(str(source))
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    validate_schema(cfg)
    return cfg


def validate_schema(cfg: Any) -> None:
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for key in ("scenario", "model", "barriers", "mc"):
        if key not in cfg:
            raise ConfigError(f"config is missing the {key!r} section")
    if not isinstance(cfg["barriers"], list) or not cfg["barriers"]:
        raise ConfigError("'barriers' must be a nonempty list")
    for i, b in enumerate(cfg["barriers"]):
        if not isinstance(b, dict) or "kind" not in b:
            raise ConfigError(f"barriers[{i}] needs a 'kind'")
    mc = cfg["mc"]
    for key in ("N", "T", "dt", "base_seed"):
        if key not in mc:
            raise ConfigError(f"mc section is missing {key!r}")
    if int(mc["N"]) < 1:
        raise ConfigError("mc.N must be at least 1")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: Iterable[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; list items are addressed by index.

    Keys must already exist in the config, so typos fail instead of being
    silently ignored. Values are parsed as JSON when possible.
    """
    out = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for depth, part in enumerate(parts):
            last = depth == len(parts) - 1
            if isinstance(node, list):
                try:
                    idx = int(part)
                    node[idx]
                except (ValueError, IndexError):
                    raise ConfigError(f"unknown override key {key!r}") from None
                if last:
                    node[idx] = _parse_value(raw)
                else:
                    node = node[idx]
            elif isinstance(node, dict):
                if part not in node:
                    raise ConfigError(f"unknown override key {key!r}")
                if last:
                    node[part] = _parse_value(raw)
                else:
                    node = node[part]
            else:
                raise ConfigError(f"unknown override key {key!r}")
    validate_schema(out)
    return out


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
