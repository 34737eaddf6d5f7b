"""Run configuration: named profiles, user overrides, environment overrides.

Every key must already exist in the chosen profile, so a typo in a config
file or environment variable is an error rather than a silent no-op.
Environment variables ``LIGHTAUG__SECTION__KEY=value`` override any key;
values are parsed as YAML scalars.
"""
from __future__ import annotations

import copy
import os
from importlib import resources
from pathlib import Path

import yaml

ENV_PREFIX = "LIGHTAUG__"
PROFILES = ("desk", "full")


class ConfigError(ValueError):
    pass


def load_profile(name: str) -> dict:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")
    text = resources.files("lightaug.profiles").joinpath(f"{name}.yaml").read_text()
    return yaml.safe_load(text)


def merge(base: dict, override: dict, where: str = "") -> dict:
    """Deep-merge ``override`` into a copy of ``base``; unknown keys raise."""
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        path = f"{where}.{key}" if where else key
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} expects a mapping")
            out[key] = merge(out[key], value, path)
        else:
            out[key] = value
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    tree: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX):].split("__") if k]
        if not keys:
            continue
        node = tree
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = yaml.safe_load(raw)
    return tree


def build_config(profile: str = "desk", config_path=None, cli: dict | None = None,
                 environ=None) -> dict:
    """Profile defaults <- config file <- environment <- command-line flags."""
    cfg = load_profile(profile)
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        user = yaml.safe_load(path.read_text()) or {}
        if user.get("profile", profile) != profile:
            cfg = load_profile(user["profile"])
        cfg = merge(cfg, user)
    cfg = merge(cfg, env_overrides(environ))
    cfg = merge(cfg, {k: v for k, v in (cli or {}).items() if v is not None})
    return cfg


def resolve_path(cfg: dict, key: str, default) -> Path:
    """``cfg['paths'][key]`` if set, else ``default`` (relative to ``cfg['out']``)."""
    value = cfg["paths"].get(key)
    if value is None:
        return Path(cfg["out"]) / default
    return Path(value)


def require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)
