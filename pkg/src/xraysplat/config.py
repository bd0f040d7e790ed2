"""TOML run configuration.

A run file mirrors :class:`TrainConfig`: top-level ``[train]`` holds its
scalar fields, and each nested config has its own table::

    [train]
    iters = 3000
    sr_mode = "bicubic"

    [adaptive]
    grad_threshold = 0.016

    [paths]
    dataset = "ds/"
    out = "runs/a"

Tables: train, lr, adam, adaptive, loss, confidence, scene, dnaf, render,
paths.  Unknown tables or keys raise :class:`InvalidConfig`.
"""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

from .errors import InvalidConfig
from .trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

NESTED = ("lr", "adam", "adaptive", "loss", "confidence", "scene", "dnaf", "render")
PATH_KEYS = ("dataset", "out", "init_points")


def _coerce(name: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidConfig(f"{name}: expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfig(f"{name}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfig(f"{name}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InvalidConfig(f"{name}: expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise InvalidConfig(f"{name}: expected an array")
        return tuple(value)
    return value


def _fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


def _default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _build(cls, table: dict, prefix: str):
    known = _fields(cls)
    kwargs = {}
    for key, value in table.items():
        if key not in known:
            raise InvalidConfig(f"unknown key {prefix}.{key}")
        kwargs[key] = _coerce(f"{prefix}.{key}", _default(known[key]), value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidConfig(f"[{prefix}]: {exc}") from exc


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc


def build_config(tree: dict, overrides: dict | None = None) -> tuple[TrainConfig, dict]:
    """TrainConfig plus the ``[paths]`` table from a parsed run file.

    ``overrides`` maps dotted names (``"train.iters"``, ``"adaptive.window"``,
    ``"paths.out"``) to values and wins over the file.
    """
    tree = {k: dict(v) if isinstance(v, dict) else v for k, v in tree.items()}
    for dotted, value in (overrides or {}).items():
        table, _, key = dotted.partition(".")
        tree.setdefault(table, {})[key] = value
    allowed = {"train", "paths", *NESTED}
    for table, value in tree.items():
        if table not in allowed:
            raise InvalidConfig(f"unknown table [{table}]")
        if not isinstance(value, dict):
            raise InvalidConfig(f"[{table}] must be a table")
    paths = tree.get("paths", {})
    for key in paths:
        if key not in PATH_KEYS:
            raise InvalidConfig(f"unknown key paths.{key}")
    top = _fields(TrainConfig)
    kwargs = {}
    for name in NESTED:
        if name in tree:
            kwargs[name] = _build(type(_default(top[name])), tree[name], name)
    for key, value in tree.get("train", {}).items():
        if key not in top or key in NESTED:
            raise InvalidConfig(f"unknown key train.{key}")
        default = _default(top[key])
        kwargs[key] = value if default is None else _coerce(f"train.{key}", default, value)
    try:
        cfg = TrainConfig(**kwargs)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc
    return cfg, {k: Path(v) for k, v in paths.items()}


def load_config(path, overrides: dict | None = None) -> tuple[TrainConfig, dict]:
    return build_config(load_toml(path), overrides)
