"""Flat dotted-key configuration shared by every stage of the pipeline.

A config file is TOML; nested tables are flattened, so ``[sa.ppht]``
with ``threshold = 30`` and a top-level ``"sa.ppht.threshold" = 30`` are
the same key.
"""
from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError

DEFAULTS: dict[str, Any] = {
    # raster primitives
    "rotate.interp": "bilinear",
    "threshold.window": 31,
    "threshold.offset": 10.0,
    "canny.sigma": 1.4,
    "canny.low": 50.0,
    "canny.high": 150.0,
    "morph.kernel": 3,
    "morph.dilate_iter": 2,
    # preprocess
    "crop.side": 900,
    "hough.r_min_frac": 0.3,
    "hough.r_max_frac": 0.48,
    "hough.min_score": 0.25,
    "roi.shrink": 0.05,
    "roi.share_circle": True,
    # particle amount analysis
    "paa.window": 31,
    "paa.offset": 10.0,
    "paa.edge_margin": 3,
    "paa.invert": False,
    # superposition analysis
    "sa.window": 31,
    "sa.offset": 25.0,
    "sa.ppht.threshold": 30,
    "sa.ppht.min_len": 20,
    "sa.ppht.max_gap": 5,
    "sa.line_thickness": 3,
    "sa.seed": 0,
    "sa.grid.pitch": 40,
    "sa.grid.thickness": 3,
    # classifier
    "svm.C": 1.0,
    "svm.epochs": 200,
    "svm.seed": 42,
    # orchestration
    "protocol.timeout": 10.0,
    "protocol.max_payload": 32 * 1024 * 1024,
}


def _flatten(tree: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in tree.items():
        full = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(_flatten(value, full + "."))
        else:
            out[full] = value
    return out


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from None
    return str(value)


class Config(Mapping):
    """Immutable, validated mapping of config keys to values."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        merged = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            merged[key] = _coerce(key, value)
        self._values = merged

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        with open(path, "rb") as fh:
            try:
                tree = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        return cls(_flatten(tree))

    def with_items(self, items: Mapping[str, Any]) -> "Config":
        """Copy with ``items`` overriding the current values."""
        values = {k: v for k, v in self._values.items() if v != DEFAULTS[k]}
        values.update(items)
        return Config(values)

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def __repr__(self) -> str:
        changed = {k: v for k, v in self._values.items() if v != DEFAULTS[k]}
        return f"Config({changed})"

    def canonical_json(self) -> str:
        return json.dumps(self._values, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        """Short stable digest of the effective configuration."""
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


DEFAULT_CONFIG = Config()
