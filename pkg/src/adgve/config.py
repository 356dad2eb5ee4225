"""Flat ``section.key = value`` configuration.

Lookup order: explicit ``--config`` path, then ``$ADGVE_CONFIG``, then the
built-in defaults below. Unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

DEFAULTS: dict[str, Any] = {
    "pipeline.num_clips": 8,
    "lane.simplify_eps": 2.0,
    "lane.nominal_width_m": 3.5,
    "lane.alpha": 1.0,
    "lane.w_center": 0.4,
    "lane.w_solid": 0.3,
    "lane.w_cross": 0.3,
    "lane.cross_approach_m": 5.25,
    "lane.yield_speed_mps": 1.0,
    "bins.speed_stationary": 0.5,
    "bins.speed_slow": 5.0,
    "bins.speed_moderate": 15.0,
    "bins.drift_none": 0.05,
    "bins.drift_slight": 0.2,
    "bins.jerk_mps2": 2.0,
    "bins.size_small": 0.005,
    "bins.size_medium": 0.03,
    "vlm.mode": "hash_stub",
    "vlm.endpoint": "",
    "vlm.transcript_path": "",
    "vlm.record_path": "",
    "vlm.seed": 0,
    "vlm.max_inflight": 4,
    "vlm.retries": 2,
    "vlm.backoff_s": 0.05,
    "vlm.timeout_s": 30.0,
    "vlm.max_rois": 3,
    "render.target_w": 448,
    "render.target_h": 448,
    "render.fade_window": 16,
    "render.roi_margin": 0.25,
    "fusion.lr": 0.01,
    "fusion.epochs": 2000,
    "fusion.rank_weight": 1.0,
    "fusion.pair_margin": 0.05,
    "fusion.holdout": 0.2,
    "fusion.seed": 0,
    "fusion.threshold": 0.2,
    "features.path": "",
}

# keys that only say where to write things
OUTPUT_KEYS = frozenset({"vlm.record_path"})


def _coerce(key: str, raw: str) -> Any:
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw.strip()


class Config(Mapping[str, Any]):
    """Immutable view over defaults plus overrides."""

    def __init__(self, overrides: Mapping[str, Any] | None = None):
        values = dict(DEFAULTS)
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, value) if isinstance(value, str) else value
        self._values = values

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(sorted(self._values))

    def __len__(self) -> int:
        return len(self._values)

    def with_values(self, values: Mapping[str, Any]) -> "Config":
        merged = dict(self._values)
        merged.update(values)
        return Config(merged)

    def dumps(self) -> str:
        return "".join(f"{k} = {self._values[k]}\n" for k in self)

    def checksum(self) -> str:
        """Digest of every setting that can change a score (output locations excluded)."""
        text = "".join(f"{k} = {self._values[k]}\n" for k in self if k not in OUTPUT_KEYS)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self._values.items() if k.startswith(prefix)}


def parse_config_text(text: str) -> Config:
    overrides: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        overrides[key] = value
    return Config(overrides)


def load_config(path: str | os.PathLike | None = None) -> Config:
    if path is None:
        path = os.environ.get("ADGVE_CONFIG") or None
    if path is None:
        return Config()
    return parse_config_text(Path(path).read_text(encoding="utf-8"))
