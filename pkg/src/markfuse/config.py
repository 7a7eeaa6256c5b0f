"""Run configuration: one flat record of every tunable, validated on load."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .instances import ClusteringParams, PolylineFitParams
from .layout import LayoutParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # preprocessing
    voxel_size: float = 0.2
    min_confidence: float = 0.3
    max_turn_angle_deg: float = 45.0
    filters_enabled: bool = True
    # fusion and clustering
    alpha_n: int = 10
    beta_p: float = 0.6
    beta_n: int = 3
    beta_r: float = 0.7
    clustering_mode: str = "co_observation"
    num_buckets: int = 64
    # polyline fitting
    eigen_ratio: float = 0.1
    straight_segment_length: float = 5.0
    quadrant_segment_length: float = 2.0
    # output window, body frame
    lat_min: float = -15.0
    lat_max: float = 15.0
    lon_min: float = -5.0
    lon_max: float = 30.0
    # retention range for the voxel map, body frame; matches the detection range
    retain_lat_min: float = -18.0
    retain_lat_max: float = 18.0
    retain_lon_min: float = -10.0
    retain_lon_max: float = 45.0
    layout_enabled: bool = True
    # layout
    lane_width_min: float = 2.5
    lane_width_max: float = 4.5
    width_variation_max: float = 0.8
    min_lane_length: float = 5.0
    endpoint_dist_max: float = 3.0
    endpoint_angle_max_deg: float = 30.0
    section_angle_max_deg: float = 45.0
    linkage_gap_max: float = 3.0
    linkage_angle_max_deg: float = 30.0
    shared_gap_max: float = 20.0
    # evaluation
    sample_interval: float = 0.1
    match_radius: float = 0.5
    tp_fraction: float = 0.75
    min_eval_length: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "bool" and not isinstance(v, bool):
                raise ConfigError(f"{f.name} must be a boolean")
            if f.type == "int" and (isinstance(v, bool) or not isinstance(v, (int, np.integer))):
                raise ConfigError(f"{f.name} must be an integer")
            if f.type == "float" and (isinstance(v, bool) or not isinstance(v, (int, float))):
                raise ConfigError(f"{f.name} must be a number")
            if f.type == "float" and not np.isfinite(v):
                raise ConfigError(f"{f.name} must be finite")
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if not 0.0 <= self.min_confidence <= 1.0:
            raise ConfigError("min_confidence must lie in [0, 1]")
        if not 0.0 < self.max_turn_angle_deg < 180.0:
            raise ConfigError("max_turn_angle_deg must lie in (0, 180)")
        if self.alpha_n < 0 or self.beta_n < 0:
            raise ConfigError("alpha_n and beta_n must be non-negative")
        if self.num_buckets < 1:
            raise ConfigError("num_buckets must be at least 1")
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ConfigError("window needs min < max on both axes")
        if not (
            self.retain_lat_min <= self.lat_min
            and self.retain_lat_max >= self.lat_max
            and self.retain_lon_min <= self.lon_min
            and self.retain_lon_max >= self.lon_max
        ):
            raise ConfigError("retention range must contain the output window")
        if not 0 < self.tp_fraction <= 1 or self.sample_interval <= 0 or self.match_radius <= 0:
            raise ConfigError("evaluation parameters must be positive with tp_fraction <= 1")
        if self.min_eval_length < 0:
            raise ConfigError("min_eval_length must be non-negative")
        try:
            self.clustering()
            self.fit()
            self.layout()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- derived parameter groups -------------------------------------------
    def clustering(self) -> ClusteringParams:
        return ClusteringParams(self.beta_p, self.beta_n, self.beta_r, self.clustering_mode)

    def fit(self) -> PolylineFitParams:
        return PolylineFitParams(self.eigen_ratio, self.straight_segment_length, self.quadrant_segment_length)

    def layout(self) -> LayoutParams:
        return LayoutParams(
            width_min=self.lane_width_min,
            width_max=self.lane_width_max,
            width_variation_max=self.width_variation_max,
            min_lane_length=self.min_lane_length,
            endpoint_dist_max=self.endpoint_dist_max,
            endpoint_angle_max=float(np.deg2rad(self.endpoint_angle_max_deg)),
            section_angle_max=float(np.deg2rad(self.section_angle_max_deg)),
            linkage_gap_max=self.linkage_gap_max,
            linkage_angle_max=float(np.deg2rad(self.linkage_angle_max_deg)),
            shared_gap_max=self.shared_gap_max,
        )

    @property
    def max_turn_angle(self) -> float:
        return float(np.deg2rad(self.max_turn_angle_deg))

    @property
    def window(self) -> tuple[float, float, float, float]:
        return (self.lat_min, self.lat_max, self.lon_min, self.lon_max)

    # -- loading ---------------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def updated(self, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        coerced = {}
        for k, v in values.items():
            # ints are accepted where floats are expected
            if known[k].type == "float" and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            coerced[k] = v
        return replace(self, **coerced)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        return cls().updated(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def parse_override(text: str, base: RunConfig) -> dict:
    """``key=value`` with the value parsed according to the field's type."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    kinds = {f.name: f.type for f in fields(base)}
    if key not in kinds:
        raise ConfigError(f"unknown config key {key!r}")
    kind = kinds[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            value = low in ("true", "1", "yes")
        elif kind == "int":
            value = int(raw)
        elif kind == "float":
            value = float(raw)
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return {key: value}


def parse_window(text: str) -> dict:
    parts = text.split(",")
    if len(parts) != 4:
        raise ConfigError("window must be lat_min,lat_max,lon_min,lon_max")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"bad window {text!r}") from None
    return dict(zip(("lat_min", "lat_max", "lon_min", "lon_max"), vals))
