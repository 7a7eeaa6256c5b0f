"""Synthetic road scenarios, trajectories and noisy per-frame detections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detection import FrameInput, MarkingType, Pose, RawDetection
from .geometry import OrientedRect, cumulative_length, interpolate_at, polyline_length

KINDS = ("straight", "curve", "merge", "split", "intersection")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "straight"
    lanes: int = 2
    lane_width: float = 3.5
    length: float = 200.0
    curvature: float = 0.01
    taper_length: float = 20.0
    seed: int = 0
    speed: float = 5.0
    rate: float = 10.0
    frames: int | None = None
    # distance from the road start at which the trajectory begins
    start_offset: float = 10.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScenarioError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        if self.lanes < 1:
            raise ScenarioError("need at least one lane")
        if not 2.5 <= self.lane_width <= 4.5:
            raise ScenarioError("lane_width must lie in [2.5, 4.5] m")
        if self.kind in ("merge", "split", "intersection") and self.length < 100.0:
            raise ScenarioError(f"{self.kind} scenarios need length >= 100 m")
        if self.kind == "curve" and not 0 < abs(self.curvature) <= 0.05:
            raise ScenarioError("curve scenarios need 0 < |curvature| <= 0.05")
        if self.speed <= 0 or self.rate <= 0 or self.taper_length <= 0:
            raise ScenarioError("speed, rate and taper_length must be positive")
        if self.frames is not None and self.frames < 1:
            raise ScenarioError("frames must be positive")

    @property
    def num_frames(self) -> int:
        if self.frames is not None:
            return self.frames
        travel = self.length - self.start_offset - 50.0
        return max(1, int(travel / (self.speed / self.rate)))

    @classmethod
    def from_dict(cls, values: dict) -> "ScenarioSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(values) - known)
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {', '.join(unknown)}")
        return cls(**values)


@dataclass(frozen=True)
class NoiseSpec:
    dropout: float = 0.0
    jitter: float = 0.0
    outlier_rate: float = 0.0
    confidence_a: float = 5.0
    confidence_b: float = 2.0
    lon_range: tuple[float, float] = (-10.0, 45.0)
    lat_range: tuple[float, float] = (-18.0, 18.0)
    # split visible lines into pieces no longer than this (None keeps them whole)
    fragment_length: float | None = None
    # extra independently perturbed copies of every visible line, as redundant network outputs
    duplicates: int = 0
    min_length: float = 1.0

    def __post_init__(self):
        for name in ("dropout", "outlier_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ScenarioError(f"{name} must lie in [0, 1]")
        if self.jitter < 0:
            raise ScenarioError("jitter must be non-negative")
        if self.confidence_a <= 0 or self.confidence_b <= 0:
            raise ScenarioError("confidence distribution parameters must be positive")
        if self.fragment_length is not None and self.fragment_length <= 0:
            raise ScenarioError("fragment_length must be positive")
        if self.duplicates < 0:
            raise ScenarioError("duplicates must be non-negative")

    @classmethod
    def from_dict(cls, values: dict) -> "NoiseSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(values) - known)
        if unknown:
            raise ScenarioError(f"unknown noise keys: {', '.join(unknown)}")
        v = dict(values)
        for k in ("lon_range", "lat_range"):
            if k in v:
                v[k] = tuple(v[k])
        return cls(**v)


@dataclass(frozen=True, eq=False)
class GTLine:
    id: int
    marking_type: MarkingType
    points: np.ndarray


@dataclass(eq=False)
class GroundTruth:
    lines: list[GTLine]
    lane_count: int = 0
    meta: dict = field(default_factory=dict)


@dataclass(eq=False)
class Scenario:
    spec: ScenarioSpec
    gt: GroundTruth
    poses: list[Pose]
    timestamps: list[float]


# -- road geometry ------------------------------------------------------------------


def _reference(spec: ScenarioSpec, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference path position (n, 2) and heading at arclengths ``s``."""
    s = np.asarray(s, dtype=float)
    if spec.kind == "curve":
        k = spec.curvature
        pos = np.column_stack([np.sin(k * s) / k, (1.0 - np.cos(k * s)) / k])
        return pos, k * s
    return np.column_stack([s, np.zeros_like(s)]), np.zeros_like(s)


def _taper(s: np.ndarray, start: float, length: float, d0: float, d1: float) -> np.ndarray:
    u = np.clip((s - start) / length, 0.0, 1.0)
    return d0 + (d1 - d0) * (1.0 - np.cos(np.pi * u)) / 2.0


def _offset_line(spec: ScenarioSpec, s0: float, s1: float, offset, step: float = 2.0) -> np.ndarray:
    n = max(1, int(np.ceil((s1 - s0) / step - 1e-9)))
    s = np.linspace(s0, s1, n + 1)
    pos, h = _reference(spec, s)
    d = offset(s) if callable(offset) else np.full_like(s, float(offset))
    normal = np.column_stack([-np.sin(h), np.cos(h)])
    xy = pos + d[:, None] * normal
    return np.column_stack([xy, np.zeros(len(s))])


def boundary_offsets(spec: ScenarioSpec) -> np.ndarray:
    """Lateral offsets of the nominal boundaries, left to right."""
    n, w = spec.lanes, spec.lane_width
    return np.array([(n / 2.0 - k) * w for k in range(n + 1)])


def ego_offset(spec: ScenarioSpec) -> float:
    d = boundary_offsets(spec)
    i = spec.lanes // 2
    return float((d[i] + d[i + 1]) / 2.0)


def build_scenario(spec: ScenarioSpec) -> Scenario:
    """Groundtruth lines plus a constant-speed trajectory along the ego lane centre."""
    L, T, w = spec.length, spec.taper_length, spec.lane_width
    d = boundary_offsets(spec)
    lines: list[tuple[MarkingType, np.ndarray]] = []

    def kind_of(k):
        return MarkingType.ROADEDGE if k in (0, len(d) - 1) else MarkingType.LANELINE

    lane_count = spec.lanes
    if spec.kind in ("straight", "curve"):
        for k, off in enumerate(d):
            lines.append((kind_of(k), _offset_line(spec, 0.0, L, off)))
    elif spec.kind == "split":
        s0 = 0.4 * L
        for k, off in enumerate(d[:-1]):
            lines.append((kind_of(k), _offset_line(spec, 0.0, L, off)))
        lines.append((MarkingType.ROADEDGE, _offset_line(spec, 0.0, L, lambda s: _taper(s, s0, T, d[-1], d[-1] - w))))
        lines.append((MarkingType.LANELINE, _offset_line(spec, s0 + T, L, d[-1])))
        lane_count = spec.lanes + 1
    elif spec.kind == "merge":
        s1 = 0.6 * L
        for k, off in enumerate(d[:-1]):
            lines.append((kind_of(k), _offset_line(spec, 0.0, L, off)))
        lines.append((MarkingType.LANELINE, _offset_line(spec, 0.0, s1, d[-1])))
        lines.append((MarkingType.ROADEDGE, _offset_line(spec, 0.0, L, lambda s: _taper(s, s1, T, d[-1] - w, d[-1]))))
        lane_count = spec.lanes + 1
    else:  # intersection
        g0, g1 = 0.5 * L - 10.0, 0.5 * L + 10.0
        for k, off in enumerate(d):
            lines.append((kind_of(k), _offset_line(spec, 0.0, g0, off)))
            lines.append((kind_of(k), _offset_line(spec, g1, L, off)))
        stop = g0 - 1.5
        lines.append((MarkingType.STOPLINE, np.array([[stop, d[0], 0.0], [stop, d[-1], 0.0]])))
        arm = 25.0
        for x in (g0, g1):
            for y0, y1 in ((d[0], d[0] + arm), (d[-1], d[-1] - arm)):
                ys = np.linspace(y0, y1, int(arm / 2.0) + 1)
                lines.append((MarkingType.ROADEDGE, np.column_stack([np.full_like(ys, x), ys, np.zeros_like(ys)])))

    gt = GroundTruth(
        [GTLine(i, t, p) for i, (t, p) in enumerate(lines)],
        lane_count=lane_count,
        meta={"kind": spec.kind, "lanes": spec.lanes, "lane_width": w, "length": L},
    )
    n = spec.num_frames
    s = spec.start_offset + np.arange(n) * spec.speed / spec.rate
    if s[-1] > L:
        raise ScenarioError("trajectory runs past the end of the road; shorten frames or lengthen the road")
    pos, h = _reference(spec, s)
    off = ego_offset(spec)
    xy = pos + off * np.column_stack([-np.sin(h), np.cos(h)])
    poses = [Pose.from_yaw(float(h[k]), (xy[k, 0], xy[k, 1], 0.0)) for k in range(n)]
    stamps = [k / spec.rate for k in range(n)]
    return Scenario(spec, gt, poses, stamps)


# -- rendering -------------------------------------------------------------------


def _fragments(line: np.ndarray, length: float) -> list[np.ndarray]:
    cum = cumulative_length(line)
    total = cum[-1]
    n = max(1, int(np.ceil(total / length - 1e-9)))
    cuts = np.linspace(0.0, total, n + 1)
    out = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        inner = cum[(cum > a + 1e-9) & (cum < b - 1e-9)]
        out.append(interpolate_at(line, np.concatenate([[a], inner, [b]]), cum))
    return out


def _zigzag(rng: np.random.Generator, noise: NoiseSpec) -> np.ndarray:
    start = np.array([rng.uniform(*noise.lon_range), rng.uniform(*noise.lat_range)])
    heading = rng.uniform(-np.pi, np.pi)
    pts = [start]
    sign = 1.0
    for _ in range(int(rng.integers(3, 6))):
        step = rng.uniform(1.0, 3.0)
        pts.append(pts[-1] + step * np.array([np.cos(heading), np.sin(heading)]))
        heading += sign * np.deg2rad(rng.uniform(60.0, 150.0))
        sign = -sign
    xy = np.array(pts)
    return np.column_stack([xy, np.zeros(len(xy))])


def frame_rng(seed: int, frame: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(frame)]))


def detection_rect(noise: NoiseSpec) -> OrientedRect:
    return OrientedRect.axis_aligned((noise.lon_range[0], noise.lat_range[0]), (noise.lon_range[1], noise.lat_range[1]))


def render_frame(gt: GroundTruth, pose: Pose, noise: NoiseSpec, rng: np.random.Generator, timestamp: float = 0.0) -> FrameInput:
    """Noisy body-frame detections of the groundtruth lines visible from ``pose``."""
    inv = pose.inverse()
    rect = detection_rect(noise)
    dets = []
    for line in gt.lines:
        body = inv.apply(line.points)
        for piece in [p for p in rect.clip(body, noise.min_length) for _ in range(1 + noise.duplicates)]:
            # jitter the visible line once so fragments of it stay continuous
            jittered = piece.copy()
            jittered[:, :2] += rng.normal(0.0, 1.0, size=(len(piece), 2)) * noise.jitter
            parts = _fragments(jittered, noise.fragment_length) if noise.fragment_length else [jittered]
            for part in parts:
                # fixed draw order keeps streams reproducible whatever the noise levels
                drop = rng.random() < noise.dropout
                conf = float(rng.beta(noise.confidence_a, noise.confidence_b))
                if drop:
                    continue
                det = RawDetection.from_points(part, conf, line.marking_type)
                if det is not None:
                    dets.append(det)
    if rng.random() < noise.outlier_rate:
        kind = MarkingType(int(rng.integers(0, 3)))
        conf = float(rng.beta(noise.confidence_a, noise.confidence_b))
        dets.append(RawDetection(_zigzag(rng, noise), conf, kind))
    return FrameInput(timestamp, pose, tuple(dets))


def render_stream(scenario: Scenario, noise: NoiseSpec, seed: int | None = None):
    """Yield every frame of the scenario; frame ``k`` uses the generator seeded by (seed, k)."""
    seed = scenario.spec.seed if seed is None else seed
    for k, (pose, ts) in enumerate(zip(scenario.poses, scenario.timestamps)):
        yield render_frame(scenario.gt, pose, noise, frame_rng(seed, k), ts)


def gt_length(gt: GroundTruth) -> float:
    return float(sum(polyline_length(l.points) for l in gt.lines))
