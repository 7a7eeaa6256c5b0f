"""Per-frame detection types, rejection filters and the body-to-reference transform."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import dedupe_consecutive, turn_angles

log = logging.getLogger(__name__)


class MarkingType(enum.IntEnum):
    # order doubles as the tie-break order for equal counters
    LANELINE = 0
    ROADEDGE = 1
    STOPLINE = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str) -> "MarkingType":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown marking type {name!r}") from None


@dataclass(frozen=True, eq=False)
class RawDetection:
    points: np.ndarray
    confidence: float
    marking_type: MarkingType

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"detection points must be (n, 3), got {pts.shape}")
        if len(pts) < 2:
            raise ValueError("detection needs at least 2 points")
        if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) <= 1e-6):
            raise ValueError("detection has coincident consecutive points")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "marking_type", MarkingType(self.marking_type))

    @classmethod
    def _trusted(cls, points: np.ndarray, confidence: float, marking_type: "MarkingType") -> "RawDetection":
        # skips validation; only for geometry derived from an already valid detection
        obj = object.__new__(cls)
        points.setflags(write=False)
        object.__setattr__(obj, "points", points)
        object.__setattr__(obj, "confidence", confidence)
        object.__setattr__(obj, "marking_type", marking_type)
        return obj

    @classmethod
    def from_points(cls, points, confidence: float, marking_type) -> "RawDetection | None":
        """Build a detection from raw points, dropping coincident vertices.

        Returns None (with a warning) when fewer than two distinct points remain.
        """
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 2 and pts.shape[1] == 2:
            pts = np.column_stack([pts, np.zeros(len(pts))])
        pts = dedupe_consecutive(pts)
        if len(pts) < 2:
            log.warning("dropping detection with fewer than 2 distinct points")
            return None
        return cls(pts, float(confidence), MarkingType(marking_type))


@dataclass(frozen=True, eq=False)
class Pose:
    """Body-to-reference rigid transform ``p_ref = R @ p_body + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        # loose enough for rotations written with six decimals
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-5) or abs(np.linalg.det(R) - 1.0) > 1e-5:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, np.asarray(translation, dtype=float))

    @classmethod
    def from_flat(cls, values) -> "Pose":
        v = np.asarray(values, dtype=float)
        if v.shape != (12,):
            raise ValueError(f"pose needs 12 values, got {v.size}")
        return cls(v[:9].reshape(3, 3), v[9:])

    def flat(self) -> list[float]:
        return [float(x) for x in self.rotation.ravel()] + [float(x) for x in self.translation]

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


@dataclass(frozen=True, eq=False)
class FrameInput:
    timestamp: float
    pose: Pose
    detections: tuple[RawDetection, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))


def is_zigzag(points: np.ndarray, max_turn_angle: float) -> bool:
    return bool(np.any(turn_angles(points) > max_turn_angle))


def filter_detections(
    detections,
    min_confidence: float = 0.3,
    max_turn_angle: float = np.deg2rad(45.0),
) -> list[RawDetection]:
    """Keep detections that are confident enough and free of sharp turns.

    A detection survives when ``confidence >= min_confidence`` and every
    interior turn angle is at most ``max_turn_angle``.  Input order is kept.
    """
    if not 0.0 < max_turn_angle < np.pi:
        raise ValueError("max_turn_angle must lie in (0, pi)")
    detections = list(detections)
    if not detections:
        return []
    sharp = _max_turn_angles(detections) > max_turn_angle
    return [d for d, bad in zip(detections, sharp) if d.confidence >= min_confidence and not bad]


def _max_turn_angles(detections) -> np.ndarray:
    """Largest interior turn angle of each detection, computed in one batch."""
    sizes = np.array([len(d.points) for d in detections])
    pts = np.concatenate([d.points for d in detections])
    owner = np.repeat(np.arange(len(detections)), sizes)
    seg = np.diff(pts, axis=0)
    seg_owner = owner[1:]
    same_seg = owner[:-1] == owner[1:]
    a, b = seg[:-1], seg[1:]
    # consecutive segments of one detection
    same = same_seg[:-1] & same_seg[1:]
    cos = np.einsum("ij,ij->i", a, b) / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-300)
    ang = np.where(same, np.arccos(np.clip(cos, -1.0, 1.0)), 0.0)
    out = np.zeros(len(detections))
    np.maximum.at(out, seg_owner[1:], ang)
    return out


def transform_to_reference(detections, pose: Pose) -> list[RawDetection]:
    detections = list(detections)
    if not detections:
        return []
    pts = pose.apply(np.concatenate([d.points for d in detections]))
    parts = np.split(pts, np.cumsum([len(d.points) for d in detections])[:-1])
    return [RawDetection._trusted(p, d.confidence, d.marking_type) for p, d in zip(parts, detections)]
