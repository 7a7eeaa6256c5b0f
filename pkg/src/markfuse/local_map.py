"""Per-frame orchestration of the fusion pipeline inside a vehicle-centred window."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .detection import FrameInput, MarkingType, Pose, filter_detections, transform_to_reference
from .geometry import OrientedRect
from .instances import InstanceMap
from .layout import RoadLayout, build_layout
from .voxel_map import VoxelMap

log = logging.getLogger(__name__)

STAGES = ("filter", "transform", "integrate", "reliable", "cluster", "layout", "evict")


class FrameOrderError(ValueError):
    pass


@dataclass(frozen=True)
class MapWindow:
    """Output range in the body frame: lateral is +y (left), longitudinal is +x (forward)."""

    lateral: tuple[float, float] = (-15.0, 15.0)
    longitudinal: tuple[float, float] = (-5.0, 30.0)

    def __post_init__(self):
        if not (self.lateral[0] < self.lateral[1] and self.longitudinal[0] < self.longitudinal[1]):
            raise ValueError("window needs min < max on both axes")

    def in_frame(self, pose: Pose) -> OrientedRect:
        """The window as a rectangle in the frame that ``pose`` maps the body into."""
        c, s = np.cos(pose.yaw), np.sin(pose.yaw)
        axes = np.array([[c, s], [-s, c]])
        lo = (self.longitudinal[0], self.lateral[0])
        hi = (self.longitudinal[1], self.lateral[1])
        return OrientedRect(pose.translation[:2], axes, lo, hi)


@dataclass(frozen=True)
class SnapshotInstance:
    id: int
    marking_type: MarkingType
    polyline: np.ndarray


@dataclass(frozen=True, eq=False)
class MapSnapshot:
    timestamp: float
    frame_index: int
    instances: tuple[SnapshotInstance, ...]
    layout: RoadLayout
    stats: dict
    timings: dict = field(default_factory=dict)


class LocalMapper:
    """Stateful fusion engine; feed frames in timestamp order with ``process_frame``."""

    def __init__(self, config: RunConfig = RunConfig()):
        self.config = config
        self.window = MapWindow((config.lat_min, config.lat_max), (config.lon_min, config.lon_max))
        # voxels are kept over the wider detection range so evidence can build up before
        # a marking enters the output window
        self.retention = MapWindow(
            (config.retain_lat_min, config.retain_lat_max), (config.retain_lon_min, config.retain_lon_max)
        )
        self.voxels = VoxelMap(config.voxel_size, num_buckets=config.num_buckets)
        self.instances = InstanceMap(config.clustering(), config.fit())
        self.layout_params = config.layout()
        # reference frame g is the first frame's body frame
        self.origin: Pose | None = None
        self._origin_inv: Pose | None = None
        self.last_timestamp: float | None = None
        self.frame_index = -1

    def to_reference(self, pose: Pose) -> Pose:
        if self.origin is None:
            self.origin = pose
            self._origin_inv = pose.inverse()
        return self._origin_inv.compose(pose)

    def process_frame(self, frame: FrameInput) -> MapSnapshot:
        if self.last_timestamp is not None and not frame.timestamp > self.last_timestamp:
            raise FrameOrderError(f"timestamp {frame.timestamp} is not after {self.last_timestamp}")
        self.last_timestamp = frame.timestamp
        self.frame_index += 1
        cfg = self.config
        timings = {}
        clock = time.perf_counter
        t_frame = t = clock()

        dets = list(frame.detections)
        if cfg.filters_enabled:
            dets = filter_detections(dets, cfg.min_confidence, cfg.max_turn_angle)
        timings["filter"], t = clock() - t, clock()

        pose_g = self.to_reference(frame.pose)
        dets = transform_to_reference(dets, pose_g)
        timings["transform"], t = clock() - t, clock()

        touched = self.voxels.integrate_frame(dets)
        timings["integrate"], t = clock() - t, clock()

        fresh = self.voxels.extract_new_reliable(np.concatenate(touched) if touched else [], cfg.alpha_n)
        timings["reliable"], t = clock() - t, clock()

        self.instances.update(fresh, self.voxels)
        timings["cluster"], t = clock() - t, clock()

        # half a voxel of slack keeps markings that lie on the window edge, whose
        # voxel centres can fall just outside it
        rect = self.window.in_frame(pose_g).grown(cfg.voxel_size / 2)
        out = []
        for iid in sorted(self.instances.instances):
            inst = self.instances.instances[iid]
            if len(inst.polyline) < 2:
                continue
            for piece in rect.clip(inst.polyline):
                out.append(SnapshotInstance(iid, inst.marking_type, piece))
        layout = RoadLayout()
        if cfg.layout_enabled:
            heading = pose_g.rotation[:2, 0]
            layout = build_layout(out, self.layout_params, heading=heading)
        timings["layout"], t = clock() - t, clock()

        evicted = self.voxels.evict_outside(self.retention.in_frame(pose_g))
        if evicted:
            self.instances.prune(self.voxels)
        timings["evict"] = clock() - t
        total = clock() - t_frame

        stats = {
            "detections_in": len(frame.detections),
            "detections_kept": len(dets),
            "voxels": self.voxels.num_voxels,
            "reliable": self.voxels.num_reliable,
            "new_reliable": len(fresh),
            "max_count": self.voxels.max_count(),
            "instances": len(self.instances),
            "evicted": evicted,
        }
        ms = {k: timings[k] * 1e3 for k in STAGES}
        ms["total"] = total * 1e3
        return MapSnapshot(frame.timestamp, self.frame_index, tuple(out), layout, stats, ms)
