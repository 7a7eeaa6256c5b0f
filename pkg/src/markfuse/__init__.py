"""Online temporal fusion of per-frame road marking detections into a vectorized local map."""

from .config import ConfigError, RunConfig
from .detection import FrameInput, MarkingType, Pose, RawDetection
from .evaluation import MatchConfig, MetricsReport, match_and_score
from .instances import ClusteringParams, InstanceMap, MarkingInstance, PolylineFitParams, estimate_polyline
from .layout import LayoutParams, LinkageCue, RoadLayout, build_layout
from .local_map import LocalMapper, MapSnapshot, MapWindow
from .sim import NoiseSpec, ScenarioSpec, build_scenario, render_frame, render_stream
from .voxel_map import CoObservationTable, VoxelKey, VoxelMap

__version__ = "0.1.0"

__all__ = [
    "ClusteringParams",
    "CoObservationTable",
    "ConfigError",
    "FrameInput",
    "InstanceMap",
    "LayoutParams",
    "LinkageCue",
    "LocalMapper",
    "MapSnapshot",
    "MapWindow",
    "MarkingInstance",
    "MarkingType",
    "MatchConfig",
    "MetricsReport",
    "NoiseSpec",
    "Pose",
    "PolylineFitParams",
    "RawDetection",
    "RoadLayout",
    "RunConfig",
    "ScenarioSpec",
    "VoxelKey",
    "VoxelMap",
    "build_layout",
    "build_scenario",
    "estimate_polyline",
    "match_and_score",
    "render_frame",
    "render_stream",
]
