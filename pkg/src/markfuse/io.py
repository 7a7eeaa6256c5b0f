"""Line-delimited JSON records: frame streams, groundtruth maps, snapshots, metrics."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .detection import FrameInput, MarkingType, Pose, RawDetection
from .local_map import MapSnapshot
from .sim import GroundTruth, GTLine

log = logging.getLogger(__name__)

DIGITS = 6


class RecordError(ValueError):
    """A malformed input record; the message carries the file and line number."""


# adding 0.0 turns -0.0 into 0.0
def _pts(a) -> list:
    return (np.round(np.asarray(a, dtype=float), DIGITS) + 0.0).tolist()


def _num(x):
    return None if x is None else round(float(x), DIGITS) + 0.0


def dumps(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"), sort_keys=False, allow_nan=False)


def write_jsonl(path, records) -> int:
    n = 0
    with open(path, "w") as fh:
        for r in records:
            fh.write(dumps(r) + "\n")
            n += 1
    return n


def read_jsonl(path):
    """Yield ``(line_number, record)``; blank lines are skipped."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise RecordError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


# -- frames -------------------------------------------------------------------------


def frame_to_record(frame: FrameInput) -> dict:
    return {
        "timestamp": float(frame.timestamp),
        "pose": [_num(x) for x in frame.pose.flat()],
        "detections": [
            {"type": d.marking_type.label, "confidence": _num(d.confidence), "points": _pts(d.points)}
            for d in frame.detections
        ],
    }


def _points(raw, where: str) -> np.ndarray:
    try:
        pts = np.asarray(raw, dtype=float)
    except (TypeError, ValueError):
        raise RecordError(f"{where}: points must be numeric") from None
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise RecordError(f"{where}: points must be a list of [x, y, z]")
    if not np.isfinite(pts).all():
        raise RecordError(f"{where}: non-finite coordinate")
    return pts


def _type(raw, where: str) -> MarkingType:
    try:
        return MarkingType.parse(str(raw))
    except ValueError as exc:
        raise RecordError(f"{where}: {exc}") from None


def record_to_frame(rec: dict, where: str = "record") -> FrameInput:
    try:
        ts = float(rec["timestamp"])
        pose = Pose.from_flat(rec["pose"])
        raw = rec.get("detections", [])
    except KeyError as exc:
        raise RecordError(f"{where}: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise RecordError(f"{where}: {exc}") from None
    if not isinstance(raw, list):
        raise RecordError(f"{where}: detections must be a list")
    dets = []
    for k, d in enumerate(raw):
        w = f"{where}: detection {k}"
        if not isinstance(d, dict) or not {"type", "confidence", "points"} <= set(d):
            raise RecordError(f"{w}: needs type, confidence and points")
        try:
            conf = float(d["confidence"])
        except (TypeError, ValueError):
            raise RecordError(f"{w}: confidence must be a number") from None
        if not 0.0 <= conf <= 1.0:
            raise RecordError(f"{w}: confidence {conf} outside [0, 1]")
        det = RawDetection.from_points(_points(d["points"], w), conf, _type(d["type"], w))
        if det is not None:
            dets.append(det)
    return FrameInput(ts, pose, tuple(dets))


def write_frames(path, frames) -> int:
    return write_jsonl(path, (frame_to_record(f) for f in frames))


def read_frames(path):
    for lineno, rec in read_jsonl(path):
        yield record_to_frame(rec, f"{path}:{lineno}")


# -- groundtruth ------------------------------------------------------------------


def write_gt(path, gt: GroundTruth) -> int:
    return write_jsonl(path, ({"id": l.id, "type": l.marking_type.label, "points": _pts(l.points)} for l in gt.lines))


def read_gt(path) -> GroundTruth:
    lines = []
    for lineno, rec in read_jsonl(path):
        where = f"{path}:{lineno}"
        if not {"type", "points"} <= set(rec):
            raise RecordError(f"{where}: needs type and points")
        pts = _points(rec["points"], where)
        if len(pts) < 2:
            raise RecordError(f"{where}: a line needs at least 2 points")
        lines.append(GTLine(int(rec.get("id", len(lines))), _type(rec["type"], where), pts))
    return GroundTruth(lines)


# -- snapshots ------------------------------------------------------------------------


def snapshot_to_record(snap: MapSnapshot, origin: Pose, pose: Pose) -> dict:
    """Geometry stays in the run's reference frame; ``origin`` maps it to the input frame."""
    lay = snap.layout
    return {
        "frame": snap.frame_index,
        "timestamp": float(snap.timestamp),
        "origin": [_num(x) for x in origin.flat()],
        "pose": [_num(x) for x in pose.flat()],
        "instances": [{"id": i.id, "type": i.marking_type.label, "points": _pts(i.polyline)} for i in snap.instances],
        "boundaries": [
            {"id": b.id, "source": list(b.source), "kind": b.boundary_kind.label, "points": _pts(b.polyline)}
            for b in lay.boundaries
        ],
        "sections": [{"id": s.id, "boundaries": list(s.boundaries)} for s in lay.sections],
        "lanes": [
            {
                "id": l.id,
                "section": l.section,
                "left_boundary": l.left_boundary,
                "right_boundary": l.right_boundary,
                "valid_range": [_num(x) for x in l.valid_range],
                "centerline": _pts(l.centerline),
            }
            for l in lay.lanes
        ],
        "linkages": [{"predecessor": k.predecessor, "successor": k.successor, "cue": k.cue.value} for k in lay.linkages],
        "stats": {k: (int(v) if isinstance(v, (int, np.integer)) else v) for k, v in snap.stats.items()},
    }


def snapshot_lines_world(rec: dict, where: str = "snapshot") -> list[tuple[MarkingType, np.ndarray]]:
    """Typed instance polylines of a snapshot record, mapped into the input frame."""
    try:
        origin = Pose.from_flat(rec["origin"])
        items = rec["instances"]
    except (KeyError, TypeError, ValueError) as exc:
        raise RecordError(f"{where}: bad snapshot ({exc})") from None
    out = []
    for k, inst in enumerate(items):
        w = f"{where}: instance {k}"
        pts = _points(inst.get("points"), w)
        out.append((_type(inst.get("type"), w), origin.apply(pts)))
    return out
