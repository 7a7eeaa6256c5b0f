"""Whole-stream helpers: fuse a frame stream, score snapshots or raw detections."""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .detection import Pose, filter_detections
from .evaluation import MatchConfig, MetricsReport, evaluate_frame
from .io import RecordError, snapshot_lines_world, snapshot_to_record
from .local_map import STAGES, LocalMapper, MapWindow


def match_config(cfg: RunConfig) -> MatchConfig:
    return MatchConfig(cfg.sample_interval, cfg.match_radius, cfg.tp_fraction)


def window_of(cfg: RunConfig) -> MapWindow:
    return MapWindow((cfg.lat_min, cfg.lat_max), (cfg.lon_min, cfg.lon_max))


def run_stream(frames, cfg: RunConfig = RunConfig()):
    """Yield ``(snapshot, record)`` for every frame, in order."""
    mapper = LocalMapper(cfg)
    for frame in frames:
        snap = mapper.process_frame(frame)
        yield snap, snapshot_to_record(snap, mapper.origin, frame.pose)


def _frame_row(k: int, timestamp: float, rep: MetricsReport) -> dict:
    row = {"frame": k, "timestamp": timestamp}
    row.update(rep.total.metrics())
    return row


def evaluate_records(records, gt, cfg: RunConfig = RunConfig(), warmup: int = 0):
    """Score snapshot records against groundtruth; returns ``(report, per_frame_rows)``.

    Frames before ``warmup`` are skipped.
    """
    mc = match_config(cfg)
    win = window_of(cfg)
    gt_lines = [(l.marking_type, l.points) for l in gt.lines]
    total = MetricsReport()
    rows = []
    for k, rec in enumerate(records):
        if k < warmup:
            continue
        where = f"snapshot {rec.get('frame', k)}"
        try:
            pose = Pose.from_flat(rec["pose"])
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordError(f"{where}: bad pose ({exc})") from None
        rep = evaluate_frame(snapshot_lines_world(rec, where), gt_lines, win.in_frame(pose), mc, cfg.min_eval_length)
        total.add(rep)
        rows.append(_frame_row(k, float(rec.get("timestamp", k)), rep))
    return total, rows


def raw_lines(frame, cfg: RunConfig):
    dets = list(frame.detections)
    if cfg.filters_enabled:
        dets = filter_detections(dets, cfg.min_confidence, cfg.max_turn_angle)
    return [(d.marking_type, frame.pose.apply(d.points)) for d in dets]


def evaluate_raw(frames, gt, cfg: RunConfig = RunConfig(), warmup: int = 0):
    """Score each frame's own detections (after the same preprocessing) as a single-frame baseline."""
    mc = match_config(cfg)
    win = window_of(cfg)
    gt_lines = [(l.marking_type, l.points) for l in gt.lines]
    total = MetricsReport()
    rows = []
    for k, frame in enumerate(frames):
        if k < warmup:
            continue
        rep = evaluate_frame(raw_lines(frame, cfg), gt_lines, win.in_frame(frame.pose), mc, cfg.min_eval_length)
        total.add(rep)
        rows.append(_frame_row(k, frame.timestamp, rep))
    return total, rows


def timing_summary(timings: list[dict]) -> dict:
    """Mean, median and 99th percentile per stage, in milliseconds rounded to 2 decimals."""
    out = {}
    for stage in STAGES + ("total",):
        v = np.array([t[stage] for t in timings]) if timings else np.zeros(1)
        out[stage] = {
            "mean": round(float(v.mean()), 2),
            "p50": round(float(np.percentile(v, 50)), 2),
            "p99": round(float(np.percentile(v, 99)), 2),
        }
    return out
