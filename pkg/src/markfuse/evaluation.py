"""Instance-level precision/recall/F1 and point-level average Chamfer distance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .detection import MarkingType
from .geometry import OrientedRect, polyline_length, resample


@dataclass(frozen=True)
class MatchConfig:
    sample_interval: float = 0.1
    match_radius: float = 0.5
    tp_fraction: float = 0.75

    def __post_init__(self):
        if self.sample_interval <= 0 or self.match_radius <= 0:
            raise ValueError("sample_interval and match_radius must be positive")
        if not 0 < self.tp_fraction <= 1:
            raise ValueError("tp_fraction must lie in (0, 1]")


def sample_polyline(line: np.ndarray, interval: float) -> np.ndarray:
    """Points at arclength 0, interval, 2*interval, ... plus the final endpoint."""
    if interval <= 0:
        raise ValueError("interval must be positive")
    line = np.asarray(line, dtype=float)
    if len(line) < 2:
        return line.copy()
    return resample(line, interval)


@dataclass(frozen=True)
class LineMatch:
    fraction: float
    chamfer: float
    matched: int


def line_match(pred_samples: np.ndarray, gt_samples: np.ndarray, radius: float, tree: cKDTree | None = None) -> LineMatch:
    """Score one prediction against one groundtruth line.

    Each prediction sample is matched when its nearest groundtruth sample
    is closer than ``radius``.  The fraction is relative to the number of
    groundtruth samples; the Chamfer distance averages the matched distances.
    """
    if tree is None:
        tree = cKDTree(gt_samples)
    d, _ = tree.query(pred_samples, k=1, distance_upper_bound=radius)
    ok = d < radius
    n = int(ok.sum())
    cd = float(d[ok].mean()) if n else float("nan")
    return LineMatch(n / len(gt_samples), cd, n)


@dataclass
class TypeCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    cd_sum: float = 0.0

    def add(self, other: "TypeCounts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.cd_sum += other.cd_sum

    def metrics(self) -> dict:
        p = 100.0 * self.tp / (self.tp + self.fp) if self.tp + self.fp else None
        r = 100.0 * self.tp / (self.tp + self.fn) if self.tp + self.fn else None
        if p is None and r is None:
            f1 = None
        else:
            pp, rr = p or 0.0, r or 0.0
            f1 = 2 * pp * rr / (pp + rr) if pp + rr > 0 else 0.0
        acd = self.cd_sum / self.tp if self.tp else None
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": p, "recall": r, "f1": f1, "acd": acd}


@dataclass
class MetricsReport:
    per_type: dict[MarkingType, TypeCounts] = field(default_factory=lambda: {t: TypeCounts() for t in MarkingType})
    # (type, prediction index, gt index, chamfer) for every true positive
    pairs: list[tuple[MarkingType, int, int, float]] = field(default_factory=list)

    def add(self, other: "MetricsReport") -> None:
        for t in MarkingType:
            self.per_type[t].add(other.per_type[t])

    @property
    def total(self) -> TypeCounts:
        out = TypeCounts()
        for c in self.per_type.values():
            out.add(c)
        return out

    def to_dict(self) -> dict:
        out = {t.label: self.per_type[t].metrics() for t in MarkingType}
        out["total"] = self.total.metrics()
        return out


def assign(fractions: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """One-to-one prediction/groundtruth pairs maximising the number above ``threshold``.

    Among maximum-cardinality assignments the one with the largest summed
    fraction is taken.
    """
    ok = fractions > threshold
    if not ok.any():
        return []
    w = np.where(ok, fractions, 0.0)
    big = 1.0 + w.sum()
    rows, cols = linear_sum_assignment(np.where(ok, big + w, 0.0), maximize=True)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if ok[i, j]]


def _ground(points) -> np.ndarray:
    return np.asarray(points, dtype=float)[:, :2]


def match_and_score(pred, gt, cfg: MatchConfig = MatchConfig(), optional=None) -> MetricsReport:
    """Score typed prediction lines against typed groundtruth lines.

    ``pred`` and ``gt`` are sequences of ``(marking_type, points)``.
    Matching is done separately per type; every groundtruth line can be
    claimed by at most one prediction.  Predictions flagged in ``optional``
    may match but are not false positives when they do not.
    """
    optional = [False] * len(pred) if optional is None else [bool(o) for o in optional]
    report = MetricsReport()
    for t in MarkingType:
        pi = [k for k, (mt, _) in enumerate(pred) if MarkingType(mt) == t]
        gi = [k for k, (mt, _) in enumerate(gt) if MarkingType(mt) == t]
        counts = report.per_type[t]
        required = sum(not optional[k] for k in pi)
        if not pi or not gi:
            counts.fp += required
            counts.fn += len(gi)
            continue
        # scored in the ground plane; height carries voxel quantization, not map content
        ps = [sample_polyline(_ground(pred[k][1]), cfg.sample_interval) for k in pi]
        gs = [sample_polyline(_ground(gt[k][1]), cfg.sample_interval) for k in gi]
        frac = np.zeros((len(pi), len(gi)))
        cd = np.full((len(pi), len(gi)), np.nan)
        for j, g in enumerate(gs):
            tree = cKDTree(g)
            lo, hi = g.min(axis=0) - cfg.match_radius, g.max(axis=0) + cfg.match_radius
            for i, p in enumerate(ps):
                # cheap rejection when the bounding boxes are too far apart
                if np.any(p.max(axis=0) < lo) or np.any(p.min(axis=0) > hi):
                    continue
                m = line_match(p, g, cfg.match_radius, tree)
                frac[i, j] = m.fraction
                cd[i, j] = m.chamfer
        pairs = assign(frac, cfg.tp_fraction)
        counts.tp += len(pairs)
        counts.fp += required - sum(not optional[pi[i]] for i, _ in pairs)
        counts.fn += len(gi) - len(pairs)
        for i, j in pairs:
            counts.cd_sum += float(cd[i, j])
            report.pairs.append((t, pi[i], gi[j], float(cd[i, j])))
    return report


def clip_lines(lines, rect: OrientedRect, min_length: float):
    """Clip typed lines to ``rect`` keeping pieces longer than ``min_length``."""
    out = []
    for mt, pts in lines:
        pts = np.asarray(pts, dtype=float)
        if len(pts) < 2:
            continue
        for piece in rect.clip(pts):
            if polyline_length(piece) >= min_length:
                out.append((MarkingType(mt), piece))
    return out


def evaluate_frame(pred, gt, rect: OrientedRect, cfg: MatchConfig = MatchConfig(), min_length: float = 1.0) -> MetricsReport:
    """Score one frame inside its window.

    Groundtruth pieces shorter than ``min_length`` are dropped.  Predictions
    are clipped to the window grown by the match radius and kept at any
    length, so a line sitting on the edge can still match; one with less
    than ``min_length`` inside the window proper is not a false positive
    when it stays unmatched.
    """
    pred = clip_lines(pred, rect.grown(cfg.match_radius), 1e-9)
    optional = [sum(polyline_length(p) for p in rect.clip(pts)) < min_length for _, pts in pred]
    return match_and_score(pred, clip_lines(gt, rect, min_length), cfg, optional)
