"""Lane boundaries, road sections, lanes and lane linkages from marking instances."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .detection import MarkingType
from .geometry import (
    angle_between,
    cumulative_length,
    end_direction,
    interpolate_at,
    polyline_length,
    project_to_polyline,
    resample,
    unit,
)


@dataclass(frozen=True)
class LayoutParams:
    width_min: float = 2.5
    width_max: float = 4.5
    width_variation_max: float = 0.8
    min_lane_length: float = 5.0
    sample_step: float = 0.5
    endpoint_dist_max: float = 3.0
    endpoint_angle_max: float = float(np.deg2rad(30.0))
    section_angle_max: float = float(np.deg2rad(45.0))
    linkage_gap_max: float = 3.0
    linkage_angle_max: float = float(np.deg2rad(30.0))
    # longitudinal gap allowed between lanes linked through a shared boundary
    shared_gap_max: float = 20.0

    def __post_init__(self):
        if not 0 < self.width_min < self.width_max:
            raise ValueError("need 0 < width_min < width_max")
        for name in ("width_variation_max", "min_lane_length", "sample_step", "endpoint_dist_max",
                     "linkage_gap_max", "shared_gap_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("endpoint_angle_max", "section_angle_max", "linkage_angle_max"):
            if not 0 < getattr(self, name) < np.pi:
                raise ValueError(f"{name} must lie in (0, pi)")


class LinkageCue(enum.Enum):
    SHARED_BOUNDARY = "shared_boundary"
    GEOMETRIC_ALIGNMENT = "geometric_alignment"


@dataclass(eq=False)
class LaneBoundary:
    id: int
    source: list[int]
    boundary_kind: MarkingType
    polyline: np.ndarray


@dataclass(eq=False)
class RoadSection:
    id: int
    boundaries: list[int]


@dataclass(eq=False)
class Lane:
    id: int
    left_boundary: int
    right_boundary: int
    valid_range: tuple[float, float]
    centerline: np.ndarray
    # same run measured along the right boundary
    right_range: tuple[float, float] = (0.0, 0.0)
    widths: np.ndarray = field(default_factory=lambda: np.zeros(0))
    section: int = -1


@dataclass(frozen=True)
class LaneLinkage:
    predecessor: int
    successor: int
    cue: LinkageCue


@dataclass(eq=False)
class RoadLayout:
    boundaries: list[LaneBoundary] = field(default_factory=list)
    sections: list[RoadSection] = field(default_factory=list)
    lanes: list[Lane] = field(default_factory=list)
    linkages: list[LaneLinkage] = field(default_factory=list)


class _UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


# -- boundaries ------------------------------------------------------------------


def _orient(lines: dict[int, np.ndarray], heading) -> dict[int, np.ndarray]:
    if not lines:
        return {}
    if heading is None:
        longest = max(lines, key=lambda k: (polyline_length(lines[k]), -k))
        ref = unit((lines[longest][-1] - lines[longest][0])[:2])
    else:
        ref = unit(np.asarray(heading, dtype=float)[:2])
    out = {}
    for k, line in lines.items():
        out[k] = line[::-1].copy() if np.dot((line[-1] - line[0])[:2], ref) < 0 else line
    return out


def _append(chain: np.ndarray, nxt: np.ndarray) -> np.ndarray:
    d = end_direction(chain, at_start=False)
    ahead = (nxt[:, :2] - chain[-1, :2]) @ d > 1e-6
    if not ahead.any():
        return chain
    return np.concatenate([chain, nxt[np.argmax(ahead):]])


def build_lane_boundaries(instances, params: LayoutParams = LayoutParams(), heading=None) -> list[LaneBoundary]:
    """Chain laneline and roadedge instances whose endpoints meet into continuous boundaries.

    ``instances`` are objects with ``id``, ``marking_type`` and ``polyline``.
    Polylines are first oriented along ``heading`` (or along the longest
    instance).  End-to-start joins are accepted greedily by increasing
    endpoint distance, each endpoint used once.
    """
    usable = [
        i for i in instances
        if i.marking_type in (MarkingType.LANELINE, MarkingType.ROADEDGE) and len(i.polyline) >= 2
    ]
    # keyed by position: clipping can split one instance into several pieces
    src = {k: int(i.id) for k, i in enumerate(usable)}
    kinds = {k: MarkingType(i.marking_type) for k, i in enumerate(usable)}
    lines = _orient({k: np.asarray(i.polyline, dtype=float) for k, i in enumerate(usable)}, heading)
    keys = sorted(lines, key=lambda k: (src[k], k))
    joins = []
    if keys:
        ends = np.array([lines[k][-1, :2] for k in keys])
        starts = np.array([lines[k][0, :2] for k in keys])
        d_end = np.array([end_direction(lines[k], False) for k in keys])
        d_start = np.array([end_direction(lines[k], True) for k in keys])
        kind = np.array([int(kinds[k]) for k in keys])
        dist = np.linalg.norm(ends[:, None, :] - starts[None, :, :], axis=2)
        ang = np.arccos(np.clip(d_end @ d_start.T, -1.0, 1.0))
        ok = (dist <= params.endpoint_dist_max) & (ang <= params.endpoint_angle_max) & (kind[:, None] == kind[None, :])
        np.fill_diagonal(ok, False)
        for i, j in zip(*np.nonzero(ok)):
            a, b = keys[i], keys[j]
            joins.append((round(float(dist[i, j]), 9), src[a], src[b], a, b))
    joins.sort()
    uf = _UnionFind(keys)
    nxt: dict[int, int] = {}
    prev: dict[int, int] = {}
    for *_, a, b in joins:
        if a in nxt or b in prev or not uf.union(a, b):
            continue
        nxt[a] = b
        prev[b] = a
    chains = []
    for h in keys:
        if h in prev:
            continue
        chain = [h]
        while chain[-1] in nxt:
            chain.append(nxt[chain[-1]])
        chains.append(chain)
    chains.sort(key=lambda c: min((src[k], k) for k in c))
    out = []
    for bid, chain in enumerate(chains):
        poly = lines[chain[0]]
        for k in chain[1:]:
            poly = _append(poly, lines[k])
        out.append(LaneBoundary(bid, [src[k] for k in chain], kinds[chain[0]], poly))
    return out


# -- sections ---------------------------------------------------------------------


def _direction(line: np.ndarray) -> np.ndarray:
    return unit((line[-1] - line[0])[:2])


def overlaps(a: np.ndarray, b: np.ndarray) -> bool:
    """True if some point of ``a`` projects orthogonally onto a segment of ``b``.

    Exact for the continuous polyline: a segment of ``a`` reaches the slab
    orthogonal to a segment of ``b`` when their extents along that segment meet.
    """
    d = np.diff(b[:, :2], axis=0)
    length = np.linalg.norm(d, axis=1)
    keep = length > 0
    if not keep.any():
        return False
    u = d[keep] / length[keep, None]
    t = np.einsum("ijk,jk->ij", a[:, None, :2] - b[:-1][keep][None, :, :2], u)
    if len(a) == 1:
        lo = hi = t
    else:
        lo = np.minimum(t[:-1], t[1:])
        hi = np.maximum(t[:-1], t[1:])
    return bool(np.any((hi >= 0.0) & (lo <= length[keep][None, :])))


def section_edges(boundaries, params: LayoutParams = LayoutParams()) -> list[tuple[int, int]]:
    if len(boundaries) < 2:
        return []
    dirs = np.array([_direction(b.polyline) for b in boundaries])
    close = np.abs(dirs @ dirs.T) >= np.cos(params.section_angle_max) - 1e-12
    edges = []
    for i, j in zip(*np.nonzero(np.triu(close, 1))):
        a, b = boundaries[i], boundaries[j]
        if overlaps(a.polyline, b.polyline) and overlaps(b.polyline, a.polyline):
            edges.append((a.id, b.id))
    return edges


def group_road_sections(boundaries, params: LayoutParams = LayoutParams()) -> list[RoadSection]:
    """Connected components (depth-first search) of the direction/overlap graph."""
    adj: dict[int, list[int]] = {b.id: [] for b in boundaries}
    for a, b in section_edges(boundaries, params):
        adj[a].append(b)
        adj[b].append(a)
    seen: set[int] = set()
    sections = []
    for start in sorted(adj):
        if start in seen:
            continue
        comp, stack = [], [start]
        seen.add(start)
        while stack:
            v = stack.pop()
            comp.append(v)
            for w in sorted(adj[v], reverse=True):
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        sections.append(RoadSection(len(sections), sorted(comp)))
    return sections


def lateral_offsets(boundaries) -> np.ndarray:
    """Offset of each boundary's arclength midpoint to the right of the mean direction axis."""
    dirs = [_direction(b.polyline) for b in boundaries]
    ref = dirs[0]
    axis = unit(sum(d if np.dot(d, ref) >= 0 else -d for d in dirs))
    right = np.array([axis[1], -axis[0]])
    mids = [interpolate_at(b.polyline, [polyline_length(b.polyline) / 2])[0, :2] for b in boundaries]
    return np.array([float(np.dot(m, right)) for m in mids])


def sort_boundaries_left_to_right(boundaries) -> list:
    boundaries = list(boundaries)
    if len(boundaries) < 2:
        return boundaries
    off = lateral_offsets(boundaries)
    order = sorted(range(len(boundaries)), key=lambda k: (round(off[k], 6), boundaries[k].id))
    return [boundaries[k] for k in order]


# -- lanes ------------------------------------------------------------------------------


@dataclass
class _PairSamples:
    ok: np.ndarray
    dist: np.ndarray
    s_left: np.ndarray
    s_right: np.ndarray
    right_pts: np.ndarray
    foot: np.ndarray


def _pair_samples(left: np.ndarray, right: np.ndarray, params: LayoutParams) -> _PairSamples:
    pts = resample(right, params.sample_step)
    s_right = cumulative_length(pts)
    valid, dist, s_left, foot = project_to_polyline(pts, left)
    eps = 1e-3
    tangent = interpolate_at(left, s_left + eps) - interpolate_at(left, s_left - eps)
    rel = pts - foot
    cross = tangent[:, 0] * rel[:, 1] - tangent[:, 1] * rel[:, 0]
    d = np.where(valid, dist, np.inf)
    ok = valid & (cross < 0) & (d >= params.width_min) & (d <= params.width_max)
    return _PairSamples(ok, d, s_left, s_right, pts, foot)


def _runs(ok: np.ndarray, dist: np.ndarray, s: np.ndarray, params: LayoutParams) -> list[list[int]]:
    runs, cur = [], []
    lo = hi = 0.0

    def flush():
        if cur and s[cur[-1]] - s[cur[0]] >= params.min_lane_length:
            runs.append(list(cur))

    for k in range(len(ok)):
        if not ok[k]:
            flush()
            cur = []
            continue
        d = dist[k]
        if cur and max(hi, d) - min(lo, d) > params.width_variation_max:
            flush()
            cur = []
        if not cur:
            lo = hi = d
        lo, hi = min(lo, d), max(hi, d)
        cur.append(k)
    flush()
    return runs


def _lane_from_run(run, ps: _PairSamples, left_id: int, right_id: int) -> Lane:
    idx = np.asarray(run)
    sl = ps.s_left[idx]
    return Lane(
        id=-1,
        left_boundary=left_id,
        right_boundary=right_id,
        valid_range=(float(sl.min()), float(sl.max())),
        centerline=0.5 * (ps.right_pts[idx] + ps.foot[idx]),
        right_range=(float(ps.s_right[idx[0]]), float(ps.s_right[idx[-1]])),
        widths=ps.dist[idx].copy(),
    )


def _covered(values: np.ndarray, ranges, tol: float) -> np.ndarray:
    out = np.zeros(len(values), dtype=bool)
    for a, b in ranges:
        out |= (values >= a - tol) & (values <= b + tol)
    return out


def generate_lanes(sorted_boundaries, params: LayoutParams = LayoutParams()) -> list[Lane]:
    """Lanes from neighbour pairs ``(b_i, b_i+1)`` and skip pairs ``(b_i, b_i+2)``.

    The right boundary is sampled every ``sample_step``; a lane is a run of
    samples whose orthogonal distance to the left boundary stays inside the
    width interval with bounded variation.  Skip-pair samples already covered
    by a neighbour-pair lane on the shared boundary are suppressed.
    """
    b = list(sorted_boundaries)
    n = len(b)
    samples: dict[tuple[int, int], _PairSamples] = {}
    lanes: dict[tuple[int, int], list[Lane]] = {}
    for i in range(n - 1):
        ps = _pair_samples(b[i].polyline, b[i + 1].polyline, params)
        samples[(i, i + 1)] = ps
        lanes[(i, i + 1)] = [_lane_from_run(r, ps, b[i].id, b[i + 1].id) for r in _runs(ps.ok, ps.dist, ps.s_right, params)]
    tol = params.sample_step / 2
    for i in range(n - 2):
        ps = _pair_samples(b[i].polyline, b[i + 2].polyline, params)
        covered = _covered(ps.s_left, [l.valid_range for l in lanes[(i, i + 1)]], tol)
        covered |= _covered(ps.s_right, [l.right_range for l in lanes[(i + 1, i + 2)]], tol)
        ok = ps.ok & ~covered
        lanes[(i, i + 2)] = [_lane_from_run(r, ps, b[i].id, b[i + 2].id) for r in _runs(ok, ps.dist, ps.s_right, params)]
    out = []
    for key in sorted(lanes, key=lambda k: (k[0], k[1])):
        out.extend(lanes[key])
    return out


# -- linkages -------------------------------------------------------------------------


def generate_linkages(lanes, params: LayoutParams = LayoutParams()) -> list[LaneLinkage]:
    """Successor relations from shared boundaries and from end-to-start alignment."""
    tol = params.sample_step
    links: dict[tuple[int, int], LinkageCue] = {}
    for p in lanes:
        for side in ("left", "right"):
            bid = getattr(p, f"{side}_boundary")
            end = (p.valid_range if side == "left" else p.right_range)[1]
            best = None
            for s in lanes:
                if s.id == p.id or getattr(s, f"{side}_boundary") != bid:
                    continue
                start = (s.valid_range if side == "left" else s.right_range)[0]
                gap = start - end
                if -tol <= gap <= params.shared_gap_max and (best is None or (gap, s.id) < best):
                    best = (gap, s.id)
            if best is not None:
                links.setdefault((p.id, best[1]), LinkageCue.SHARED_BOUNDARY)
    for p in lanes:
        if len(p.centerline) < 2:
            continue
        e = p.centerline[-1, :2]
        de = end_direction(p.centerline, at_start=False)
        for s in lanes:
            if s.id == p.id or (p.id, s.id) in links or len(s.centerline) < 2:
                continue
            st = s.centerline[0, :2]
            if np.linalg.norm(st - e) > params.linkage_gap_max:
                continue
            if np.dot(st - e, de) < -tol:
                continue
            if angle_between(de, end_direction(s.centerline, at_start=True)) > params.linkage_angle_max:
                continue
            links[(p.id, s.id)] = LinkageCue.GEOMETRIC_ALIGNMENT
    return [LaneLinkage(a, b, c) for (a, b), c in sorted(links.items())]


def build_layout(instances, params: LayoutParams = LayoutParams(), heading=None) -> RoadLayout:
    boundaries = build_lane_boundaries(instances, params, heading)
    sections = group_road_sections(boundaries, params)
    by_id = {b.id: b for b in boundaries}
    lanes: list[Lane] = []
    for sec in sections:
        ordered = sort_boundaries_left_to_right([by_id[i] for i in sec.boundaries])
        sec.boundaries = [x.id for x in ordered]
        for lane in generate_lanes(ordered, params):
            lane.id = len(lanes)
            lane.section = sec.id
            lanes.append(lane)
    return RoadLayout(boundaries, sections, lanes, generate_linkages(lanes, params))
