"""Incremental clustering of reliable voxels into marking instances, and polyline fitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .detection import MarkingType
from .voxel_map import CoObservationTable, ReliableVoxel, VoxelKey, VoxelMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusteringParams:
    beta_p: float = 0.6
    beta_n: int = 3
    beta_r: float = 0.7
    # "co_observation" applies the h/ratio rules; "nearest" picks the closest
    # co-observed instance (ablation baseline)
    mode: str = "co_observation"

    def __post_init__(self):
        if not 0.0 < self.beta_p <= 1.0:
            raise ValueError("beta_p must lie in (0, 1]")
        if int(self.beta_n) != self.beta_n or self.beta_n < 1:
            raise ValueError("beta_n must be an integer >= 1")
        if not 0.0 < self.beta_r <= 1.0:
            raise ValueError("beta_r must lie in (0, 1]")
        if self.mode not in ("co_observation", "nearest"):
            raise ValueError(f"unknown clustering mode {self.mode!r}")


@dataclass(frozen=True)
class PolylineFitParams:
    eigen_ratio_threshold: float = 0.1
    segment_length_primary: float = 5.0
    segment_length_quadrant: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.eigen_ratio_threshold < 1.0:
            raise ValueError("eigen_ratio_threshold must lie in (0, 1)")
        if self.segment_length_primary <= 0 or self.segment_length_quadrant <= 0:
            raise ValueError("segment lengths must be positive")
        if self.segment_length_quadrant > self.segment_length_primary:
            raise ValueError("segment_length_quadrant must not exceed segment_length_primary")


class DegenerateFit(ValueError):
    """All voxel centers coincide; no direction can be estimated."""


@dataclass(eq=False)
class MarkingInstance:
    id: int
    marking_type: MarkingType
    # voxel id -> (key, center, best count when it joined)
    voxels: dict[int, tuple[VoxelKey, np.ndarray, int]] = field(default_factory=dict)
    polyline: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def voxel_count(self) -> int:
        return len(self.voxels)

    def centers(self) -> np.ndarray:
        if not self.voxels:
            return np.zeros((0, 3))
        return np.array([self.voxels[k][1] for k in sorted(self.voxels)])


# -- polyline estimation -----------------------------------------------------


def principal_axes(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, eigenvalues (descending) and eigenvectors (columns) of the point covariance.

    Eigenvector signs are normalised so each one's largest-magnitude
    component is positive.
    """
    pts = np.asarray(points, dtype=float)
    mean = pts.mean(axis=0)
    x = pts - mean
    cov = x.T @ x / len(pts)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    for k in range(vecs.shape[1]):
        if vecs[np.argmax(np.abs(vecs[:, k])), k] < 0:
            vecs[:, k] = -vecs[:, k]
    return mean, vals, vecs


def _fit_line(points: np.ndarray, axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Total-least-squares segment through ``points``, oriented along ``axis``."""
    if len(points) == 1:
        return points[0], points[0]
    mean, vals, vecs = principal_axes(points)
    d = vecs[:, 0] if vals[0] > 0 else axis
    if np.dot(d, axis) < 0:
        d = -d
    t = (points - mean) @ d
    return mean + t.min() * d, mean + t.max() * d


def _fit_lines_grouped(points: np.ndarray, idx: np.ndarray, n: int, axis: np.ndarray) -> list:
    """``_fit_line`` applied to every group ``points[idx == g]`` in one batch."""
    size = np.bincount(idx, minlength=n).astype(float)
    mean = np.stack([np.bincount(idx, points[:, k], n) for k in range(3)], axis=1) / size[:, None]
    x = points - mean[idx]
    outer = x[:, :, None] * x[:, None, :]
    cov = np.zeros((n, 3, 3))
    np.add.at(cov, idx, outer)
    cov /= size[:, None, None]
    vals, vecs = np.linalg.eigh(cov)
    d = vecs[:, :, 2].copy()
    # same sign convention as principal_axes, then oriented along axis
    big = d[np.arange(n), np.argmax(np.abs(d), axis=1)]
    d[big < 0] *= -1
    d[vals[:, 2] <= 0] = axis
    d[d @ axis < 0] *= -1
    t = np.einsum("ij,ij->i", x, d[idx])
    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)
    np.minimum.at(lo, idx, t)
    np.maximum.at(hi, idx, t)
    a = mean + lo[:, None] * d
    b = mean + hi[:, None] * d
    single = size == 1
    a[single] = mean[single]
    b[single] = mean[single]
    return list(zip(a, b))


def _ordered_points(points: np.ndarray, axis: np.ndarray) -> np.ndarray:
    order = np.argsort((points - points.mean(axis=0)) @ axis, kind="stable")
    out = [points[order[0]]]
    for p in points[order[1:]]:
        if np.linalg.norm(p - out[-1]) > 1e-9:
            out.append(p)
    return np.array(out)


def _grouped_polyline(points: np.ndarray, axis: np.ndarray, seg_len: float) -> np.ndarray:
    """Split ``points`` into equal bins of length <= ``seg_len`` along ``axis``, fit and connect."""
    t = (points - points.mean(axis=0)) @ axis
    tmin = t.min()
    span = t.max() - tmin
    n_bins = max(1, int(np.ceil(span / seg_len - 1e-9)))
    width = span / n_bins if span > 0 else 1.0
    idx = np.minimum(((t - tmin) / width).astype(int), n_bins - 1)
    groups, idx = np.unique(idx, return_inverse=True)
    if len(groups) + 1 > len(points):
        return _ordered_points(points, axis)
    segs = _fit_lines_grouped(points, idx.ravel(), len(groups), axis)
    verts = [segs[0][0]]
    for (_, b), (a, _) in zip(segs[:-1], segs[1:]):
        verts.append(0.5 * (b + a))
    verts.append(segs[-1][1])
    out = [verts[0]]
    for v in verts[1:]:
        if np.linalg.norm(v - out[-1]) > 1e-9:
            out.append(v)
    return np.array(out)


def estimate_polyline(centers: np.ndarray, params: PolylineFitParams = PolylineFitParams()) -> np.ndarray:
    """Fit an ordered polyline to voxel centers using principal-component grouping.

    Elongated clouds are binned along the first principal axis.  Otherwise the
    cloud is split into the four quadrants of the first two principal axes,
    each quadrant is binned along its own principal axis with the shorter
    segment length, and the quadrant pieces are chained in angular order.

    Raises :class:`DegenerateFit` when fewer than two distinct centers exist.
    """
    pts = np.asarray(centers, dtype=float)
    if len(pts) < 2 or np.ptp(pts, axis=0).max() < 1e-9:
        raise DegenerateFit("need at least two distinct voxel centers")
    mean, vals, vecs = principal_axes(pts)
    if vals[1] / vals[0] < params.eigen_ratio_threshold:
        return _grouped_polyline(pts, vecs[:, 0], params.segment_length_primary)

    local = (pts - mean) @ vecs[:, :2]
    quadrant = (local[:, 0] >= 0).astype(int) * 2 + (local[:, 1] >= 0).astype(int)
    pieces, angles = [], []
    for q in range(4):
        sel = pts[quadrant == q]
        if len(sel) == 0:
            continue
        if len(sel) == 1 or np.ptp(sel, axis=0).max() < 1e-9:
            piece = sel[:1]
        else:
            _, _, qvec = principal_axes(sel)
            piece = _grouped_polyline(sel, qvec[:, 0], params.segment_length_quadrant)
        c = local[quadrant == q].mean(axis=0)
        pieces.append(piece)
        angles.append(np.arctan2(c[1], c[0]))
    order = np.argsort(angles, kind="stable")
    pieces = [pieces[i] for i in order]
    ang = np.asarray(angles)[order]
    if len(pieces) > 1:
        gaps = np.diff(np.append(ang, ang[0] + 2 * np.pi))
        start = (int(np.argmax(gaps)) + 1) % len(pieces)
        pieces = pieces[start:] + pieces[:start]
    return _chain_pieces(pieces)


def _chain_pieces(pieces: list[np.ndarray]) -> np.ndarray:
    first = pieces[0]
    if len(pieces) > 1 and len(first) > 1:
        nxt = pieces[1]
        d_end = min(np.linalg.norm(first[-1] - nxt[0]), np.linalg.norm(first[-1] - nxt[-1]))
        d_start = min(np.linalg.norm(first[0] - nxt[0]), np.linalg.norm(first[0] - nxt[-1]))
        if d_start < d_end:
            first = first[::-1]
    chain = [p for p in first]
    for piece in pieces[1:]:
        if np.linalg.norm(piece[-1] - chain[-1]) < np.linalg.norm(piece[0] - chain[-1]):
            piece = piece[::-1]
        if len(piece) > 1 and len(chain) > 1:
            chain[-1] = 0.5 * (chain[-1] + piece[0])
            rest = piece[1:]
        else:
            rest = piece
        for p in rest:
            if np.linalg.norm(p - chain[-1]) > 1e-9:
                chain.append(p)
    return np.array(chain)


# -- clustering ----------------------------------------------------------------


def membership_score(
    candidate_id: int,
    candidate_count: int,
    member_ids: np.ndarray,
    member_counts: np.ndarray,
    table: CoObservationTable,
    beta_p: float,
) -> tuple[int, float]:
    """Count instance members likely to share the candidate's marking.

    For each member ``j`` the score is ``max(A/n_j, A/n_cand)`` with ``A``
    the pair's co-observation count, capped at 1.  Returns ``(h, h / M)``
    where ``h`` counts members scoring above ``beta_p``.
    """
    member_ids = np.asarray(member_ids, dtype=np.int64)
    if len(member_ids) == 0:
        return 0, 0.0
    p = pair_probabilities(table.lookup(member_ids, candidate_id), member_counts, candidate_count)
    h = int((p > beta_p).sum())
    return h, h / len(member_ids)


def pair_probabilities(co_counts, member_counts, candidate_count) -> np.ndarray:
    a = np.asarray(co_counts, dtype=float)
    nj = np.maximum(np.asarray(member_counts, dtype=float), 1.0)
    return np.minimum(np.maximum(a / nj, a / max(float(candidate_count), 1.0)), 1.0)


def accepts(h: int, size: int, params: ClusteringParams) -> bool:
    return h > params.beta_n or (size > 0 and h / size > params.beta_r)


class _MemberIndex:
    """Flat (voxel id, instance id) arrays for one marking type."""

    def __init__(self):
        self.ids = np.empty(64, dtype=np.int64)
        self.inst = np.empty(64, dtype=np.int64)
        self.n = 0

    def append(self, vid: int, iid: int) -> None:
        if self.n == len(self.ids):
            self.ids = np.resize(self.ids, 2 * self.n)
            self.inst = np.resize(self.inst, 2 * self.n)
        self.ids[self.n] = vid
        self.inst[self.n] = iid
        self.n += 1

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        return self.ids[: self.n], self.inst[: self.n]

    def keep(self, mask: np.ndarray) -> None:
        ids, inst = self.view()
        k = int(mask.sum())
        self.ids[:k] = ids[mask]
        self.inst[:k] = inst[mask]
        self.n = k


class InstanceMap:
    """All marking instances of a run, updated from each frame's newly reliable voxels."""

    def __init__(self, params: ClusteringParams = ClusteringParams(), fit: PolylineFitParams = PolylineFitParams()):
        self.params = params
        self.fit = fit
        self.instances: dict[int, MarkingInstance] = {}
        self._next_id = 0
        self._index = {t: _MemberIndex() for t in MarkingType}
        # per type: voxel id -> owning instance, -1 when not a member
        self._member_of = {t: np.full(0, -1, dtype=np.int64) for t in MarkingType}
        self._center_of = np.zeros((0, 3))
        self.warnings: list[str] = []

    def __len__(self) -> int:
        return len(self.instances)

    def of_type(self, marking_type: MarkingType) -> list[MarkingInstance]:
        return [i for i in self.instances.values() if i.marking_type == marking_type]

    def _reserve(self, n: int) -> None:
        size = len(self._center_of)
        if n <= size:
            return
        cap = max(1024, 2 * n)
        for t, arr in self._member_of.items():
            grown = np.full(cap, -1, dtype=np.int64)
            grown[:size] = arr
            self._member_of[t] = grown
        grown = np.zeros((cap, 3))
        grown[:size] = self._center_of
        self._center_of = grown

    def assign_or_create(self, cand: ReliableVoxel, voxel_map: VoxelMap) -> int:
        self._reserve(voxel_map.num_ids)
        iid = self._choose(cand, voxel_map)
        if iid is None:
            iid = self._next_id
            self._next_id += 1
            self.instances[iid] = MarkingInstance(iid, cand.best_type)
        self.instances[iid].voxels[cand.id] = (cand.key, cand.center, cand.best_count)
        self._index[cand.best_type].append(cand.id, iid)
        self._center_of[cand.id] = cand.center
        self._member_of[cand.best_type][cand.id] = iid
        return iid

    def _choose(self, cand: ReliableVoxel, voxel_map: VoxelMap) -> int | None:
        member_of = self._member_of[cand.best_type]
        vox = voxel_map.co_observation.co_observed(cand.id)
        # the candidate is not a member yet, so this also drops it
        vox = vox[member_of[vox] >= 0]
        if len(vox) == 0:
            return None
        # co-observation count per member = occurrences across the candidate's detections
        lo = vox.min()
        a = np.bincount(vox - lo)
        ids = np.flatnonzero(a)
        a = a[ids]
        ids += lo
        inst = member_of[ids]
        if self.params.mode == "nearest":
            d = np.linalg.norm(voxel_map.centers(ids) - cand.center, axis=1)
            best = np.lexsort((inst, d))[0]
            return int(inst[best])
        p = pair_probabilities(a, voxel_map.best_counts(ids), cand.best_count)
        hits = np.bincount(inst[p > self.params.beta_p])
        cand_inst = np.flatnonzero(hits)
        best = None
        for iid, hk in zip(cand_inst.tolist(), hits[cand_inst].tolist()):
            if (best is None or hk > best[0]) and accepts(hk, self.instances[iid].voxel_count, self.params):
                best = (hk, iid)
        return None if best is None else best[1]

    def update(self, new_reliable, voxel_map: VoxelMap) -> set[int]:
        """Assign each reliable voxel in order, then refit the instances that grew."""
        dirty = {self.assign_or_create(c, voxel_map) for c in new_reliable}
        self.refit(dirty)
        return dirty

    def prune(self, voxel_map: VoxelMap) -> set[int]:
        """Drop members whose voxels were evicted; delete emptied instances, refit the rest."""
        alive = voxel_map.alive
        dirty: set[int] = set()
        for t, idx in self._index.items():
            ids, inst = idx.view()
            if len(ids) == 0:
                continue
            live = alive[ids]
            if live.all():
                continue
            for vid, iid in zip(ids[~live].tolist(), inst[~live].tolist()):
                self.instances[iid].voxels.pop(vid, None)
                dirty.add(iid)
            self._member_of[t][ids[~live]] = -1
            idx.keep(live)
        for iid in sorted(dirty):
            if not self.instances[iid].voxels:
                del self.instances[iid]
        dirty = {i for i in dirty if i in self.instances}
        self.refit(dirty)
        return dirty

    def refit(self, ids) -> None:
        for iid in sorted(ids):
            inst = self.instances[iid]
            ids = np.fromiter(inst.voxels, dtype=np.int64, count=len(inst.voxels))
            centers = self._center_of[np.sort(ids)]
            if len(centers) == 1:
                inst.polyline = centers.copy()
                continue
            try:
                inst.polyline = estimate_polyline(centers, self.fit)
            except DegenerateFit as exc:
                msg = f"instance {iid}: {exc}; keeping previous polyline"
                log.warning(msg)
                self.warnings.append(msg)
