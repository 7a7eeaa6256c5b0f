"""Sparse semantic voxel map built on a chained block hash table.

Space is split into blocks of 8x8x8 voxels.  Blocks live in
:class:`BlockHashTable` and are allocated on first observation.  Each
allocated voxel gets an integer id that indexes flat per-voxel arrays
(type counters, reliability latch, alive flag); the block stores the ids
of its 512 voxels.  Ids are never reused, so an evicted and re-observed
voxel starts over with fresh counters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detection import MarkingType, RawDetection
from .geometry import OrientedRect

BLOCK_SIDE = 8
VOXELS_PER_BLOCK = BLOCK_SIDE**3
N_TYPES = len(MarkingType)

_BIAS = 1 << 20
_MASK21 = (1 << 21) - 1


def _pack(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64) + _BIAS
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def _unpack(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    return np.column_stack([(k >> 42) & _MASK21, (k >> 21) & _MASK21, k & _MASK21]) - _BIAS


@dataclass(frozen=True, order=True)
class VoxelKey:
    block_coords: tuple[int, int, int]
    intra_index: int

    def __post_init__(self):
        if not 0 <= self.intra_index < VOXELS_PER_BLOCK:
            raise ValueError(f"intra_index {self.intra_index} out of range")

    @property
    def intra_offset(self) -> tuple[int, int, int]:
        i = self.intra_index
        return (i % 8, (i // 8) % 8, i // 64)

    @property
    def coords(self) -> tuple[int, int, int]:
        off = self.intra_offset
        return tuple(b * BLOCK_SIDE + o for b, o in zip(self.block_coords, off))

    @classmethod
    def from_coords(cls, coords) -> "VoxelKey":
        c = [int(x) for x in coords]
        block = tuple(x >> 3 for x in c)
        ix, iy, iz = (x & 7 for x in c)
        return cls(block, ix + 8 * iy + 64 * iz)

    def center(self, voxel_size: float) -> np.ndarray:
        return (np.asarray(self.coords, dtype=float) + 0.5) * voxel_size


def voxel_coords(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel coordinates with floor semantics."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    return np.floor(np.asarray(points, dtype=float) / voxel_size).astype(np.int64)


def voxel_key_of(point, voxel_size: float) -> VoxelKey:
    return VoxelKey.from_coords(voxel_coords(np.asarray(point, dtype=float)[None, :], voxel_size)[0])


def voxel_centers(coords: np.ndarray, voxel_size: float) -> np.ndarray:
    return (np.asarray(coords, dtype=float) + 0.5) * voxel_size


def sample_polyline(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Samples along every segment at a step of at most half a voxel, endpoints included."""
    step = voxel_size / 2.0
    pts = np.asarray(points, dtype=float)
    d = np.diff(pts, axis=0)
    n = np.maximum(1, np.ceil(np.linalg.norm(d, axis=1) / step).astype(np.int64))
    seg = np.repeat(np.arange(len(d)), n)
    # position of each sample inside its segment, 1..n
    k = np.arange(len(seg)) - np.repeat(np.cumsum(n) - n, n) + 1
    t = (k / n[seg])[:, None]
    return np.concatenate([pts[:1], pts[seg] + t * d[seg]])


def sample_polylines(polylines, voxel_size: float) -> tuple[np.ndarray, np.ndarray]:
    """``sample_polyline`` over many polylines at once; returns samples and their polyline index."""
    sizes = np.array([len(p) for p in polylines])
    pts = np.concatenate([np.asarray(p, dtype=float) for p in polylines])
    owner = np.repeat(np.arange(len(sizes)), sizes)
    d = np.diff(pts, axis=0)
    n = np.maximum(1, np.ceil(np.linalg.norm(d, axis=1) / (voxel_size / 2.0)).astype(np.int64))
    # a segment bridging two polylines yields only the next one's first point
    bridge = owner[1:] != owner[:-1]
    n[bridge] = 1
    seg = np.repeat(np.arange(len(d)), n)
    k = np.arange(len(seg)) - np.repeat(np.cumsum(n) - n, n) + 1
    t = (k / n[seg])[:, None]
    out = np.concatenate([pts[:1], pts[seg] + t * d[seg]])
    at_bridge = np.flatnonzero(bridge[seg]) + 1
    out[at_bridge] = pts[seg[at_bridge - 1] + 1]
    return out, np.concatenate([owner[:1], owner[seg + 1]])


class BlockHashTable:
    """Hash table from integer block coordinates to values, resolving collisions by chaining.

    With ``fixed=True`` the bucket array never grows, so ``num_buckets=1``
    puts every entry into a single chain.
    """

    _P1, _P2, _P3 = 0x9E3779B97F4A7C15, 0xC2B2AE3D27D4EB4F, 0x165667B19E3779F9
    _M64 = (1 << 64) - 1

    def __init__(self, num_buckets: int = 64, fixed: bool = False, max_load: float = 1.0):
        if num_buckets < 1:
            raise ValueError("num_buckets must be >= 1")
        self._buckets: list[list] = [[] for _ in range(num_buckets)]
        self._size = 0
        self._fixed = fixed
        self._max_load = max_load

    @classmethod
    def hash_coords(cls, bx: int, by: int, bz: int) -> int:
        h = ((bx * cls._P1) ^ (by * cls._P2) ^ (bz * cls._P3)) & cls._M64
        return (h ^ (h >> 29)) & cls._M64

    @property
    def num_buckets(self) -> int:
        return len(self._buckets)

    def __len__(self) -> int:
        return self._size

    def _chain(self, key: tuple[int, int, int]) -> list:
        return self._buckets[self.hash_coords(*key) % len(self._buckets)]

    def get(self, key: tuple[int, int, int], default=None):
        for k, v in self._chain(key):
            if k == key:
                return v
        return default

    def __contains__(self, key) -> bool:
        return self.get(key, _MISSING) is not _MISSING

    def insert(self, key: tuple[int, int, int], value) -> None:
        chain = self._chain(key)
        for entry in chain:
            if entry[0] == key:
                entry[1] = value
                return
        chain.append([key, value])
        self._size += 1
        if not self._fixed and self._size > self._max_load * len(self._buckets):
            self._rehash(2 * len(self._buckets))

    def pop(self, key: tuple[int, int, int], default=None):
        chain = self._chain(key)
        for i, entry in enumerate(chain):
            if entry[0] == key:
                del chain[i]
                self._size -= 1
                return entry[1]
        return default

    def items(self):
        for chain in self._buckets:
            for k, v in chain:
                yield k, v

    def max_chain_length(self) -> int:
        return max((len(c) for c in self._buckets), default=0)

    def _rehash(self, n: int) -> None:
        old = self._buckets
        self._buckets = [[] for _ in range(n)]
        for chain in old:
            for entry in chain:
                self._buckets[self.hash_coords(*entry[0]) % n].append(entry)


_MISSING = object()


class _Block:
    """A block's coordinates and its row in the map's pooled slot table."""

    __slots__ = ("coords", "row")

    def __init__(self, coords: tuple[int, int, int], row: int):
        self.coords = coords
        self.row = row


class CoObservationTable:
    """Sparse symmetric pair counts: how many detections covered both voxels.

    The table is kept in factored form: each detection's voxel set and,
    per voxel, the detections that covered it.  A pair count is the size of
    the intersection of two voxels' detection lists, so an update costs
    O(voxels per detection) rather than O(voxels^2) while every query
    returns exactly the explicit pair table's value.
    """

    def __init__(self):
        self._dets: dict[int, np.ndarray] = {}
        self._by_voxel: dict[int, list[int]] = {}
        self._next_det = 0
        self._pending: list[np.ndarray] = []
        self._alive: np.ndarray | None = None
        # voxels whose detection lists were dropped from the index
        self._unindexed: set[int] = set()

    @staticmethod
    def pair_code(p, q):
        lo, hi = np.minimum(p, q), np.maximum(p, q)
        return (np.asarray(lo, dtype=np.int64) << 32) | np.asarray(hi, dtype=np.int64)

    def add(self, ids) -> None:
        """Count one co-observation for every unordered pair in ``ids``."""
        ids = np.unique(np.asarray(ids, dtype=np.int64))
        if len(ids) >= 2:
            self._pending.append(ids)

    def commit(self, skip: np.ndarray | None = None) -> None:
        """Apply pending updates.

        Voxels flagged in ``skip`` are left out of the voxel-to-detection
        index (pair counts involving them are still answered, by a scan).
        """
        if not self._pending:
            return
        det_ids = np.arange(self._next_det, self._next_det + len(self._pending))
        self._next_det += len(self._pending)
        for d, ids in zip(det_ids.tolist(), self._pending):
            self._dets[d] = ids
        vox = np.concatenate(self._pending)
        owner = np.repeat(det_ids, [len(a) for a in self._pending])
        self._pending = []
        order = np.argsort(vox, kind="stable")
        vox, owner = vox[order], owner[order]
        uniq, start = np.unique(vox, return_index=True)
        bounds = np.append(start, len(vox))
        if skip is not None:
            drop = skip[uniq]
            newly = set(uniq[drop].tolist())
            newly -= self._unindexed
            for v in newly:
                self._by_voxel.pop(v, None)
            self._unindexed |= newly
            keep = np.flatnonzero(~drop)
        else:
            keep = np.arange(len(uniq))
        owner = owner.tolist()
        lo = bounds[keep].tolist()
        hi = bounds[keep + 1].tolist()
        by_voxel = self._by_voxel
        for v, a, b in zip(uniq[keep].tolist(), lo, hi):
            lst = by_voxel.get(v)
            if lst is None:
                by_voxel[v] = owner[a:b]
            else:
                lst.extend(owner[a:b])

    def detections_of(self, p: int) -> list[int]:
        self.commit()
        p = int(p)
        if p in self._unindexed:
            return [d for d, ids in self._dets.items() if _contains(ids, p)]
        return [d for d in self._by_voxel.get(p, ()) if d in self._dets]

    def get(self, p: int, q: int) -> int:
        if p == q:
            return 0
        self.commit()
        a = self.detections_of(p)
        b = self.detections_of(q)
        return len(set(a).intersection(b))

    def lookup(self, members: np.ndarray, q: int) -> np.ndarray:
        """Pair counts between each id in ``members`` and ``q`` (0 where absent)."""
        members = np.asarray(members, dtype=np.int64)
        dets = self.detections_of(q)
        if not dets or len(members) == 0:
            return np.zeros(len(members), dtype=np.int64)
        vox = np.concatenate([self._dets[d] for d in dets])
        counts = np.bincount(vox, minlength=int(max(vox.max(), members.max())) + 1)
        return np.where(members != q, counts[members], 0)

    def co_observed(self, q: int) -> np.ndarray:
        """Voxel ids of every detection covering ``q``, one entry per detection (``q`` included)."""
        dets = self.detections_of(q)
        if not dets:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([self._dets[d] for d in dets])

    def purge(self, alive: np.ndarray) -> int:
        """Forget ids whose ``alive`` flag is False; returns the number of dropped detections."""
        self.commit()
        self._alive = np.asarray(alive, dtype=bool).copy()
        for v in [v for v in self._by_voxel if not self._alive[v]]:
            del self._by_voxel[v]
        self._unindexed = {v for v in self._unindexed if self._alive[v]}
        dropped = 0
        # detections arrive roughly oldest-first, so dead ones collect at the front
        for d in list(self._dets):
            if self._alive[self._dets[d]].sum() >= 2:
                break
            del self._dets[d]
            dropped += 1
        return dropped

    def _live(self, ids: np.ndarray) -> np.ndarray:
        if self._alive is None:
            return ids
        ok = ids < len(self._alive)
        ok[ok] = self._alive[ids[ok]]
        return ids[ok]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Explicit ``(p, q, count)`` arrays with ``p < q`` for every nonzero pair."""
        self.commit()
        codes = []
        for ids in self._dets.values():
            ids = self._live(ids)
            if len(ids) >= 2:
                i, j = np.triu_indices(len(ids), 1)
                codes.append((ids[i] << 32) | ids[j])
        if not codes:
            empty = np.empty(0, dtype=np.int64)
            return empty, empty, empty
        keys, counts = np.unique(np.concatenate(codes), return_counts=True)
        return keys >> 32, keys & 0xFFFFFFFF, counts

    def __len__(self) -> int:
        return len(self.arrays()[0])

    def items(self):
        p, q, c = self.arrays()
        for a, b, n in zip(p.tolist(), q.tolist(), c.tolist()):
            yield (a, b), n


def _contains(sorted_ids: np.ndarray, v: int) -> bool:
    i = np.searchsorted(sorted_ids, v)
    return bool(i < len(sorted_ids) and sorted_ids[i] == v)


def update_co_observation(table: CoObservationTable, voxels) -> CoObservationTable:
    table.add(voxels)
    return table


@dataclass(frozen=True, eq=False)
class ReliableVoxel:
    id: int
    key: VoxelKey
    center: np.ndarray
    best_type: MarkingType
    best_count: int


class VoxelMap:
    """Semantic voxel map with per-type detection counters and a co-observation table."""

    def __init__(self, voxel_size: float = 0.2, num_buckets: int = 64, fixed_buckets: bool = False):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.blocks = BlockHashTable(num_buckets, fixed=fixed_buckets)
        self.co_observation = CoObservationTable()
        self._n = 0
        cap = 1024
        self._coords = np.zeros((cap, 3), dtype=np.int64)
        self._counts = np.zeros((cap, N_TYPES), dtype=np.int64)
        # largest counter per voxel, kept in step with _counts
        self._best = np.zeros(cap, dtype=np.int64)
        self._alive = np.zeros(cap, dtype=bool)
        self._latched = np.zeros(cap, dtype=bool)
        # slot table: one row of 512 voxel ids (-1 when unallocated) per block
        self._slots = np.full((64, VOXELS_PER_BLOCK), -1, dtype=np.int64)
        self._free_rows = list(range(63, -1, -1))

    def _new_row(self) -> int:
        if not self._free_rows:
            n = len(self._slots)
            self._slots = np.concatenate([self._slots, np.full((n, VOXELS_PER_BLOCK), -1, dtype=np.int64)])
            self._free_rows = list(range(2 * n - 1, n - 1, -1))
        return self._free_rows.pop()

    # -- pool -----------------------------------------------------------
    def _alloc(self, coords: np.ndarray) -> np.ndarray:
        n = len(coords)
        need = self._n + n
        if need > len(self._alive):
            cap = max(need, 2 * len(self._alive))
            self._coords = _grow(self._coords, cap)
            self._counts = _grow(self._counts, cap)
            self._best = _grow(self._best, cap)
            self._alive = _grow(self._alive, cap)
            self._latched = _grow(self._latched, cap)
        ids = np.arange(self._n, need, dtype=np.int64)
        self._coords[ids] = coords
        self._alive[ids] = True
        self._n = need
        return ids

    @property
    def num_ids(self) -> int:
        return self._n

    @property
    def num_voxels(self) -> int:
        return int(self._alive[: self._n].sum())

    @property
    def num_reliable(self) -> int:
        n = self._n
        return int((self._alive[:n] & self._latched[:n]).sum())

    @property
    def alive(self) -> np.ndarray:
        return self._alive[: self._n]

    def counts(self, ids) -> np.ndarray:
        return self._counts[np.asarray(ids, dtype=np.int64)]

    def best_counts(self, ids) -> np.ndarray:
        return self._best[np.asarray(ids, dtype=np.int64)]

    def coords_of(self, ids) -> np.ndarray:
        return self._coords[np.asarray(ids, dtype=np.int64)]

    def centers(self, ids) -> np.ndarray:
        return voxel_centers(self.coords_of(ids), self.voxel_size)

    def key_of_id(self, vid: int) -> VoxelKey:
        return VoxelKey.from_coords(self._coords[vid])

    def max_count(self) -> int:
        n = self._n
        if n == 0:
            return 0
        live = self._counts[:n][self._alive[:n]]
        return int(live.max()) if len(live) else 0

    # -- lookup / allocation ----------------------------------------------
    def ids_for_coords(self, coords: np.ndarray, allocate: bool = True) -> np.ndarray:
        """Voxel ids for integer voxel coordinates; allocates blocks and voxels lazily.

        With ``allocate=False`` missing voxels map to -1.
        """
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if len(coords) == 0:
            return np.empty(0, dtype=np.int64)
        vkeys, first, inv = np.unique(_pack(coords), return_index=True, return_inverse=True)
        uc = coords[first]
        blocks = uc >> 3
        intra = (uc & 7) @ np.array([1, 8, 64], dtype=np.int64)
        bkeys, bfirst, binv = np.unique(_pack(blocks), return_index=True, return_inverse=True)
        rows = np.empty(len(bkeys), dtype=np.int64)
        for j, bc in enumerate(blocks[bfirst].tolist()):
            bc = tuple(bc)
            blk = self.blocks.get(bc)
            if blk is None:
                if not allocate:
                    rows[j] = -1
                    continue
                blk = _Block(bc, self._new_row())
                self.blocks.insert(bc, blk)
            rows[j] = blk.row
        r = rows[binv.reshape(-1)]
        out = np.full(len(vkeys), -1, dtype=np.int64)
        has = r >= 0
        out[has] = self._slots[r[has], intra[has]]
        if allocate:
            new = out < 0
            if new.any():
                fresh = self._alloc(uc[new])
                self._slots[r[new], intra[new]] = fresh
                out[new] = fresh
        return out[inv.reshape(-1)]

    def lookup(self, key: VoxelKey) -> int | None:
        blk = self.blocks.get(tuple(key.block_coords))
        if blk is None:
            return None
        vid = int(self._slots[blk.row, key.intra_index])
        return vid if vid >= 0 else None

    # -- integration -------------------------------------------------------
    def detection_coords(self, marking: RawDetection) -> np.ndarray:
        samples = sample_polyline(marking.points, self.voxel_size)
        return _unpack(np.unique(_pack(voxel_coords(samples, self.voxel_size))))

    def integrate_detection(self, marking: RawDetection) -> np.ndarray:
        """Fuse one detection; returns the sorted ids of the voxels it overlaps."""
        return self.integrate_frame([marking])[0]

    def integrate_frame(self, markings) -> list[np.ndarray]:
        """Fuse a frame's detections and update the co-observation table.

        Every overlapped voxel's counter for the detection's type goes up by
        exactly one per detection.  Returns each detection's voxel ids.
        """
        markings = list(markings)
        if not markings:
            return []
        samples, owner = sample_polylines([m.points for m in markings], self.voxel_size)
        keys = _pack(voxel_coords(samples, self.voxel_size))
        # consecutive samples mostly share a voxel; drop those repeats before sorting
        step = np.ones(len(keys), dtype=bool)
        step[1:] = (keys[1:] != keys[:-1]) | (owner[1:] != owner[:-1])
        keys, owner = keys[step], owner[step]
        # distinct (detection, voxel) pairs
        order = np.lexsort((keys, owner))
        keys, owner = keys[order], owner[order]
        first = np.ones(len(keys), dtype=bool)
        first[1:] = (keys[1:] != keys[:-1]) | (owner[1:] != owner[:-1])
        keys, owner = keys[first], owner[first]
        ids = self.ids_for_coords(_unpack(keys))
        types = np.array([int(m.marking_type) for m in markings])[owner]
        np.add.at(self._counts, (ids, types), 1)
        self._best[ids] = self._counts[ids].max(axis=1)
        order = np.lexsort((ids, owner))
        ids, owner = ids[order], owner[order]
        bounds = np.searchsorted(owner, np.arange(len(markings) + 1))
        out = [ids[bounds[k] : bounds[k + 1]] for k in range(len(markings))]
        for chunk in out:
            if len(chunk) >= 2:
                self.co_observation._pending.append(chunk)
        # latched voxels are never clustering candidates again, so they need no index
        self.co_observation.commit(skip=self._latched)
        return out

    def extract_new_reliable(self, touched, alpha_n: int) -> list[ReliableVoxel]:
        """Latch and return touched voxels whose best counter now exceeds ``alpha_n``.

        Ties between counters go to the lower type (laneline < roadedge < stopline).
        Output is ordered by voxel id.
        """
        touched = np.unique(np.asarray(touched, dtype=np.int64))
        if len(touched) == 0:
            return []
        counts = self._counts[touched]
        best = counts.max(axis=1)
        fresh = (best > alpha_n) & ~self._latched[touched] & self._alive[touched]
        sel = touched[fresh]
        self._latched[sel] = True
        best_type = counts[fresh].argmax(axis=1)
        centers = self.centers(sel)
        return [
            ReliableVoxel(int(v), self.key_of_id(int(v)), centers[k], MarkingType(int(best_type[k])), int(best[fresh][k]))
            for k, v in enumerate(sel)
        ]

    # -- eviction ----------------------------------------------------------
    def evict_outside(self, rect: OrientedRect) -> int:
        """Remove blocks lying fully outside ``rect`` (x/y only); returns removed voxel count."""
        entries = list(self.blocks.items())
        if not entries:
            return 0
        bc = np.array([k for k, _ in entries], dtype=float)
        side = BLOCK_SIDE * self.voxel_size
        outside = rect.boxes_outside(bc * side, (bc + 1) * side)
        removed = 0
        for (key, blk), out in zip(entries, outside):
            if not out:
                continue
            self.blocks.pop(key)
            slots = self._slots[blk.row]
            ids = slots[slots >= 0]
            slots[:] = -1
            self._free_rows.append(blk.row)
            self._alive[ids] = False
            removed += len(ids)
        if removed:
            self.co_observation.purge(self._alive)
        return removed

    # -- debug dump ----------------------------------------------------------
    def dump(self) -> list[dict]:
        """Flat, sorted records of every live voxel."""
        recs = []
        for key, blk in self.blocks.items():
            slots = self._slots[blk.row]
            for intra in np.flatnonzero(slots >= 0):
                vid = slots[intra]
                k = VoxelKey(key, int(intra))
                recs.append(
                    {
                        "block_coords": list(key),
                        "intra_index": int(intra),
                        "center": [round(float(x), 6) for x in k.center(self.voxel_size)],
                        "counts": [int(c) for c in self._counts[vid]],
                    }
                )
        recs.sort(key=lambda r: (r["block_coords"], r["intra_index"]))
        return recs


def _grow(arr: np.ndarray, cap: int) -> np.ndarray:
    out = np.zeros((cap,) + arr.shape[1:], dtype=arr.dtype)
    out[: len(arr)] = arr
    return out
