import itertools
import math
from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from markfuse.detection import MarkingType, RawDetection
from markfuse.geometry import OrientedRect
from markfuse.voxel_map import (
    BlockHashTable,
    CoObservationTable,
    VoxelKey,
    VoxelMap,
    sample_polyline,
    update_co_observation,
    voxel_key_of,
)

VS = 0.2


def det(points, kind=MarkingType.LANELINE):
    return RawDetection(np.asarray(points, dtype=float), 1.0, kind)


def dense_voxels(points, voxel_size, step=1e-3):
    """Every voxel hit by a fine walk along the polyline, endpoints included."""
    pts = np.asarray(points, dtype=float)
    hits = set()
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / step)))
        for k in range(n + 1):
            p = a + (b - a) * (k / n)
            hits.add(tuple(math.floor(x / voxel_size) for x in p))
    return hits


@st.composite
def small_polylines(draw):
    n = draw(st.integers(2, 4))
    start = [draw(st.floats(-3, 3)) for _ in range(3)]
    pts = [start]
    for _ in range(n - 1):
        step = [draw(st.floats(-1.5, 1.5)) for _ in range(3)]
        if sum(s * s for s in step) < 1e-4:
            step[0] += 0.3
        pts.append([p + s for p, s in zip(pts[-1], step)])
    return np.array(pts)


def ids_to_coords(vm, ids):
    return {tuple(int(x) for x in c) for c in vm.coords_of(ids)}


# -- keys ---------------------------------------------------------------------------


def test_key_of_small_positive_point():
    k = voxel_key_of((0.05, 0.05, 0.05), VS)
    assert k.block_coords == (0, 0, 0) and k.intra_offset == (0, 0, 0)
    assert np.allclose(k.center(VS), [0.1, 0.1, 0.1])


def test_key_of_negative_point_uses_floor():
    k = voxel_key_of((-0.05, 0.0, 0.0), VS)
    assert k.coords == (-1, 0, 0)
    assert k.block_coords == (-1, 0, 0) and k.intra_offset == (7, 0, 0)


def test_key_roundtrip_through_center_random():
    pts = np.random.default_rng(7).uniform(-100, 100, size=(10_000, 3))
    for p in pts:
        k = voxel_key_of(p, VS)
        c = k.center(VS)
        # arithmetic oracle: the cube [i*s, (i+1)*s) contains p
        i = np.floor(p / VS)
        assert np.all(np.abs(c - p) <= VS / 2 + 1e-12)
        assert np.allclose(c, (i + 0.5) * VS)


@given(st.tuples(*[st.integers(-10_000, 10_000)] * 3))
def test_key_layout(coords):
    k = VoxelKey.from_coords(coords)
    ix, iy, iz = (c % 8 for c in coords)
    assert k.intra_index == ix + 8 * iy + 64 * iz
    assert k.coords == coords
    assert k.block_coords == tuple(c // 8 for c in coords)


def test_key_rejects_bad_intra_index():
    with pytest.raises(ValueError):
        VoxelKey((0, 0, 0), 512)


# -- integration ----------------------------------------------------------------------


def test_unit_segment_voxels_match_dense_rasterization():
    vm = VoxelMap(VS)
    ids = vm.integrate_detection(det([[0, 0, 0], [1, 0, 0]]))
    expected = dense_voxels([[0, 0, 0], [1, 0, 0]], VS)
    # frozen oracle: the closed segment reaches x = 1.0, which lies in voxel 5
    assert expected == {(x, 0, 0) for x in range(6)}
    assert ids_to_coords(vm, ids) == expected
    assert np.array_equal(vm.counts(ids)[:, MarkingType.LANELINE], np.ones(6))
    assert vm.counts(ids)[:, 1:].sum() == 0


def test_segment_inside_one_voxel():
    vm = VoxelMap(VS)
    ids = vm.integrate_detection(det([[0.01, 0.01, 0], [0.05, 0.02, 0]]))
    assert len(ids) == 1 and vm.counts(ids)[0, 0] == 1


def test_integrating_twice_counts_twice():
    vm = VoxelMap(VS)
    d = det([[0, 0, 0], [1, 0.3, 0]])
    a = vm.integrate_detection(d)
    b = vm.integrate_detection(d)
    assert np.array_equal(a, b)
    assert np.all(vm.counts(a)[:, 0] == 2)


@given(small_polylines())
def test_samples_are_dense_enough(points):
    s = sample_polyline(points, VS)
    assert np.allclose(s[0], points[0]) and np.allclose(s[-1], points[-1])
    assert np.all(np.linalg.norm(np.diff(s, axis=0), axis=1) <= VS / 2 + 1e-9)


@given(small_polylines())
def test_integrated_voxels_lie_on_the_polyline(points):
    vm = VoxelMap(VS)
    got = ids_to_coords(vm, vm.integrate_detection(det(points)))
    dense = dense_voxels(points, VS, step=VS / 50)
    # a sample landing exactly on a voxel face may round into either neighbour
    for c in got - dense:
        lo = np.array(c) * VS
        assert _touches(points, lo, lo + VS)
    # half-voxel sampling can only miss voxels the line clips near a corner
    for c in dense - got:
        lo = np.array(c) * VS
        assert _longest_chord(points, lo, lo + VS) <= VS / 2 + 1e-9


def _touches(points, lo, hi, eps=1e-9):
    return any(_clip(a, b, lo - eps, hi + eps) is not None for a, b in zip(points[:-1], points[1:]))


def _clip(a, b, lo, hi):
    t0, t1 = 0.0, 1.0
    d = b - a
    for k in range(3):
        if abs(d[k]) < 1e-15:
            if not lo[k] <= a[k] <= hi[k]:
                return None
            continue
        u0, u1 = sorted(((lo[k] - a[k]) / d[k], (hi[k] - a[k]) / d[k]))
        t0, t1 = max(t0, u0), min(t1, u1)
    return (t0, t1) if t0 <= t1 else None


def _longest_chord(points, lo, hi):
    """Longest piece of any single segment inside the box."""
    best = 0.0
    for a, b in zip(points[:-1], points[1:]):
        t = _clip(a, b, lo, hi)
        if t is not None:
            best = max(best, (t[1] - t[0]) * float(np.linalg.norm(b - a)))
    return best


@given(st.lists(st.tuples(small_polylines(), st.sampled_from(list(MarkingType))), min_size=1, max_size=6))
def test_counter_conservation_against_detection_log(log):
    vm = VoxelMap(VS)
    per_det = vm.integrate_frame([det(p, t) for p, t in log])
    expected = Counter()
    for (_, t), ids in zip(log, per_det):
        assert len(set(ids.tolist())) == len(ids)
        for c in ids_to_coords(vm, ids):
            expected[(c, int(t))] += 1
    for vid in range(vm.num_ids):
        c = tuple(int(x) for x in vm.coords_of([vid])[0])
        for t in MarkingType:
            assert vm.counts([vid])[0, t] == expected[(c, int(t))]


def test_batch_integration_equals_one_by_one():
    rng = np.random.default_rng(3)
    lines = [np.cumsum(rng.normal(size=(4, 3)), axis=0) for _ in range(12)]
    a, b = VoxelMap(VS), VoxelMap(VS)
    a.integrate_frame([det(p) for p in lines])
    for p in lines:
        b.integrate_detection(det(p))
    assert a.dump() == b.dump()
    # ids are allocated in a different order, so compare by coordinates
    assert pairs_by_coords(a) == pairs_by_coords(b)


def pairs_by_coords(vm):
    out = {}
    for (p, q), c in vm.co_observation.items():
        a, b = sorted(tuple(int(x) for x in vm.coords_of([v])[0]) for v in (p, q))
        out[(a, b)] = c
    return out


# -- co-observation ----------------------------------------------------------------------


def test_three_voxels_three_pairs():
    t = update_co_observation(CoObservationTable(), [4, 9, 2])
    assert dict(t.items()) == {(2, 4): 1, (2, 9): 1, (4, 9): 1}
    assert t.get(9, 2) == t.get(2, 9) == 1 and t.get(2, 2) == 0 and t.get(2, 100) == 0


def test_shared_pair_counted_per_detection():
    t = CoObservationTable()
    t.add([1, 2, 3])
    t.add([1, 2, 7])
    assert t.get(1, 2) == 2 and t.get(3, 7) == 0
    assert np.array_equal(t.lookup(np.array([1, 2, 3, 7]), 2), [2, 0, 1, 1])


@given(st.lists(st.lists(st.integers(0, 25), max_size=10), max_size=15))
def test_table_equals_pair_count_oracle(log):
    t = CoObservationTable()
    oracle = Counter()
    for ids in log:
        t.add(ids)
        for p, q in itertools.combinations(sorted(set(ids)), 2):
            oracle[(p, q)] += 1
    assert dict(t.items()) == dict(oracle)
    for p in range(26):
        members = np.arange(26)
        expect = [oracle[(min(p, q), max(p, q))] if p != q else 0 for q in members]
        assert t.lookup(members, p).tolist() == expect


@given(st.lists(st.tuples(small_polylines(), st.sampled_from(list(MarkingType))), min_size=1, max_size=6))
def test_pair_count_bounded_by_totals(log):
    vm = VoxelMap(VS)
    vm.integrate_frame([det(p, t) for p, t in log])
    p, q, c = vm.co_observation.arrays()
    totals = vm.counts(np.arange(vm.num_ids)).sum(axis=1)
    assert np.all(c <= np.minimum(totals[p], totals[q]))


# -- reliability ---------------------------------------------------------------------------


def test_latch_strictly_above_threshold():
    vm = VoxelMap(VS)
    d = det([[0.01, 0.01, 0], [0.05, 0.01, 0]])
    for k in range(10):
        ids = vm.integrate_detection(d)
        assert vm.extract_new_reliable(ids, 10) == []
    ids = vm.integrate_detection(d)
    out = vm.extract_new_reliable(ids, 10)
    assert len(out) == 1 and out[0].best_count == 11
    vm.integrate_detection(d)
    assert vm.extract_new_reliable(ids, 10) == []


def test_zero_threshold_emits_on_first_observation():
    vm = VoxelMap(VS)
    ids = vm.integrate_detection(det([[0, 0, 0], [1, 0, 0]]))
    assert len(vm.extract_new_reliable(ids, 0)) == len(ids)


def test_best_type_argmax_and_ties():
    vm = VoxelMap(VS)
    a = det([[0.01, 0.01, 0], [0.05, 0.01, 0]], MarkingType.LANELINE)
    b = det([[0.01, 0.01, 0], [0.05, 0.01, 0]], MarkingType.ROADEDGE)
    c = det([[1.01, 0.01, 0], [1.05, 0.01, 0]], MarkingType.STOPLINE)
    d = det([[1.01, 0.01, 0], [1.05, 0.01, 0]], MarkingType.ROADEDGE)
    vm.integrate_frame([a] * 12 + [b] * 5 + [c] * 4 + [d] * 4)
    out = {r.best_type: r for r in vm.extract_new_reliable(np.arange(vm.num_ids), 3)}
    assert out[MarkingType.LANELINE].best_count == 12
    # 4 roadedge vs 4 stopline: the lower type wins
    assert MarkingType.ROADEDGE in out and out[MarkingType.ROADEDGE].best_count == 4
    assert MarkingType.STOPLINE not in out


# -- eviction -------------------------------------------------------------------------------


def _filled_map(**kw):
    vm = VoxelMap(VS, **kw)
    rng = np.random.default_rng(11)
    lines = [np.cumsum(rng.normal(scale=2.0, size=(5, 3)), axis=0) for _ in range(25)]
    vm.integrate_frame([det(p, MarkingType(k % 3)) for k, p in enumerate(lines)])
    vm.integrate_frame([det(p + 0.07) for p in lines[:10]])
    return vm, lines


def test_covering_box_removes_nothing():
    vm, _ = _filled_map()
    n = vm.num_voxels
    assert vm.evict_outside(OrientedRect.axis_aligned((-1e3, -1e3), (1e3, 1e3))) == 0
    assert vm.num_voxels == n


def test_empty_box_removes_everything():
    vm, _ = _filled_map()
    n = vm.num_voxels
    assert vm.evict_outside(OrientedRect.axis_aligned((1, 1), (0, 0))) == n
    assert vm.num_voxels == 0 and len(vm.co_observation) == 0


def test_eviction_leaves_no_dangling_state():
    vm, lines = _filled_map()
    before = {tuple(r["block_coords"]): r for r in vm.dump()}
    rect = OrientedRect((0.5, -0.3), [[0.8, 0.6], [-0.6, 0.8]], (-3, -2), (4, 3))
    removed = vm.evict_outside(rect)
    assert removed > 0
    alive = vm.alive
    # exhaustive scan: every surviving voxel is reachable by key, every removed one is absent
    for vid in range(vm.num_ids):
        key = vm.key_of_id(vid)
        assert (vm.lookup(key) == vid) == bool(alive[vid])
    p, q, _ = vm.co_observation.arrays()
    assert np.all(alive[p]) and np.all(alive[q])
    # pairs among survivors keep their counts
    fresh = CoObservationTable()
    for ids in vm.co_observation._dets.values():
        fresh.add(ids[alive[ids]])
    assert sorted(fresh.items()) == sorted(vm.co_observation.items())
    assert len(before) >= len({tuple(r["block_coords"]) for r in vm.dump()})


def test_evicted_voxel_restarts_counters():
    vm = VoxelMap(VS)
    d = det([[0.01, 0.01, 0], [0.05, 0.01, 0]])
    ids = vm.integrate_detection(d)
    assert len(vm.extract_new_reliable(ids, 0)) == 1
    vm.evict_outside(OrientedRect.axis_aligned((5, 5), (6, 6)))
    ids2 = vm.integrate_detection(d)
    assert ids2[0] != ids[0] and vm.counts(ids2)[0, 0] == 1
    assert len(vm.extract_new_reliable(ids2, 0)) == 1


# -- hashing ----------------------------------------------------------------------------------


@given(st.lists(st.tuples(st.sampled_from("ipg"), st.tuples(*[st.integers(-40, 40)] * 3)), max_size=200))
def test_block_table_behaves_like_dict(ops):
    for fixed, buckets in ((False, 4), (True, 1)):
        table, ref = BlockHashTable(buckets, fixed=fixed), {}
        for n, (op, key) in enumerate(ops):
            if op == "i":
                table.insert(key, n)
                ref[key] = n
            elif op == "p":
                assert table.pop(key) == ref.pop(key, None)
            else:
                assert table.get(key) == ref.get(key)
        assert len(table) == len(ref)
        assert dict(table.items()) == ref
        if fixed:
            assert table.num_buckets == 1 and table.max_chain_length() == len(ref)


def test_single_bucket_map_is_identical():
    a, _ = _filled_map()
    b, _ = _filled_map(num_buckets=1, fixed_buckets=True)
    assert b.blocks.num_buckets == 1
    assert a.dump() == b.dump()
    assert pairs_by_coords(a) == pairs_by_coords(b)
    rect = OrientedRect.axis_aligned((-2, -2), (3, 3))
    assert a.evict_outside(rect) == b.evict_outside(rect)
    assert a.dump() == b.dump()


def test_dump_records():
    vm = VoxelMap(VS)
    vm.integrate_detection(det([[0, 0, 0], [0.3, 0, 0]], MarkingType.ROADEDGE))
    recs = vm.dump()
    assert [r["intra_index"] for r in recs] == [0, 1]
    assert recs[1]["center"] == [0.3, 0.1, 0.1] and recs[1]["counts"] == [0, 1, 0]
