import functools
import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from markfuse.detection import MarkingType
from markfuse.layout import (
    LaneBoundary,
    LayoutParams,
    build_lane_boundaries,
    build_layout,
    generate_lanes,
    generate_linkages,
    group_road_sections,
    overlaps,
    section_edges,
    sort_boundaries_left_to_right,
)
from markfuse.local_map import SnapshotInstance

LL, RE = MarkingType.LANELINE, MarkingType.ROADEDGE


def line(x0, x1, y, n=20):
    x = np.linspace(x0, x1, n)
    return np.column_stack([x, np.full(n, float(y)), np.zeros(n)])


def inst(i, pts, kind=LL):
    return SnapshotInstance(i, kind, np.asarray(pts, dtype=float))


def boundary(i, pts, kind=LL):
    return LaneBoundary(i, [i], kind, np.asarray(pts, dtype=float))


def rotated(pts, yaw, shift=(0.0, 0.0)):
    c, s = math.cos(yaw), math.sin(yaw)
    out = pts.copy()
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + shift[0]
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + shift[1]
    return out


# -- boundaries -------------------------------------------------------------------


def test_collinear_pieces_with_small_gap_merge():
    out = build_lane_boundaries([inst(0, line(0, 10, 0)), inst(1, line(11, 20, 0))])
    assert len(out) == 1 and out[0].source == [0, 1]
    assert out[0].polyline[0, 0] == 0 and out[0].polyline[-1, 0] == 20


def test_parallel_lines_stay_separate():
    out = build_lane_boundaries([inst(0, line(0, 10, 0)), inst(1, line(0, 10, 3.5))])
    assert len(out) == 2


def test_single_instance_is_its_own_boundary():
    pts = line(0, 10, 1)
    out = build_lane_boundaries([inst(7, pts)])
    assert len(out) == 1 and out[0].source == [7] and np.array_equal(out[0].polyline, pts)


def test_different_types_never_merge_and_stoplines_ignored():
    out = build_lane_boundaries(
        [inst(0, line(0, 10, 0)), inst(1, line(11, 20, 0), RE), inst(2, line(0, 3, 5), MarkingType.STOPLINE)]
    )
    assert sorted(b.source for b in out) == [[0], [1]]
    assert {b.boundary_kind for b in out} == {LL, RE}


@st.composite
def dashed_scenes(draw):
    """Dashed lines broken into pieces with random gaps and types."""
    out, k = [], 0
    for lane in range(draw(st.integers(1, 3))):
        x = 0.0
        for _ in range(draw(st.integers(1, 4))):
            length = draw(st.floats(2, 8))
            out.append(inst(k, line(x, x + length, 3.5 * lane, 6), draw(st.sampled_from([LL, RE]))))
            k += 1
            x += length + draw(st.floats(0.2, 5))
    return out


@given(dashed_scenes(), st.randoms(use_true_random=False))
def test_boundary_partition_ignores_input_order(scene, rnd):
    def partition(insts):
        return sorted(tuple(sorted(b.source)) for b in build_lane_boundaries(insts, heading=(1, 0)))

    shuffled = list(scene)
    rnd.shuffle(shuffled)
    a = partition(scene)
    assert a == partition(shuffled)
    assert sorted(i for s in a for i in s) == sorted(i.id for i in scene)


# -- sections -----------------------------------------------------------------------


def test_parallel_overlapping_boundaries_form_one_section():
    secs = group_road_sections([boundary(0, line(0, 20, 0)), boundary(1, line(5, 30, 3.5))])
    assert [s.boundaries for s in secs] == [[0, 1]]


def test_longitudinally_separated_boundaries_form_two_sections():
    secs = group_road_sections([boundary(0, line(0, 10, 0)), boundary(1, line(15, 30, 0))])
    assert len(secs) == 2


def dense_points(pts, step=0.01):
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, math.ceil(np.linalg.norm(b - a) / step))
        out.extend(a + (b - a) * k / n for k in range(1, n + 1))
    return out


def projects_onto(points, b, margin):
    for a0, a1 in zip(b[:-1], b[1:]):
        d = (a1 - a0)[:2]
        length = float(np.linalg.norm(d))
        if length == 0:
            continue
        u = d / length
        for p in points:
            t = float(np.dot((p - a0)[:2], u))
            if -margin <= t <= length + margin:
                return True
    return False


@st.composite
def random_polyline(draw):
    x0, y0 = draw(st.floats(-10, 10)), draw(st.floats(-10, 10))
    yaw = draw(st.floats(-math.pi, math.pi))
    n = draw(st.integers(2, 4))
    steps = [draw(st.floats(0.5, 4)) for _ in range(n - 1)]
    bends = [draw(st.floats(-0.4, 0.4)) for _ in range(n - 1)]
    pts = [np.array([x0, y0, 0.0])]
    for s, b in zip(steps, bends):
        yaw += b
        pts.append(pts[-1] + s * np.array([math.cos(yaw), math.sin(yaw), 0.0]))
    return np.array(pts)


@given(random_polyline(), random_polyline())
def test_overlap_agrees_with_dense_projection(a, b):
    got = overlaps(a, b)
    if projects_onto(dense_points(a), b, 0.0):
        assert got
    if got:
        assert projects_onto(dense_points(a), b, 0.02)


@given(st.lists(random_polyline(), min_size=1, max_size=8))
def test_sections_equal_union_find_components(lines):
    bs = [boundary(i, p) for i, p in enumerate(lines)]
    parent = list(range(len(bs)))

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    for a, b in section_edges(bs):
        parent[find(a)] = find(b)
    comps = {}
    for i in range(len(bs)):
        comps.setdefault(find(i), []).append(i)
    got = sorted(s.boundaries for s in group_road_sections(bs))
    assert got == sorted(sorted(c) for c in comps.values())


@given(st.lists(random_polyline(), min_size=2, max_size=6))
def test_section_edges_follow_direction_and_mutual_overlap(lines):
    bs = [boundary(i, p) for i, p in enumerate(lines)]
    edges = set(section_edges(bs))
    limit = LayoutParams().section_angle_max
    for i in range(len(bs)):
        for j in range(i + 1, len(bs)):
            di = (lines[i][-1] - lines[i][0])[:2]
            dj = (lines[j][-1] - lines[j][0])[:2]
            cos = abs(np.dot(di, dj)) / (np.linalg.norm(di) * np.linalg.norm(dj))
            if abs(cos - math.cos(limit)) < 1e-9:
                continue
            expected = cos > math.cos(limit) and overlaps(lines[i], lines[j]) and overlaps(lines[j], lines[i])
            assert ((i, j) in edges) == expected


# -- ordering ------------------------------------------------------------------------


def test_three_parallel_boundaries_sorted_left_to_right():
    bs = [boundary(0, line(0, 20, 0)), boundary(1, line(0, 20, -3.5)), boundary(2, line(0, 20, 3.5))]
    assert [b.id for b in sort_boundaries_left_to_right(bs)] == [2, 0, 1]


def test_single_boundary_sorted_is_itself():
    b = boundary(0, line(0, 20, 0))
    assert sort_boundaries_left_to_right([b]) == [b]


def left_of(a, b):
    """Pairwise comparator: negative when ``a`` lies left of ``b`` (facing along ``b``)."""
    mid = a.polyline[len(a.polyline) // 2]
    p0, p1 = b.polyline[0], b.polyline[-1]
    d = p1 - p0
    cross = d[0] * (mid - p0)[1] - d[1] * (mid - p0)[0]
    return -1 if cross > 0 else 1


@given(st.floats(-math.pi, math.pi), st.integers(0, 10_000))
def test_sort_matches_pairwise_comparator(yaw, seed):
    rng = random.Random(seed)
    offsets = sorted(rng.sample(range(-20, 20), 6))
    bs = []
    for k, off in enumerate(offsets):
        start = rng.uniform(-3, 3)
        pts = line(start, start + rng.uniform(15, 25), off * 0.9, 21)
        bs.append(boundary(k, rotated(pts, yaw, (rng.uniform(-5, 5), 0))))
    shuffled = list(bs)
    rng.shuffle(shuffled)
    expected = sorted(bs, key=functools.cmp_to_key(left_of))
    assert [b.id for b in sort_boundaries_left_to_right(shuffled)] == [b.id for b in expected]


# -- lanes ---------------------------------------------------------------------------


def test_constant_width_pair_gives_one_full_lane():
    bs = [boundary(0, line(0, 100, 1.75, 101)), boundary(1, line(0, 100, -1.75, 101))]
    lanes = generate_lanes(bs)
    assert len(lanes) == 1
    lane = lanes[0]
    assert (lane.left_boundary, lane.right_boundary) == (0, 1)
    assert lane.valid_range == pytest.approx((0.0, 100.0))
    assert np.allclose(lane.widths, 3.5) and np.allclose(lane.centerline[:, 1], 0.0)


def test_too_wide_pair_gives_no_lane():
    assert generate_lanes([boundary(0, line(0, 100, 3)), boundary(1, line(0, 100, -3))]) == []


def test_skip_pair_suppressed_where_neighbour_lane_exists():
    bs = [boundary(0, line(0, 50, 3.5)), boundary(1, line(0, 50, 0)), boundary(2, line(0, 50, -3.5))]
    lanes = generate_lanes(bs, LayoutParams(width_max=7.5, width_variation_max=0.8))
    assert sorted((l.left_boundary, l.right_boundary) for l in lanes) == [(0, 1), (1, 2)]


@st.composite
def road_scenes(draw):
    n = draw(st.integers(2, 5))
    ys, y = [], 0.0
    for _ in range(n):
        ys.append(y)
        y -= draw(st.floats(2.0, 5.0))
    bs = []
    for k, y in enumerate(ys):
        x0 = draw(st.floats(0, 20))
        x1 = x0 + draw(st.floats(5, 60))
        wobble = draw(st.floats(-0.6, 0.6))
        x = np.linspace(x0, x1, 30)
        pts = np.column_stack([x, y + wobble * np.sin(x / 15.0), np.zeros_like(x)])
        bs.append(boundary(k, pts, draw(st.sampled_from([LL, RE]))))
    return bs, draw(st.floats(-math.pi, math.pi))


def distance_to_polyline(p, pts):
    best = math.inf
    for a, b in zip(pts[:-1, :2], pts[1:, :2]):
        d = b - a
        t = min(1.0, max(0.0, float(np.dot(p - a, d) / np.dot(d, d))))
        best = min(best, float(np.linalg.norm(p - (a + t * d))))
    return best


@given(road_scenes())
def test_lane_widths_stay_inside_interval(scene):
    bs, yaw = scene
    bs = [inst(b.id, rotated(b.polyline, yaw), b.boundary_kind) for b in bs]
    params = LayoutParams()
    layout = build_layout(bs, params)
    polys = {b.id: b.polyline for b in layout.boundaries}
    for lane in layout.lanes:
        assert lane.valid_range[1] - lane.valid_range[0] >= 0
        assert np.all(lane.widths >= params.width_min) and np.all(lane.widths <= params.width_max)
        assert np.ptp(lane.widths) <= params.width_variation_max + 1e-9
        # post hoc: twice the centerline's distance to the left boundary is the width
        # up to the curvature of the gentle wobble
        for c, w in zip(lane.centerline, lane.widths):
            assert abs(2 * distance_to_polyline(c[:2], polys[lane.left_boundary]) - w) < 0.1


# -- linkages ---------------------------------------------------------------------------


def test_single_lane_has_no_linkage():
    layout = build_layout([inst(0, line(0, 40, 1.75)), inst(1, line(0, 40, -1.75))])
    assert len(layout.lanes) == 1 and layout.linkages == []


def test_adjacent_lanes_are_not_successors():
    layout = build_layout([inst(k, line(0, 40, 3.5 - 3.5 * k)) for k in range(3)])
    assert len(layout.lanes) == 2 and layout.linkages == []


def test_lane_ids_and_sections_consistent():
    layout = build_layout([inst(k, line(0, 40, 3.5 - 3.5 * k)) for k in range(3)] + [inst(9, line(80, 120, 0))])
    assert [l.id for l in layout.lanes] == list(range(len(layout.lanes)))
    sec_of = {b: s.id for s in layout.sections for b in s.boundaries}
    for lane in layout.lanes:
        assert sec_of[lane.left_boundary] == sec_of[lane.right_boundary] == lane.section


@given(road_scenes(), st.lists(st.floats(-4, 4), min_size=1, max_size=3))
def test_linkage_graph_is_acyclic(scene, shifts):
    bs, yaw = scene
    # a second copy of the road further ahead creates successions
    more = [boundary(len(bs) + k, b.polyline + [70 + 10 * k, shifts[k % len(shifts)], 0]) for k, b in enumerate(bs)]
    layout = build_layout([inst(b.id, rotated(b.polyline, yaw)) for b in bs + more])
    succ = {}
    for link in layout.linkages:
        assert link.predecessor != link.successor
        succ.setdefault(link.predecessor, []).append(link.successor)
    pairs = [(l.predecessor, l.successor) for l in layout.linkages]
    assert len(pairs) == len(set(pairs))
    state = {}

    def visit(v):
        state[v] = 1
        for w in succ.get(v, []):
            assert state.get(w) != 1
            if w not in state:
                visit(w)
        state[v] = 2

    for v in list(succ):
        if v not in state:
            visit(v)


def test_linkage_params_validated():
    with pytest.raises(ValueError):
        LayoutParams(width_min=5.0, width_max=4.0)
    assert generate_linkages([]) == []
