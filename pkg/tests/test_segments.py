import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from milboundary import segments
from milboundary.imaging import BACKGROUND, IGNORE, InvalidInput
from milboundary.segments import SegmentContractError


def dda_line(p, q):
    """Independent oracle: step along the major axis, round the minor one (half away from the start)."""
    (x0, y0), (x1, y1) = p, q
    n = max(abs(x1 - x0), abs(y1 - y0))
    if n == 0:
        return [p]
    pts = []
    for i in range(n + 1):
        t = i / n
        x = x0 + (x1 - x0) * t
        y = y0 + (y1 - y0) * t
        pts.append((int(math.floor(x + 0.5)) if x1 >= x0 else int(math.ceil(x - 0.5)),
                    int(math.floor(y + 0.5)) if y1 >= y0 else int(math.ceil(y - 0.5))))
    return pts


def test_axis_aligned_and_diagonal():
    assert segments.rasterize_line((0, 0), (3, 0)) == [(0, 0), (1, 0), (2, 0), (3, 0)]
    assert segments.rasterize_line((0, 0), (2, 2)) == [(0, 0), (1, 1), (2, 2)]


def test_shallow_line_matches_dda_oracle():
    assert segments.rasterize_line((0, 0), (5, 2)) == dda_line((0, 0), (5, 2))
    assert segments.rasterize_line((0, 0), (5, 2)) == [(0, 0), (1, 0), (2, 1), (3, 1), (4, 2), (5, 2)]


coords = st.tuples(st.integers(-12, 12), st.integers(-12, 12))


@given(coords, coords)
def test_rasterize_contract(p, q):
    line = segments.rasterize_line(p, q)
    assert line[0] == p and line[-1] == q
    assert len(line) == max(abs(p[0] - q[0]), abs(p[1] - q[1])) + 1
    assert segments.rasterize_line(q, p) == line[::-1]
    for a, b in zip(line, line[1:]):
        assert max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1


@given(st.integers(-9, 9), st.integers(-9, 9))
def test_bresenham_stays_within_half_pixel(dx, dy):
    # every rasterised pixel is within half a pixel of the ideal line along the minor axis
    line = segments.rasterize_line((0, 0), (dx, dy))
    for x, y in line:
        if abs(dx) >= abs(dy):
            assert abs(y - dy * x / dx) <= 0.5 + 1e-12 if dx else True
        else:
            assert abs(x - dx * y / dy) <= 0.5 + 1e-12


def test_offset_table_rejects_small_gamma():
    with pytest.raises(InvalidInput):
        segments.offset_table(1.5)


def test_offset_table_canonical_half_disc():
    t = segments.offset_table(3)
    pairs = set(zip(t.dx.tolist(), t.dy.tolist()))
    expected = {(dx, dy) for dx in range(-3, 4) for dy in range(0, 4)
                if (dy > 0 or dx > 0) and dx * dx + dy * dy < 9}
    assert pairs == expected
    assert not t.dx.flags.writeable


def test_single_pixel_has_no_segment():
    m = np.full((4, 4), IGNORE, np.int16)
    m[1, 1] = 0
    assert len(segments.enumerate_valid_segments(m, 3)) == 0


def test_distance_exactly_gamma_excluded():
    m = np.full((1, 6), IGNORE, np.int16)
    m[0, 0] = m[0, 4] = BACKGROUND
    assert len(segments.enumerate_valid_segments(m, 4)) == 0
    assert len(segments.enumerate_valid_segments(m, 4.01)) == 1


def test_ignore_in_middle():
    m = np.array([[0, IGNORE, BACKGROUND]], np.int16)
    sets = segments.enumerate_valid_segments(m, 2.5)
    assert sets.pairs() == {((0, 0), (2, 0))}


def brute_segments(m, gamma, num_classes):
    h, w = m.shape
    pts = [(x, y) for y in range(h) for x in range(w) if m[y, x] != IGNORE]
    out = {}
    for a, b in itertools.combinations(pts, 2):
        if (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 < gamma * gamma:
            key = tuple(sorted((a, b), key=lambda p: (p[1], p[0])))
            la, lb = m[a[1], a[0]], m[b[1], b[0]]
            out[key] = frozenset(c for c in range(num_classes) if (la == c) != (lb == c))
    return out


def random_label_map(rng, h, w, classes=3):
    states = np.array([IGNORE, BACKGROUND] + list(range(classes)), np.int16)
    return rng.choice(states, size=(h, w), p=[0.3, 0.3] + [0.4 / classes] * classes)


def _as_dict(sets):
    return {(s.xi, s.xj): s.labels for s in sets}


@pytest.mark.parametrize("seed", range(6))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = random_label_map(rng, int(rng.integers(1, 13)), int(rng.integers(1, 13)))
    gamma = float(rng.choice([2, 3, 4.5, 6]))
    sets = segments.build_segment_sets(m, gamma, 3)
    assert _as_dict(sets) == brute_segments(m, gamma, 3)


def test_label_rules():
    m = np.array([[0, BACKGROUND, 1, 0]], np.int16)
    d = _as_dict(segments.build_segment_sets(m, 4, 2))
    assert d[((0, 0), (1, 0))] == {0}
    assert d[((0, 0), (2, 0))] == {0, 1}
    assert d[((0, 0), (3, 0))] == frozenset()


def test_label_segments_rejects_ignore_endpoint():
    m = np.array([[0, 1]], np.int16)
    sets = segments.enumerate_valid_segments(m, 2)
    with pytest.raises(SegmentContractError):
        segments.label_segments(sets, np.array([[0, IGNORE]], np.int16), 2)


def test_set_algebra_and_cardinality():
    rng = np.random.default_rng(3)
    m = random_label_map(rng, 16, 16)
    sets = segments.build_segment_sets(m, 5, 3)
    n = len(sets)
    for c in range(3):
        pos, neg = set(sets.positive(c).tolist()), set(sets.negative(c).tolist())
        assert not pos & neg and len(pos) + len(neg) == n
    card = sets.labels.sum(axis=1)
    assert card.max() <= 2
    flat = m.ravel()
    si, sj = flat[sets.anchor], flat[sets.far_index()]
    two = card == 2
    assert np.all((si[two] >= 0) & (sj[two] >= 0) & (si[two] != sj[two]))
    negative_all = ~sets.positive_any
    assert np.array_equal(negative_all, np.logical_and.reduce([~sets.labels[:, c] for c in range(3)]))


def test_paths_start_and_end_at_endpoints():
    rng = np.random.default_rng(4)
    m = random_label_map(rng, 10, 10)
    sets = segments.build_segment_sets(m, 4, 3)
    idx = sets.pixel_index()
    xi, yi, xj, yj = sets.endpoints()
    assert np.array_equal(idx[:, 0], yi * 10 + xi)
    assert np.array_equal(idx[:, -1], yj * 10 + xj)
    for k in range(0, len(sets), 37):
        seg = sets.segment(k)
        assert [y * 10 + x for x, y in seg.pixels] == idx[k, :len(seg.pixels)].tolist()


def test_pair_count_scales_with_n_gamma_squared():
    m = np.zeros((40, 40), np.int16)
    for gamma in (3, 6, 10):
        n = len(segments.enumerate_valid_segments(m, gamma))
        assert n <= 0.5 * math.pi * m.size * gamma ** 2
        assert n >= 0.25 * math.pi * m.size * gamma ** 2 * 0.5


def test_cap_per_anchor():
    m = np.zeros((12, 12), np.int16)
    rng = np.random.default_rng(0)
    sets = segments.enumerate_valid_segments(m, 5, max_per_pixel=4, rng=rng)
    counts = np.bincount(sets.anchor, minlength=144)
    assert counts.max() <= 4
    full = segments.enumerate_valid_segments(m, 5)
    assert sets.pairs() <= full.pairs()


def test_debug_csv(tmp_path):
    m = np.array([[0, BACKGROUND, 1]], np.int16)
    sets = segments.build_segment_sets(m, 3, 2)
    segments.write_debug_csv(tmp_path / "s.csv", sets)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "xi,yi,xj,yj,labels"
    assert "0,0,2,0,0;1" in lines
