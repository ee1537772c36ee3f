"""Valid line segments between confident pixels and their boundary labels.

A segment joins two confident pixels closer than ``gamma``.  It is positive
for class ``c`` when exactly one endpoint is labelled ``c``.  Segments are
stored in bulk: an anchor pixel (the endpoint that comes first in raster
order) plus an index into a per-``gamma`` table of relative offsets, each with
its pre-rasterised pixel path.  Enumeration scans that table for every pixel,
so its cost grows with ``N * gamma**2``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .imaging import IGNORE, InvalidInput


class SegmentContractError(RuntimeError):
    pass


def _bresenham(x0, y0, x1, y1):
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    out = []
    while True:
        out.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize_line(p, q):
    """Bresenham pixels from ``p`` to ``q`` (``(x, y)`` pairs), both inclusive.

    The path is always traced from the raster-order-first endpoint, so
    ``rasterize_line(q, p)`` is exactly the reverse of ``rasterize_line(p, q)``.
    """
    (x0, y0), (x1, y1) = (int(p[0]), int(p[1])), (int(q[0]), int(q[1]))
    if (y1, x1) < (y0, x0):
        return _bresenham(x1, y1, x0, y0)[::-1]
    return _bresenham(x0, y0, x1, y1)


@dataclass(frozen=True)
class OffsetTable:
    """Relative endpoint offsets of all canonical segments shorter than gamma."""

    gamma: float
    dx: np.ndarray
    dy: np.ndarray
    # per offset: path pixels relative to the anchor, padded by repeating the
    # far endpoint, which changes neither a max nor its first argmax
    path_dx: np.ndarray
    path_dy: np.ndarray
    path_len: np.ndarray

    def __len__(self):
        return len(self.dx)

    @property
    def max_len(self):
        return self.path_dx.shape[1]


@lru_cache(maxsize=32)
def offset_table(gamma) -> OffsetTable:
    if gamma < 2:
        raise InvalidInput(f"gamma must be >= 2, got {gamma}")
    reach = int(math.ceil(gamma))
    offsets = [(dx, dy)
               for dy in range(0, reach + 1)
               for dx in range(-reach, reach + 1)
               if (dy > 0 or dx > 0) and dx * dx + dy * dy < gamma * gamma]
    paths = [rasterize_line((0, 0), o) for o in offsets]
    length = max(len(p) for p in paths)
    pdx = np.array([[pt[0] for pt in p] + [p[-1][0]] * (length - len(p)) for p in paths])
    pdy = np.array([[pt[1] for pt in p] + [p[-1][1]] * (length - len(p)) for p in paths])
    table = OffsetTable(
        gamma=gamma,
        dx=np.array([o[0] for o in offsets]),
        dy=np.array([o[1] for o in offsets]),
        path_dx=pdx,
        path_dy=pdy,
        path_len=np.array([len(p) for p in paths]),
    )
    for a in (table.dx, table.dy, table.path_dx, table.path_dy, table.path_len):
        a.setflags(write=False)
    return table


@dataclass(frozen=True)
class LineSegment:
    xi: tuple
    xj: tuple
    pixels: list
    labels: frozenset = frozenset()


@dataclass
class SegmentSets:
    """All valid segments of one label map, optionally with class labels.

    ``labels[k, c]`` is True when segment ``k`` belongs to the positive set of
    class ``c``; the negative set of ``c`` is the complement.
    """

    height: int
    width: int
    gamma: float
    anchor: np.ndarray
    offset_id: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.anchor)

    @property
    def table(self):
        return offset_table(self.gamma)

    @property
    def num_classes(self):
        return None if self.labels is None else self.labels.shape[1]

    def endpoints(self):
        """``(xi, yi, xj, yj)`` integer arrays."""
        t = self.table
        yi, xi = np.divmod(self.anchor, self.width)
        return xi, yi, xi + t.dx[self.offset_id], yi + t.dy[self.offset_id]

    def far_index(self):
        t = self.table
        return self.anchor + t.dy[self.offset_id] * self.width + t.dx[self.offset_id]

    def pixel_index(self):
        """``(n, L)`` flat pixel indices of every path, padded per segment."""
        t = self.table
        rel = t.path_dy * self.width + t.path_dx
        return self.anchor[:, None] + rel[self.offset_id]

    def _need_labels(self):
        if self.labels is None:
            raise SegmentContractError("segments have not been labelled")
        return self.labels

    def positive(self, c):
        return np.flatnonzero(self._need_labels()[:, c])

    def negative(self, c):
        return np.flatnonzero(~self._need_labels()[:, c])

    @property
    def positive_any(self):
        """Mask of the union of all per-class positive sets."""
        return self._need_labels().any(axis=1)

    def segment(self, k) -> LineSegment:
        xi, yi, xj, yj = (int(a[k]) for a in self.endpoints())
        labels = frozenset() if self.labels is None else frozenset(
            int(c) for c in np.flatnonzero(self.labels[k]))
        return LineSegment((xi, yi), (xj, yj), rasterize_line((xi, yi), (xj, yj)), labels)

    def __iter__(self):
        for k in range(len(self)):
            yield self.segment(k)

    def pairs(self):
        """Set of canonical ``((xi, yi), (xj, yj))`` endpoint pairs."""
        xi, yi, xj, yj = self.endpoints()
        return set(zip(zip(xi.tolist(), yi.tolist()), zip(xj.tolist(), yj.tolist())))


def enumerate_valid_segments(label_map, gamma, max_per_pixel=None, rng=None) -> SegmentSets:
    """Unordered pairs of non-ignore pixels with Euclidean distance below gamma.

    Every pair appears once, anchored at its raster-order-first endpoint.
    Segments come out grouped by offset, anchors in raster order within a
    group.  ``max_per_pixel`` optionally keeps a seeded random subset of at
    most that many segments per anchor pixel.
    """
    label_map = np.asarray(label_map)
    h, w = label_map.shape
    table = offset_table(gamma)
    valid = label_map != IGNORE
    anchors, ids = [], []
    for k in range(len(table)):
        dx, dy = int(table.dx[k]), int(table.dy[k])
        x0, x1 = max(0, -dx), w - max(0, dx)
        if dy >= h or x1 <= x0:
            continue
        both = valid[:h - dy, x0:x1] & valid[dy:, x0 + dx:x1 + dx]
        ys, xs = np.nonzero(both)
        if ys.size:
            anchors.append(ys * w + xs + x0)
            ids.append(np.full(ys.size, k, dtype=np.int32))
    if anchors:
        anchor = np.concatenate(anchors).astype(np.int64)
        offset_id = np.concatenate(ids)
    else:
        anchor = np.zeros(0, dtype=np.int64)
        offset_id = np.zeros(0, dtype=np.int32)
    if max_per_pixel is not None and len(anchor):
        anchor, offset_id = _cap_per_anchor(anchor, offset_id, max_per_pixel, rng)
    return SegmentSets(h, w, gamma, anchor, offset_id)


def _cap_per_anchor(anchor, offset_id, cap, rng):
    rng = np.random.default_rng(0) if rng is None else rng
    keys = rng.random(len(anchor))
    order = np.lexsort((keys, anchor))
    sorted_anchor = anchor[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_anchor)) + 1]
    group_start = np.repeat(starts, np.diff(np.r_[starts, len(order)]))
    rank = np.arange(len(order)) - group_start
    keep = np.sort(order[rank < cap])
    return anchor[keep], offset_id[keep]


def label_segments(sets: SegmentSets, label_map, num_classes) -> SegmentSets:
    """Attach per-class positive labels: class ``c`` iff exactly one endpoint is ``c``."""
    flat = np.asarray(label_map).ravel()
    si = flat[sets.anchor]
    sj = flat[sets.far_index()]
    if np.any(si == IGNORE) or np.any(sj == IGNORE):
        raise SegmentContractError("segment endpoint lies in an ignore region")
    classes = np.arange(num_classes)
    labels = (si[:, None] == classes) != (sj[:, None] == classes)
    return SegmentSets(sets.height, sets.width, sets.gamma, sets.anchor, sets.offset_id, labels)


def build_segment_sets(label_map, gamma, num_classes, max_per_pixel=None, rng=None):
    return label_segments(enumerate_valid_segments(label_map, gamma, max_per_pixel, rng),
                          label_map, num_classes)


def write_debug_csv(path, sets: SegmentSets):
    """Dump ``xi, yi, xj, yj, labels`` rows; labels joined with ``;``."""
    xi, yi, xj, yj = sets.endpoints()
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["xi", "yi", "xj", "yj", "labels"])
        for k in range(len(sets)):
            labels = "" if sets.labels is None else ";".join(
                str(c) for c in np.flatnonzero(sets.labels[k]))
            writer.writerow([int(xi[k]), int(yi[k]), int(xj[k]), int(yj[k]), labels])
