"""Boundary evaluation: tolerance matching, PR curves, MF at ODS and AP."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .imaging import InvalidInput


@dataclass(frozen=True)
class MatchConfig:
    """Matching radius in pixels; ``diag_fraction`` overrides it relative to the image diagonal."""

    tolerance: float = 2.0
    diag_fraction: float | None = None

    def __post_init__(self):
        if self.tolerance <= 0 or (self.diag_fraction is not None and self.diag_fraction <= 0):
            raise InvalidInput("tolerance must be positive")

    def resolve(self, height, width):
        if self.diag_fraction is None:
            return float(self.tolerance)
        return self.diag_fraction * math.hypot(height, width)


def match_offsets(tol):
    """Offsets ``(dy, dx)`` within Euclidean ``tol``, by distance then raster order.

    Also returns the squared distance of each offset.
    """
    r = int(math.floor(tol))
    offs = [(dy * dy + dx * dx, dy, dx)
            for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if dy * dy + dx * dx <= tol * tol]
    offs.sort()
    arr = np.array(offs, dtype=np.int64).reshape(-1, 3)
    return arr[:, 1].copy(), arr[:, 2].copy(), arr[:, 0].copy()


@numba.njit(cache=True)
def _greedy(pred, gt, dy, dx, d2):
    h, w = pred.shape
    used_p = np.zeros((h, w), dtype=np.bool_)
    used_g = np.zeros((h, w), dtype=np.bool_)
    tp = 0
    k = 0
    n = dy.shape[0]
    while k < n:
        end = k
        while end < n and d2[end] == d2[k]:
            end += 1
        for y in range(h):
            for x in range(w):
                if not pred[y, x] or used_p[y, x]:
                    continue
                for j in range(k, end):
                    gy = y + dy[j]
                    gx = x + dx[j]
                    if 0 <= gy < h and 0 <= gx < w and gt[gy, gx] and not used_g[gy, gx]:
                        used_p[y, x] = True
                        used_g[gy, gx] = True
                        tp += 1
                        break
        k = end
    return tp


def match_boundaries(pred_bits, gt_bits, tol=2.0):
    """Greedy one-to-one matching within Euclidean distance ``tol``.

    Pairs are taken in order of increasing distance; ties go to the prediction
    pixel first in raster order, then to the ground-truth pixel first in
    raster order.  Returns ``(tp, fp, fn)``.
    """
    pred = np.ascontiguousarray(pred_bits, dtype=np.bool_)
    gt = np.ascontiguousarray(gt_bits, dtype=np.bool_)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise InvalidInput(f"shape mismatch: {pred.shape} vs {gt.shape}")
    tp = int(_greedy(pred, gt, *match_offsets(tol)))
    return tp, int(pred.sum()) - tp, int(gt.sum()) - tp


@numba.njit(cache=True)
def _curve_counts(soft, gt, thresholds, dy, dx, d2, out):
    n_gt = 0
    for y in range(gt.shape[0]):
        for x in range(gt.shape[1]):
            if gt[y, x]:
                n_gt += 1
    for t in range(thresholds.shape[0]):
        pred = soft >= thresholds[t]
        tp = _greedy(pred, gt, dy, dx, d2)
        out[t, 0] += tp
        out[t, 1] += pred.sum() - tp
        out[t, 2] += n_gt - tp


def default_thresholds(n=99):
    return np.arange(1, n + 1) / (n + 1)


@dataclass
class PrCurve:
    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def precision(self):
        # a threshold with no predictions has nothing wrong: precision 1
        denom = self.tp + self.fp
        return np.where(denom > 0, self.tp / np.maximum(denom, 1), 1.0)

    @property
    def recall(self):
        denom = self.tp + self.fn
        return np.where(denom > 0, self.tp / np.maximum(denom, 1), 1.0)

    @property
    def f(self):
        p, r = self.precision, self.recall
        s = p + r
        return np.where(s > 0, 2 * p * r / np.where(s > 0, s, 1.0), 0.0)


def pr_curve(soft_preds, gts, tol=2.0, n_thresholds=99, thresholds=None) -> PrCurve:
    """Dataset-summed counts over a shared threshold grid.

    ``soft_preds`` and ``gts`` are sequences of ``(H, W)`` maps; a sample is
    binarised with ``soft >= t``.
    """
    if len(soft_preds) == 0 or len(soft_preds) != len(gts):
        raise InvalidInput("need one ground-truth map per prediction and at least one sample")
    th = default_thresholds(n_thresholds) if thresholds is None else np.asarray(thresholds, float)
    counts = np.zeros((len(th), 3), dtype=np.int64)
    offsets = match_offsets(tol)
    for soft, gt in zip(soft_preds, gts):
        soft = np.ascontiguousarray(soft, dtype=np.float64)
        gt = np.ascontiguousarray(gt, dtype=np.bool_)
        if soft.shape != gt.shape or soft.ndim != 2:
            raise InvalidInput(f"shape mismatch: {soft.shape} vs {gt.shape}")
        _curve_counts(soft, gt, th, *offsets, counts)
    return PrCurve(th, counts[:, 0].copy(), counts[:, 1].copy(), counts[:, 2].copy())


def mf_ods(curve: PrCurve):
    """Best F over the shared thresholds: ``(MF, threshold, index)``; first best wins."""
    f = curve.f
    k = int(np.argmax(f))
    return float(f[k]), float(curve.thresholds[k]), k


def average_precision(curve: PrCurve):
    """Area under the interpolated PR curve.

    Thresholds without predictions are dropped, points sharing a recall keep
    their best precision, precision is replaced by its running max from high
    recall down, a point at recall 0 is prepended with the first interpolated
    precision, and the result is integrated with the trapezoid rule.
    """
    keep = (curve.tp + curve.fp) > 0
    if not keep.any():
        return 0.0
    r, inv = np.unique(curve.recall[keep], return_inverse=True)
    # one point per recall value, carrying the best precision reached there
    p = np.zeros(len(r))
    np.maximum.at(p, inv.ravel(), curve.precision[keep])
    p = np.maximum.accumulate(p[::-1])[::-1]
    r = np.r_[0.0, r]
    p = np.r_[p[0], p]
    return float(np.sum((r[1:] - r[:-1]) * (p[1:] + p[:-1]) / 2))


def class_agnostic(maps, bits):
    """Collapse channels: max over predicted scores, OR over ground truth."""
    return np.asarray(maps).max(axis=0), np.asarray(bits).any(axis=0)


@dataclass
class ClassMetrics:
    name: str
    mf: float
    best_threshold: float
    ap: float
    tp: int
    fp: int
    fn: int
    curve: PrCurve


def _metrics(name, curve):
    mf, t, k = mf_ods(curve)
    return ClassMetrics(name, mf, t, average_precision(curve),
                        int(curve.tp[k]), int(curve.fp[k]), int(curve.fn[k]), curve)


def evaluate(soft_maps, gt_bits, tol=2.0, n_thresholds=99, class_aware=True, agnostic=True):
    """Per-class and class-agnostic metrics for ``(C, H, W)`` predictions.

    Returns a list of :class:`ClassMetrics`; class rows are named by class id,
    the agnostic row is named ``"agnostic"``.
    """
    soft_maps = [np.asarray(m) for m in soft_maps]
    gt_bits = [np.asarray(g) for g in gt_bits]
    rows = []
    if class_aware:
        for c in range(soft_maps[0].shape[0]):
            curve = pr_curve([m[c] for m in soft_maps], [g[c] for g in gt_bits], tol, n_thresholds)
            rows.append(_metrics(str(c), curve))
    if agnostic:
        pairs = [class_agnostic(m, g) for m, g in zip(soft_maps, gt_bits)]
        curve = pr_curve([p for p, _ in pairs], [g for _, g in pairs], tol, n_thresholds)
        rows.append(_metrics("agnostic", curve))
    return rows


def mean_mf(rows):
    vals = [r.mf for r in rows if r.name != "agnostic"]
    return float(np.mean(vals)) if vals else float("nan")


def mean_ap(rows):
    vals = [r.ap for r in rows if r.name != "agnostic"]
    return float(np.mean(vals)) if vals else float("nan")


def write_metrics(out_dir, rows, svg=False):
    """``metrics.csv`` plus one ``pr_<class>.csv`` (and optional ``.svg``) per row."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "MF", "best_threshold", "AP", "tp", "fp", "fn"])
        for r in rows:
            w.writerow([r.name, f"{r.mf:.6f}", f"{r.best_threshold:.2f}", f"{r.ap:.6f}",
                        r.tp, r.fp, r.fn])
        class_rows = [r for r in rows if r.name != "agnostic"]
        if class_rows:
            w.writerow(["mean", f"{mean_mf(rows):.6f}", "", f"{mean_ap(rows):.6f}", "", "", ""])
    for r in rows:
        c = r.curve
        with open(out_dir / f"pr_{r.name}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "precision", "recall", "F"])
            for t, p, rc, fv in zip(c.thresholds, c.precision, c.recall, c.f):
                w.writerow([f"{t:.2f}", f"{p:.6f}", f"{rc:.6f}", f"{fv:.6f}"])
        if svg:
            write_pr_svg(out_dir / f"pr_{r.name}.svg", c, title=f"class {r.name}")


def read_metrics(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_pr_svg(path, curves, title="", labels=None, size=320):
    """Minimal SVG line plot of precision against recall for one or more curves."""
    if isinstance(curves, PrCurve):
        curves = [curves]
    labels = labels or [""] * len(curves)
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    pad = 30
    span = size - 2 * pad

    def xy(r, p):
        return pad + r * span, size - pad - p * span

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#888"/>',
             f'<text x="{size / 2}" y="{pad - 10}" text-anchor="middle" font-size="12">{title}</text>',
             f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="11">recall</text>',
             f'<text x="10" y="{size / 2}" font-size="11" transform="rotate(-90 10 {size / 2})">precision</text>']
    for i, (c, name) in enumerate(zip(curves, labels)):
        keep = (c.tp + c.fp) > 0
        pts = sorted(zip(c.recall[keep], c.precision[keep]))
        path_pts = " ".join("%.1f,%.1f" % xy(r, p) for r, p in pts)
        colour = colours[i % len(colours)]
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{path_pts}"/>')
        if name:
            parts.append(f'<text x="{pad + 6}" y="{pad + 14 + 14 * i}" font-size="11" fill="{colour}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
