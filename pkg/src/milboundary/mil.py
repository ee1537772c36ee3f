"""Max-aggregated MIL losses over line-segment bags, with analytic gradients.

A bag's score is the largest map value on its rasterised path.  The gradient
of that max is routed to the first pixel (in path order from the anchor) that
attains it.  Probabilities are clamped to ``[eps, 1 - eps]`` before the log;
the clamp has zero derivative outside that interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np

from .imaging import IGNORE, InvalidInput
from .segments import LineSegment, SegmentContractError, SegmentSets, offset_table

EPS = 1e-7
DEFAULT_LAMBDA = 0.25


@dataclass(frozen=True)
class BagScore:
    value: float
    argmax_pixel: tuple
    segment: LineSegment
    class_id: int | None = None


def bag_score(score_map, seg: LineSegment, class_id=None) -> BagScore:
    if not seg.pixels:
        raise SegmentContractError("segment has no pixels")
    values = [score_map[y, x] for x, y in seg.pixels]
    k = int(np.argmax(values))
    return BagScore(float(values[k]), seg.pixels[k], seg, class_id)


def bag_scores(score_map, sets: SegmentSets):
    """Vectorised bag maxima: ``(values, flat argmax pixel)`` per segment."""
    if len(sets) == 0:
        return np.zeros(0, dtype=score_map.dtype), np.zeros(0, dtype=np.int64)
    idx = sets.pixel_index()
    vals = score_map.ravel()[idx]
    k = vals.argmax(axis=1)
    rows = np.arange(len(idx))
    return vals[rows, k], idx[rows, k]


@dataclass
class LossTerm:
    """Loss value and gradient; the flags mark dropped (empty) bag sets."""

    value: float
    grad: np.ndarray
    empty_positive: bool = False
    empty_negative: bool = False


def _bce_terms(b, positive, eps):
    """Per-bag -log terms and d/db of the clamped log, for positive / negative bags."""
    clipped = np.clip(b, eps, 1.0 - eps)
    inside = (b > eps) & (b < 1.0 - eps)
    pos_loss = -np.log(clipped)
    neg_loss = -np.log1p(-clipped)
    pos_grad = np.where(inside, -1.0 / clipped, 0.0)
    neg_grad = np.where(inside, 1.0 / (1.0 - clipped), 0.0)
    loss = np.where(positive, pos_loss, neg_loss)
    grad = np.where(positive, pos_grad, neg_grad)
    return loss, grad


def _balanced_term(score_map, sets, positive, eps):
    """Separately normalised positive and negative BCE over one map."""
    b, where = bag_scores(score_map, sets)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    loss, dldb = _bce_terms(b, positive, eps)
    weight = np.zeros(len(positive))
    if n_pos:
        weight[positive] = 1.0 / n_pos
    if n_neg:
        weight[~positive] = 1.0 / n_neg
    value = float(np.dot(loss, weight))
    grad = np.bincount(where, weights=dldb * weight, minlength=score_map.size)
    return value, grad.reshape(score_map.shape), n_pos == 0, n_neg == 0


def loss_ag(b_ag, sets: SegmentSets, eps=EPS) -> LossTerm:
    """Class-agnostic loss: positives are segments positive for any class."""
    b_ag = np.asarray(b_ag)
    value, grad, no_pos, no_neg = _balanced_term(b_ag, sets, sets.positive_any, eps)
    return LossTerm(value, grad, no_pos, no_neg)


def loss_aw(b_aw, sets: SegmentSets, eps=EPS) -> LossTerm:
    """Class-aware loss, normalised per class and averaged over the C classes."""
    b_aw = np.asarray(b_aw)
    num_classes = b_aw.shape[0]
    if num_classes == 0:
        raise InvalidInput("class-aware map has no channels")
    labels = sets._need_labels()
    if labels.shape[1] != num_classes:
        raise InvalidInput(f"segments carry {labels.shape[1]} classes, map has {num_classes}")
    total = 0.0
    grad = np.zeros(b_aw.shape, dtype=np.float64)
    no_pos = no_neg = False
    for c in range(num_classes):
        v, g, p, n = _balanced_term(b_aw[c], sets, labels[:, c], eps)
        total += v
        grad[c] = g
        no_pos |= p
        no_neg |= n
    return LossTerm(total / num_classes, grad / num_classes, no_pos, no_neg)


@dataclass
class LossBreakdown:
    loss_ag: float
    loss_aw: float
    lam: float
    total: float
    grad_ag: np.ndarray
    grad_aw: np.ndarray
    flags: dict = field(default_factory=dict)


def total_loss(b_ag, b_aw, sets: SegmentSets, lam=DEFAULT_LAMBDA, eps=EPS) -> LossBreakdown:
    """``L_aw + lam * L_ag`` with gradients for both branch outputs."""
    if lam < 0:
        raise InvalidInput("lambda must be non-negative")
    aw = loss_aw(b_aw, sets, eps)
    ag = loss_ag(b_ag, sets, eps)
    return LossBreakdown(
        loss_ag=ag.value,
        loss_aw=aw.value,
        lam=lam,
        total=aw.value + lam * ag.value,
        grad_ag=lam * ag.grad,
        grad_aw=aw.grad,
        flags={"ag_empty_positive": ag.empty_positive, "ag_empty_negative": ag.empty_negative,
               "aw_empty_positive": aw.empty_positive, "aw_empty_negative": aw.empty_negative},
    )


# ----------------------------------------------------------------------------
# fused path: enumerate, label and score segments straight from the label map

@lru_cache(maxsize=32)
def _path_trie(gamma):
    """Prefix tree of all segment paths of ``offset_table(gamma)``.

    Node 0 is the anchor itself; every other node extends its parent's path
    by one pixel.  Parents precede children, so one forward sweep yields the
    running max along every path.  ``target[n]`` is the offset id whose path
    ends at node ``n`` (or -1).
    """
    t = offset_table(gamma)
    index = {(): 0}
    parent, ndx, ndy, target = [-1], [0], [0], [-1]
    for k in range(len(t)):
        path = tuple(zip(t.path_dx[k, :t.path_len[k]].tolist(), t.path_dy[k, :t.path_len[k]].tolist()))
        for l in range(2, len(path) + 1):
            key = path[1:l]
            if key not in index:
                index[key] = len(parent)
                parent.append(index[path[1:l - 1]])
                ndx.append(path[l - 1][0])
                ndy.append(path[l - 1][1])
                target.append(-1)
        target[index[path[1:]]] = k
    return (np.array(parent), np.array(ndx), np.array(ndy), np.array(target))


@numba.njit(cache=True)
def _dense_kernel(maps, labels, parent, ndx, ndy, target, eps,
                  loss_pos, loss_neg, n_pos, n_neg, grad_pos, grad_neg):
    h, w, m_count = maps.shape
    n_nodes = parent.shape[0]
    best = np.empty((n_nodes, m_count))
    arg_y = np.empty((n_nodes, m_count), dtype=np.int64)
    arg_x = np.empty((n_nodes, m_count), dtype=np.int64)
    inside_img = np.empty(n_nodes, dtype=np.bool_)
    for y in range(h):
        for x in range(w):
            si = labels[y, x]
            if si == IGNORE:
                continue
            inside_img[0] = True
            for m in range(m_count):
                best[0, m] = maps[y, x, m]
                arg_y[0, m] = y
                arg_x[0, m] = x
            for n in range(1, n_nodes):
                py = y + ndy[n]
                px = x + ndx[n]
                if not inside_img[parent[n]] or py >= h or px < 0 or px >= w:
                    inside_img[n] = False
                    continue
                inside_img[n] = True
                q = parent[n]
                # strict comparison keeps the first maximum along the path
                for m in range(m_count):
                    v = maps[py, px, m]
                    if v > best[q, m]:
                        best[n, m] = v
                        arg_y[n, m] = py
                        arg_x[n, m] = px
                    else:
                        best[n, m] = best[q, m]
                        arg_y[n, m] = arg_y[q, m]
                        arg_x[n, m] = arg_x[q, m]
                if target[n] < 0:
                    continue
                sj = labels[py, px]
                if sj == IGNORE:
                    continue
                for m in range(m_count):
                    if m == 0:
                        positive = si != sj
                    else:
                        positive = (si == m - 1) != (sj == m - 1)
                    b = best[n, m]
                    inside = b > eps and b < 1.0 - eps
                    bc = min(max(b, eps), 1.0 - eps)
                    if positive:
                        n_pos[m] += 1
                        loss_pos[m] -= np.log(bc)
                        if inside:
                            grad_pos[m, arg_y[n, m], arg_x[n, m]] -= 1.0 / bc
                    else:
                        n_neg[m] += 1
                        loss_neg[m] -= np.log1p(-bc)
                        if inside:
                            grad_neg[m, arg_y[n, m], arg_x[n, m]] += 1.0 / (1.0 - bc)


def dense_total_loss(b_ag, b_aw, label_map, gamma, lam=DEFAULT_LAMBDA, eps=EPS) -> LossBreakdown:
    """Same value and gradients as ``total_loss`` over all valid segments of
    ``label_map``, computed in one pass without materialising the segments."""
    if lam < 0:
        raise InvalidInput("lambda must be non-negative")
    b_aw = np.asarray(b_aw, dtype=np.float64)
    num_classes = b_aw.shape[0]
    if num_classes == 0:
        raise InvalidInput("class-aware map has no channels")
    maps = np.ascontiguousarray(
        np.concatenate([np.asarray(b_ag, dtype=np.float64)[None], b_aw]).transpose(1, 2, 0))
    h, w, m_count = maps.shape
    trie = _path_trie(gamma)
    loss_pos = np.zeros(m_count)
    loss_neg = np.zeros(m_count)
    n_pos = np.zeros(m_count, dtype=np.int64)
    n_neg = np.zeros(m_count, dtype=np.int64)
    grad_pos = np.zeros((m_count, h, w))
    grad_neg = np.zeros((m_count, h, w))
    _dense_kernel(maps, np.ascontiguousarray(label_map, dtype=np.int16), *trie, eps,
                  loss_pos, loss_neg, n_pos, n_neg, grad_pos, grad_neg)
    values = np.zeros(m_count)
    grads = np.zeros((m_count, h, w))
    for m in range(m_count):
        if n_pos[m]:
            values[m] += loss_pos[m] / n_pos[m]
            grads[m] += grad_pos[m] / n_pos[m]
        if n_neg[m]:
            values[m] += loss_neg[m] / n_neg[m]
            grads[m] += grad_neg[m] / n_neg[m]
    l_ag = float(values[0])
    l_aw = float(values[1:].sum() / num_classes)
    return LossBreakdown(
        loss_ag=l_ag,
        loss_aw=l_aw,
        lam=lam,
        total=l_aw + lam * l_ag,
        grad_ag=lam * grads[0],
        grad_aw=grads[1:] / num_classes,
        flags={"ag_empty_positive": n_pos[0] == 0, "ag_empty_negative": n_neg[0] == 0,
               "aw_empty_positive": bool((n_pos[1:] == 0).any()),
               "aw_empty_negative": bool((n_neg[1:] == 0).any())},
    )
