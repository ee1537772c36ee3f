"""Confident label maps from class attention maps.

A confident label map stores one state per pixel: a class id, ``BACKGROUND``
or ``IGNORE`` (see :mod:`milboundary.imaging`).  The per-class binary maps used
for segment labelling are ``labels == c``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy import ndimage

from .imaging import BACKGROUND, IGNORE, InvalidInput


@dataclass(frozen=True)
class SeedThresholds:
    fg_keep_fraction: float = 0.70
    bg_keep_fraction: float = 0.05

    def __post_init__(self):
        for name in ("fg_keep_fraction", "bg_keep_fraction"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise InvalidInput(f"{name} must lie in (0, 1), got {v}")


def confident_regions(cams, image_labels, th: SeedThresholds = SeedThresholds()):
    """Threshold normalised CAMs into class / background / ignore states.

    Only classes listed in ``image_labels`` compete.  A pixel takes the best
    present class when that class scores at least ``1 - fg_keep_fraction``,
    is background when no present class scores above ``bg_keep_fraction``,
    and is ignored otherwise.  Ties go to the lowest class id.
    """
    cams = np.asarray(cams)
    labels = sorted(set(int(c) for c in image_labels))
    if not labels:
        raise InvalidInput("image_labels must not be empty")
    if labels[0] < 0 or labels[-1] >= cams.shape[0]:
        raise InvalidInput("image_labels reference classes outside the CAM stack")
    present = cams[labels]
    # argmax returns the first maximum, i.e. the lowest class id on ties
    best = present.argmax(axis=0)
    score = np.take_along_axis(present, best[None], axis=0)[0]
    out = np.full(score.shape, IGNORE, dtype=np.int16)
    is_fg = score >= 1.0 - th.fg_keep_fraction
    out[is_fg] = np.asarray(labels, dtype=np.int16)[best[is_fg]]
    out[score <= th.bg_keep_fraction] = BACKGROUND
    return out


Refiner = Callable[[np.ndarray, np.ndarray], np.ndarray]


def identity_refiner(seed_map, image=None):
    return np.array(seed_map, copy=True)


def majority_refiner(k=3, min_share=0.6) -> Refiner:
    """Local vote standing in for dense CRF refinement.

    Every non-ignore pixel takes the most common non-ignore state of its
    ``k x k`` window (the window is clipped at the image border) when that
    state holds at least ``min_share`` of the votes; otherwise it becomes
    ignore.  Ignore pixels stay ignore.
    """
    if k < 1 or k % 2 == 0:
        raise InvalidInput("majority window must be odd and positive")
    footprint = np.ones((k, k), dtype=np.int32)
    share = Fraction(min_share).limit_denominator(1000)

    def refine(seed_map, image=None):
        seed_map = np.asarray(seed_map)
        states = [int(s) for s in np.unique(seed_map) if s != IGNORE]
        if not states:
            return seed_map.copy()
        counts = np.stack([
            ndimage.correlate((seed_map == s).astype(np.int32), footprint, mode="constant", cval=0)
            for s in states
        ])
        total = counts.sum(axis=0)
        winner = counts.argmax(axis=0)
        top = np.take_along_axis(counts, winner[None], axis=0)[0]
        out = np.asarray(states, dtype=np.int16)[winner]
        # exact integer form of top / total >= min_share
        out[top * share.denominator < share.numerator * total] = IGNORE
        out[seed_map == IGNORE] = IGNORE
        return out

    return refine


def make_refiner(strategy="majority", k=3) -> Refiner:
    if strategy == "identity":
        return identity_refiner
    if strategy == "majority":
        return majority_refiner(k)
    raise InvalidInput(f"unknown refinement strategy {strategy!r}")


def refine_labels(seed_map, image=None, strategy="majority", k=3):
    return make_refiner(strategy, k)(seed_map, image)


def gt_label_map(gt_mask):
    """Ground-truth mask used directly as a fully confident label map."""
    return np.asarray(gt_mask, dtype=np.int16).copy()
