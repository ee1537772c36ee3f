"""Shared test oracles."""

import numpy as np

from milboundary import segments
from milboundary.imaging import BACKGROUND, IGNORE


def random_label_map(rng, h, w, classes=3, ignore=0.3):
    states = np.array([IGNORE, BACKGROUND] + list(range(classes)), np.int16)
    rest = (1 - ignore) / (classes + 1)
    return rng.choice(states, size=(h, w), p=[ignore] + [rest] * (classes + 1))


def random_sets(rng, h, w, gamma=3.0, classes=3):
    lab = random_label_map(rng, h, w, classes)
    return lab, segments.build_segment_sets(lab, gamma, classes)


def tie_free_map(rng, shape):
    """Distinct values in (0.05, 0.95) so argmax choices are stable under small steps."""
    n = int(np.prod(shape))
    vals = 0.05 + 0.9 * (rng.permutation(n) + rng.random(n) * 0.5) / n
    return vals.reshape(shape)


def central_difference(f, x, idx, h=1e-6):
    old = x[idx]
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    return (up - down) / (2 * h)


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
