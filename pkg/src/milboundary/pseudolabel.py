"""Hard pseudo boundary labels from a trained boundary network.

The pipeline per image: multi-scale / flip aggregation of the network outputs,
zeroing of classes absent from the image labels, per-channel non-maximum
suppression along the boundary normal, and an Otsu cut on the surviving
scores pooled over the relevant channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import net
from .imaging import InvalidInput, resize_bilinear


@dataclass(frozen=True)
class MsfConfig:
    scales: tuple = (0.75, 1.0, 1.25)
    use_flip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not self.scales or min(self.scales) <= 0:
            raise InvalidInput("scales must be a non-empty list of positive numbers")


@dataclass(frozen=True)
class NmsConfig:
    radius: int = 10
    multiplier: float = 1.1
    sigma: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if self.radius < 1:
            raise InvalidInput("NMS radius must be >= 1")
        if self.multiplier < 1:
            raise InvalidInput("NMS multiplier must be >= 1")
        if self.sigma < 0:
            raise InvalidInput("NMS sigma must be non-negative")


def _passes(msf: MsfConfig):
    for s in msf.scales:
        yield s, False
        if msf.use_flip:
            yield s, True


def single_pass(params, x, cfg: net.NetConfig, scale=1.0, flip=False):
    """``(b_ag, b_aw)`` of one augmented view, mapped back to the input frame."""
    h, w = x.shape[1:]
    if flip:
        x = x[:, :, ::-1]
    if scale != 1.0:
        x = resize_bilinear(x, max(8, int(round(w * scale))), max(8, int(round(h * scale))))
    out = net.forward(params, np.ascontiguousarray(x), cfg)
    b_ag, b_aw = out.b_ag, out.b_aw
    if b_ag.shape != (h, w):
        b_ag = resize_bilinear(b_ag, w, h)
        b_aw = resize_bilinear(b_aw, w, h)
    if flip:
        b_ag, b_aw = b_ag[:, ::-1], b_aw[:, :, ::-1]
    return np.asarray(b_ag, dtype=np.float64), np.asarray(b_aw, dtype=np.float64)


def msf_predict(params, image, cfg: net.NetConfig, msf: MsfConfig = MsfConfig()):
    """Mean of the branch outputs over all scales (and flips); returns ``(b_ag, b_aw, b_final)``.

    The final map is rebuilt from the averaged branches.
    """
    x = net.preprocess(image, dtype=params["s1.w"].dtype)
    ag_sum = aw_sum = None
    n = 0
    for scale, flip in _passes(msf):
        b_ag, b_aw = single_pass(params, x, cfg, scale, flip)
        ag_sum = b_ag if ag_sum is None else ag_sum + b_ag
        aw_sum = b_aw if aw_sum is None else aw_sum + b_aw
        n += 1
    b_ag, b_aw = ag_sum / n, aw_sum / n
    return b_ag, b_aw, b_aw * b_ag


def filter_irrelevant_classes(maps, image_labels):
    """Zero every channel whose class is not in ``image_labels``."""
    maps = np.asarray(maps)
    keep = np.zeros(maps.shape[0], dtype=bool)
    labels = [int(c) for c in image_labels]
    if any(c < 0 or c >= maps.shape[0] for c in labels):
        raise InvalidInput("image_labels reference classes outside the map")
    keep[labels] = True
    out = maps.copy()
    out[~keep] = 0
    return out


def normal_orientation(score, sigma=1.0):
    """Angle of the boundary normal at every pixel.

    The smoothed map's Hessian is estimated by applying Sobel filters twice;
    the normal is the eigenvector of largest curvature magnitude, which points
    across a ridge.
    """
    s = ndimage.gaussian_filter(score, sigma, mode="nearest") if sigma > 0 else score
    gx = ndimage.sobel(s, axis=1, mode="nearest")
    gy = ndimage.sobel(s, axis=0, mode="nearest")
    gxx = ndimage.sobel(gx, axis=1, mode="nearest")
    gyy = ndimage.sobel(gy, axis=0, mode="nearest")
    gxy = ndimage.sobel(gx, axis=0, mode="nearest")
    theta = 0.5 * np.arctan2(2.0 * gxy, gxx - gyy)
    # theta follows the larger eigenvalue; switch when the other one dominates
    return np.where(gxx + gyy < 0, theta + np.pi / 2, theta)


def _bilinear_at(values, xs, ys):
    h, w = values.shape
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2) if w > 1 else np.zeros(xs.shape, np.intp)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2) if h > 1 else np.zeros(ys.shape, np.intp)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = values[y0, x0] * (1 - fx) + values[y0, x1] * fx
    bottom = values[y1, x0] * (1 - fx) + values[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def _nms_once(score, cfg: NmsConfig):
    theta = normal_orientation(score, cfg.sigma)
    h, w = score.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = np.cos(theta), np.sin(theta)
    lhs = cfg.multiplier * score
    keep = np.ones(score.shape, dtype=bool)
    for k in range(1, cfg.radius + 1):
        for sign in (1.0, -1.0):
            keep &= lhs >= _bilinear_at(score, xs + sign * k * c, ys + sign * k * s)
    return np.where(keep, score, 0.0)


def nms_thin(score, cfg: NmsConfig = NmsConfig(), max_iter=100):
    """Suppress pixels dominated along their normal; survivors keep their score.

    A pixel survives when ``multiplier * score`` is at least every bilinear
    sample at distances ``1..radius`` on both sides of the normal.  The rule is
    reapplied to its own output until nothing changes, which makes the
    operator idempotent.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2:
        raise InvalidInput("nms_thin expects a single-channel map")
    current = score
    for _ in range(max_iter):
        thinned = _nms_once(current, cfg)
        if np.array_equal(thinned, current):
            return thinned
        current = thinned
    return current


def nms_channels(maps, cfg: NmsConfig = NmsConfig()):
    maps = np.asarray(maps, dtype=np.float64)
    if not cfg.enabled:
        return maps.copy()
    return np.stack([nms_thin(m, cfg) for m in maps])


@dataclass(frozen=True)
class OtsuResult:
    threshold: float
    degenerate: bool = False


def otsu_threshold(scores, bins=256) -> OtsuResult:
    """Otsu cut over a ``bins``-bin histogram spanning ``[min, max]`` of the input.

    Candidates are the bin edges ``min + k * (max - min) / bins`` for
    ``k = 1..bins-1``; values at or above the edge form the upper class.  The
    between-class variance is compared in exact integer arithmetic on bin
    indices, and ties keep the lowest edge.  Constant input returns its value
    with ``degenerate`` set.
    """
    v = np.asarray(scores, dtype=np.float64).ravel()
    if v.size == 0:
        raise InvalidInput("otsu_threshold needs at least one value")
    if not np.all(np.isfinite(v)):
        raise InvalidInput("scores must be finite")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return OtsuResult(lo, True)
    idx = histogram_bins(v, lo, hi, bins)
    counts = np.bincount(idx, minlength=bins).tolist()
    n_total = len(v)
    s_total = sum(k * c for k, c in enumerate(counts))
    best_k, best_num, best_den = None, -1, 1
    n0 = s0 = 0
    for k in range(1, bins):
        n0 += counts[k - 1]
        s0 += (k - 1) * counts[k - 1]
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = s_total - s0
        num = (n1 * s0 - n0 * s1) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return OtsuResult(lo + best_k * (hi - lo) / bins)


def histogram_bins(v, lo, hi, bins=256):
    """Bin index of each value on ``bins`` equal bins over ``[lo, hi]``; ``hi`` lands in the last bin."""
    idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


@dataclass
class PseudoLabels:
    hard: np.ndarray
    soft: np.ndarray
    thinned: np.ndarray
    threshold: float
    flags: dict = field(default_factory=dict)


def binarize(thinned, image_labels):
    """Otsu on the positive survivors of the relevant channels."""
    relevant = thinned[[int(c) for c in image_labels]] if len(image_labels) else thinned[:0]
    pooled = relevant[relevant > 0]
    if pooled.size == 0:
        return np.zeros(thinned.shape, dtype=bool), float("nan"), True
    res = otsu_threshold(pooled)
    return (thinned > 0) & (thinned >= res.threshold), res.threshold, res.degenerate


def make_pseudo_labels(params, image, image_labels, cfg: net.NetConfig,
                       msf: MsfConfig | None = MsfConfig(), nms: NmsConfig = NmsConfig()):
    """Soft (filtered final map) and hard pseudo labels for one image.

    ``msf=None`` uses a single plain forward pass.
    """
    msf = msf or MsfConfig(scales=(1.0,), use_flip=False)
    _, _, b_final = msf_predict(params, image, cfg, msf)
    soft = filter_irrelevant_classes(b_final, image_labels)
    thinned = nms_channels(soft, nms)
    hard, threshold, degenerate = binarize(thinned, image_labels)
    return PseudoLabels(hard, soft, thinned, threshold, {"otsu_degenerate": degenerate})
