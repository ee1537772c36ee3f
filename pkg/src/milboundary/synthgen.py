"""Synthetic scenes with known ground truth and simulated class attention maps.

Each scene is a textured grey background with one or more coloured shapes.  A
class is identified both by its shape kind and by a hue band.  Later shapes
occlude earlier ones.  CAMs are simulated from the ground-truth mask by
erosion, part selection, blur and noise, which stands in for a trained
classifier.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imaging
from .imaging import BACKGROUND

SHAPE_KINDS = ("disc", "rectangle", "triangle", "ring")


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    num_classes: int = 3
    shapes_per_image: tuple = (1, 3)
    # one kind per class; defaults to cycling through SHAPE_KINDS
    shape_kinds: tuple | None = None
    shape_size: tuple = (8, 16)
    noise: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2")
        if self.image_size < 32:
            raise InvalidConfig("image_size must be >= 32")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise InvalidConfig("shapes_per_image must be a non-empty range starting at >= 1")
        slo, shi = self.shape_size
        if not 2 <= slo <= shi or 2 * shi >= self.image_size:
            raise InvalidConfig("shape_size must be a non-empty range fitting the image")
        if self.noise < 0:
            raise InvalidConfig("noise must be non-negative")
        if self.shape_kinds is not None:
            if len(self.shape_kinds) != self.num_classes:
                raise InvalidConfig("shape_kinds needs one entry per class")
            unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
            if unknown:
                raise InvalidConfig(f"unknown shape kinds {sorted(unknown)}")

    def kind_of(self, c):
        if self.shape_kinds is not None:
            return self.shape_kinds[c]
        return SHAPE_KINDS[c % len(SHAPE_KINDS)]


@dataclass(frozen=True)
class CamDegradation:
    blur_sigma: float = 1.5
    erosion_radius: int = 1
    # strength of part selection: the CAM keeps a random part of the object
    # whose area is at least (1 - part_bias) of the object; 0 disables it
    part_bias: float = 0.3
    noise: float = 0.02

    def __post_init__(self):
        if min(self.blur_sigma, self.erosion_radius, self.part_bias, self.noise) < 0:
            raise InvalidConfig("degradation parameters must be non-negative")
        if self.part_bias > 1:
            raise InvalidConfig("part_bias must be <= 1")


@dataclass
class Sample:
    image: np.ndarray
    image_labels: tuple
    gt_mask: np.ndarray
    gt_boundaries: np.ndarray
    cams: np.ndarray
    index: int = 0

    @property
    def num_classes(self):
        return self.gt_boundaries.shape[0]


def _shape_mask(kind, cy, cx, r, rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    theta = rng.uniform(0, 2 * math.pi)
    if kind == "disc":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.5 * r) ** 2)
    if kind == "rectangle":
        a, b = rng.uniform(0.6 * r, r, size=2)
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if kind == "triangle":
        angles = theta + np.array([0.0, 2.0, 4.0]) * math.pi / 3
        vx = cx + 1.15 * r * np.cos(angles)
        vy = cy + 1.15 * r * np.sin(angles)
        inside = np.ones((size, size), dtype=bool)
        for k in range(3):
            x0, y0 = vx[k], vy[k]
            x1, y1 = vx[(k + 1) % 3], vy[(k + 1) % 3]
            # counter-clockwise vertices: interior on the left of every edge
            inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
        return inside
    raise InvalidConfig(f"unknown shape kind {kind!r}")


def _background(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.35, 0.65)
    tex = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(-3, 3, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        tex += 0.04 * np.sin(2 * math.pi * (fy * yy + fx * xx) + phase)
    tint = rng.uniform(-0.03, 0.03, size=3)
    return np.clip(base + tex[..., None] + tint, 0, 1)


def _class_colour(c, num_classes, rng):
    hue = (c / num_classes + rng.uniform(-0.04, 0.04)) % 1.0
    sat = rng.uniform(0.55, 0.9)
    val = rng.uniform(0.55, 0.95)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val))


def _disk(radius):
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy ** 2 + xx ** 2 <= radius ** 2


def generate_scene(cfg: SceneConfig, index: int, deg: CamDegradation | None = None) -> Sample:
    """Deterministic scene number ``index`` of the corpus described by ``cfg``."""
    if index < 0:
        raise InvalidConfig("index must be >= 0")
    deg = CamDegradation() if deg is None else deg
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    image = _background(rng, size)
    mask = np.full((size, size), BACKGROUND, dtype=np.int16)

    lo, hi = cfg.shapes_per_image
    for _ in range(int(rng.integers(lo, hi + 1))):
        c = int(rng.integers(cfg.num_classes))
        r = rng.uniform(*cfg.shape_size)
        margin = 0.6 * r
        cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
        region = _shape_mask(cfg.kind_of(c), cy, cx, r, rng, size)
        colour = _class_colour(c, cfg.num_classes, rng)
        shade = 1.0 + 0.05 * rng.standard_normal()
        image[region] = np.clip(colour * shade, 0, 1)
        mask[region] = c

    noise = rng.uniform(-cfg.noise, cfg.noise, size=image.shape)
    image = np.clip(np.rint(image * 255 + noise), 0, 255).astype(np.uint8)
    labels = tuple(int(c) for c in np.unique(mask) if c != BACKGROUND)
    cam_rng = np.random.default_rng([cfg.seed, index, 1])
    return Sample(
        image=image,
        image_labels=labels,
        gt_mask=mask,
        gt_boundaries=imaging.extract_boundaries(mask, cfg.num_classes),
        cams=simulate_cam(mask, deg, cam_rng, cfg.num_classes),
        index=index,
    )


def simulate_cam(gt_mask, deg: CamDegradation, rng, num_classes):
    """Degraded per-class attention maps derived from a ground-truth mask.

    Per present class: the indicator is eroded, cut to a random part (a
    half-plane fixed on the undegraded region), blurred, perturbed by uniform
    noise, clamped and max-normalised.  The same random draws are consumed
    whatever the degradation strength, so degradations of one scene are
    directly comparable.  Absent classes get an all-zero map.
    """
    gt_mask = np.asarray(gt_mask)
    h, w = gt_mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    cams = np.zeros((num_classes, h, w), dtype=np.float64)
    for c in range(num_classes):
        theta = rng.uniform(0, 2 * math.pi)
        keep = rng.uniform(1.0 - deg.part_bias, 1.0)
        noise = rng.uniform(-deg.noise, deg.noise, size=(h, w))
        region = gt_mask == c
        if not region.any():
            continue
        support = region
        if deg.erosion_radius > 0:
            support = ndimage.binary_erosion(region, structure=_disk(deg.erosion_radius),
                                             border_value=1)
        if deg.part_bias > 0:
            proj = xx * math.cos(theta) + yy * math.sin(theta)
            values = np.sort(proj[region])
            cut = values[max(0, math.ceil(keep * values.size) - 1)]
            support = support & (proj <= cut)
        if not support.any():
            # a fully eroded object still draws attention at its most interior pixel
            dist = ndimage.distance_transform_edt(region)
            support = np.zeros_like(region)
            support[np.unravel_index(np.argmax(dist), dist.shape)] = True
        cam = support.astype(np.float64)
        if deg.blur_sigma > 0:
            cam = ndimage.gaussian_filter(cam, deg.blur_sigma, mode="constant")
            cam /= cam.max()
        cam = np.clip(cam + noise, 0.0, None)
        cams[c] = imaging.normalize_cam(cam)
    return cams.astype(np.float32)


def cam_quality(cams, gt_mask, fg_threshold=0.3):
    """IoU of thresholded CAMs against the ground-truth class regions.

    Returns ``(mean_iou, {class: iou})`` over the classes present in the mask.
    """
    if not 0 < fg_threshold < 1:
        raise ValueError("fg_threshold must lie in (0, 1)")
    per_class = {}
    for c in range(len(cams)):
        region = gt_mask == c
        if not region.any():
            continue
        pred = cams[c] >= fg_threshold
        per_class[c] = float((pred & region).sum() / (pred | region).sum())
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return mean, per_class


def generate_corpus(cfg: SceneConfig, count, deg: CamDegradation | None = None, start=0):
    return [generate_scene(cfg, i, deg) for i in range(start, start + count)]


def corpus_cam_quality(samples, fg_threshold=0.3):
    values = [cam_quality(s.cams, s.gt_mask, fg_threshold)[0] for s in samples]
    return float(np.mean(values))


# ----------------------------------------------------------------------------
# on-disk corpus

MANIFEST = "manifest.json"


def write_corpus(out_dir, cfg: SceneConfig, deg: CamDegradation, count, samples=None):
    """Write ``count`` scenes plus ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if samples is None:
        samples = generate_corpus(cfg, count, deg)
    entries = []
    for s in samples:
        stem = f"s{s.index:05d}"
        imaging.write_rgb(out / f"{stem}.image", s.image)
        imaging.write_label_pgm(out / f"{stem}.mask.pgm", s.gt_mask)
        imaging.write_multi_pgm(out / f"{stem}.bnd", s.gt_boundaries.astype(np.uint8) * 255)
        imaging.write_multi_pfm(out / f"{stem}.cam", s.cams)
        entries.append({
            "id": stem,
            "index": s.index,
            "image": f"{stem}.image",
            "mask": f"{stem}.mask.pgm",
            "boundaries": f"{stem}.bnd",
            "cams": f"{stem}.cam",
            "image_labels": list(s.image_labels),
        })
    manifest = {
        "seed": cfg.seed,
        "num_classes": cfg.num_classes,
        "image_size": cfg.image_size,
        "scene": _jsonable(asdict(cfg)),
        "degradation": asdict(deg),
        "samples": entries,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def read_manifest(data_dir):
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {data_dir}")
    return json.loads(path.read_text())


def load_corpus(data_dir):
    """Read back every sample listed in a corpus manifest."""
    root = Path(data_dir)
    manifest = read_manifest(root)
    c = manifest["num_classes"]
    samples = []
    for e in manifest["samples"]:
        samples.append(Sample(
            image=imaging.read_rgb(root / e["image"]),
            image_labels=tuple(e["image_labels"]),
            gt_mask=imaging.read_label_pgm(root / e["mask"]),
            gt_boundaries=imaging.read_multi_pgm(root / e["boundaries"], c) > 0,
            cams=imaging.read_multi_pfm(root / e["cams"], c),
            index=e["index"],
        ))
    return samples
