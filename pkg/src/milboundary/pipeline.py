"""In-memory stage functions shared by the CLI and the experiments."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import evaluation, pseudolabel, seeds, student, synthgen, training
from .config import RunConfig


def corpus(cfg: RunConfig, split="train", deg=None):
    """Training split is indices ``0..N-1``; the test split follows it."""
    deg = cfg.cam if deg is None else deg
    n = cfg.corpus.num_samples
    if split == "train":
        return synthgen.generate_corpus(cfg.scene_config(), n, deg)
    if split == "test":
        return synthgen.generate_corpus(cfg.scene_config(), cfg.corpus.test_samples, deg, start=n)
    raise ValueError(f"unknown split {split!r}")


def confident_map(sample, cfg: RunConfig):
    raw = seeds.confident_regions(sample.cams, sample.image_labels, cfg.seeds)
    return seeds.refine_labels(raw, sample.image, cfg.refine.strategy, cfg.refine.k)


def confident_maps(samples, cfg: RunConfig, use_gt=False):
    if use_gt:
        return [seeds.gt_label_map(s.gt_mask) for s in samples]
    return [confident_map(s, cfg) for s in samples]


def train_wsbdn(samples, maps, cfg: RunConfig, train_cfg=None, history=None):
    train_cfg = train_cfg or cfg.train_config()
    return training.train_wsbdn([s.image for s in samples], maps, cfg.net_config(), train_cfg,
                                history=history)


def pseudo_labels(params, samples, cfg: RunConfig, msf=True, nms=None):
    """Pseudo labels for every sample; ``msf=False`` uses a single forward pass."""
    msf_cfg = cfg.msf if msf else None
    nms_cfg = cfg.nms if nms is None else nms
    return [pseudolabel.make_pseudo_labels(params, s.image, s.image_labels, cfg.net_config(),
                                           msf_cfg, nms_cfg)
            for s in samples]


def evaluate_maps(maps, samples, cfg: RunConfig, class_aware=True, agnostic=True):
    h, w = samples[0].gt_boundaries.shape[1:]
    return evaluation.evaluate(maps, [s.gt_boundaries for s in samples],
                               cfg.match.resolve(h, w), cfg.eval.n_thresholds,
                               class_aware=class_aware, agnostic=agnostic)


def summarize(rows):
    """Flatten metric rows into ``mean_mf``, ``mean_ap``, ``agnostic_mf``, ``agnostic_ap``."""
    out = {}
    if any(r.name != "agnostic" for r in rows):
        out["mean_mf"] = evaluation.mean_mf(rows)
        out["mean_ap"] = evaluation.mean_ap(rows)
    for r in rows:
        if r.name == "agnostic":
            out["agnostic_mf"] = r.mf
            out["agnostic_ap"] = r.ap
    return out


def pseudo_metrics(pseudos, samples, cfg: RunConfig):
    """Soft (filtered final map) and hard pseudo-label metrics."""
    soft = evaluate_maps([p.soft for p in pseudos], samples, cfg)
    hard = evaluate_maps([p.hard.astype(np.float64) for p in pseudos], samples, cfg)
    return soft, hard


def student_targets(pseudos):
    return [p.hard for p in pseudos]


def train_student(samples, targets, cfg: RunConfig, train_cfg=None, history=None):
    train_cfg = train_cfg or cfg.student_config()
    return student.train_student([s.image for s in samples], targets, cfg.net_config(),
                                 train_cfg, history=history)


def student_predictions(params, samples, cfg: RunConfig):
    return [student.predict(params, s.image, cfg.net_config()) for s in samples]


def with_overrides(cfg: RunConfig, **sections):
    """Copy of ``cfg`` with fields of named sections replaced, e.g. ``train={"steps": 10}``."""
    changes = {}
    for name, values in sections.items():
        current = getattr(cfg, name)
        changes[name] = dataclasses.replace(current, **values) if isinstance(values, dict) else values
    return dataclasses.replace(cfg, **changes)
