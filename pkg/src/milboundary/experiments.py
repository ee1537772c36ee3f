"""Desk-scale ablations: branch combination, MSF/NMS, CAM quality and hyper-parameters."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


from . import evaluation, pipeline, pseudolabel, synthgen
from .config import RunConfig
from .imaging import InvalidInput

SWEEP_PARAMS = ("gamma", "lam", "cam_degradation", "msf_on", "nms_on", "branch_combo")
BRANCHES = ("aw", "ag", "aw*ag")


def write_csv(path, rows, columns=None):
    columns = columns or list(rows[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else _fmt(r.get(c)) for c in columns])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def branch_outputs(params, samples, cfg: RunConfig, msf=True):
    """Per-sample ``(b_ag, filtered b_aw, filtered b_final)`` from MSF inference."""
    msf_cfg = cfg.msf if msf else pseudolabel.MsfConfig(scales=(1.0,), use_flip=False)
    out = []
    for s in samples:
        b_ag, b_aw, b_final = pseudolabel.msf_predict(params, s.image, cfg.net_config(), msf_cfg)
        out.append((b_ag,
                    pseudolabel.filter_irrelevant_classes(b_aw, s.image_labels),
                    pseudolabel.filter_irrelevant_classes(b_final, s.image_labels)))
    return out


def run_branch_ablation(samples, params, cfg: RunConfig, out_dir=None):
    """Metrics of each branch and of their product.

    The class-agnostic branch has no class channels, so its class-aware cells
    stay empty.  Returns ``(rows, curves)`` where ``curves`` maps branch to its
    class-agnostic PR curve.
    """
    outs = branch_outputs(params, samples, cfg)
    rows, curves = [], {}
    for branch in BRANCHES:
        if branch == "ag":
            maps = [o[0][None] for o in outs]
            metrics = pipeline.evaluate_maps(maps, samples, cfg, class_aware=False)
        else:
            maps = [o[1] if branch == "aw" else o[2] for o in outs]
            metrics = pipeline.evaluate_maps(maps, samples, cfg)
        summary = pipeline.summarize(metrics)
        curves[branch] = next(r.curve for r in metrics if r.name == "agnostic")
        rows.append({"branch": branch,
                     "class_aware_mf": summary.get("mean_mf"),
                     "class_aware_ap": summary.get("mean_ap"),
                     "agnostic_mf": summary["agnostic_mf"],
                     "agnostic_ap": summary["agnostic_ap"]})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(out_dir / "branch_ablation.csv", rows)
        evaluation.write_pr_svg(out_dir / "branch_ablation_agnostic.svg",
                                [curves[b] for b in BRANCHES], "class-agnostic PR",
                                labels=list(BRANCHES))
    return rows, curves


def run_msf_nms_ablation(samples, params, cfg: RunConfig, out_dir=None):
    """Pseudo-label metrics for the four MSF / NMS on-off combinations."""
    rows = []
    for msf_on in (False, True):
        for nms_on in (False, True):
            nms = dataclasses.replace(cfg.nms, enabled=nms_on)
            pseudos = pipeline.pseudo_labels(params, samples, cfg, msf=msf_on, nms=nms)
            soft, hard = pipeline.pseudo_metrics(pseudos, samples, cfg)
            rows.append(_pseudo_row({"msf": int(msf_on), "nms": int(nms_on)}, soft, hard))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_csv(Path(out_dir) / "msf_nms_ablation.csv", rows)
    return rows


def _pseudo_row(head, soft, hard):
    s, h = pipeline.summarize(soft), pipeline.summarize(hard)
    row = dict(head)
    row.update({"soft_mf": s["mean_mf"], "soft_ap": s["mean_ap"],
                "soft_agnostic_mf": s["agnostic_mf"],
                "hard_mf": h["mean_mf"], "hard_agnostic_mf": h["agnostic_mf"]})
    return row


def default_ladder():
    """Four CAM degradation levels of increasing strength."""
    return [
        synthgen.CamDegradation(blur_sigma=1.0, erosion_radius=0, part_bias=0.1, noise=0.01),
        synthgen.CamDegradation(blur_sigma=1.5, erosion_radius=1, part_bias=0.3, noise=0.02),
        synthgen.CamDegradation(blur_sigma=2.5, erosion_radius=2, part_bias=0.5, noise=0.04),
        synthgen.CamDegradation(blur_sigma=3.5, erosion_radius=3, part_bias=0.7, noise=0.06),
    ]


def run_cam_robustness(cfg: RunConfig, ladder=None, out_dir=None, include_gt=True):
    """Retrain per CAM degradation level and measure pseudo-label quality.

    The final level (when ``include_gt``) labels segments straight from the
    ground-truth masks, with CAM IoU reported as 1.
    """
    ladder = default_ladder() if ladder is None else list(ladder)
    if len(ladder) < 3:
        raise InvalidInput("a CAM ladder needs at least three levels")
    levels = [(f"level{k}", deg) for k, deg in enumerate(ladder)]
    if include_gt:
        levels.append(("ground_truth", None))
    rows = []
    for name, deg in levels:
        samples = pipeline.corpus(cfg, deg=deg)
        if deg is None:
            iou = 1.0
            maps = pipeline.confident_maps(samples, cfg, use_gt=True)
        else:
            iou = synthgen.corpus_cam_quality(samples)
            maps = pipeline.confident_maps(samples, cfg)
        params = pipeline.train_wsbdn(samples, maps, cfg)
        pseudos = pipeline.pseudo_labels(params, samples, cfg)
        soft, hard = pipeline.pseudo_metrics(pseudos, samples, cfg)
        rows.append(_pseudo_row({"level": name, "cam_iou": float(iou)}, soft, hard))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_csv(Path(out_dir) / "cam_robustness.csv", rows)
    return rows


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple
    base: RunConfig = field(default_factory=RunConfig)
    seed: int | None = None

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise InvalidInput(f"unknown sweep parameter {self.param!r}")
        if not self.values:
            raise InvalidInput("sweep needs at least one value")
        object.__setattr__(self, "values", tuple(self.values))
        if self.param == "gamma" and min(self.values) < 2:
            raise InvalidInput("gamma values must be >= 2")
        if self.param == "lam" and min(self.values) < 0:
            raise InvalidInput("lambda values must be non-negative")
        if self.param == "branch_combo" and set(self.values) - set(BRANCHES):
            raise InvalidInput(f"branch values must be among {BRANCHES}")

    def config(self):
        if self.seed is None:
            return self.base
        return dataclasses.replace(self.base, seed=self.seed)


def run_hyper_sweep(spec: SweepSpec, out_dir=None):
    """One row per value with soft and hard pseudo-label metrics.

    ``gamma``, ``lam`` and ``cam_degradation`` retrain per value (the latter
    takes a level index into :func:`default_ladder`); ``msf_on``, ``nms_on``
    and ``branch_combo`` reuse one trained model.
    """
    cfg = spec.config()
    rows = []
    if spec.param in ("gamma", "lam"):
        samples = pipeline.corpus(cfg)
        maps = pipeline.confident_maps(samples, cfg)
        for v in spec.values:
            run = pipeline.with_overrides(cfg, train={spec.param: float(v)})
            params = pipeline.train_wsbdn(samples, maps, run)
            soft, hard = pipeline.pseudo_metrics(pipeline.pseudo_labels(params, samples, run),
                                                 samples, run)
            rows.append(_pseudo_row({spec.param: v}, soft, hard))
    elif spec.param == "cam_degradation":
        ladder = default_ladder()
        for v in spec.values:
            deg = ladder[int(v)]
            samples = pipeline.corpus(cfg, deg=deg)
            params = pipeline.train_wsbdn(samples, pipeline.confident_maps(samples, cfg), cfg)
            soft, hard = pipeline.pseudo_metrics(pipeline.pseudo_labels(params, samples, cfg),
                                                 samples, cfg)
            row = {"cam_degradation": v, "cam_iou": synthgen.corpus_cam_quality(samples)}
            rows.append(_pseudo_row(row, soft, hard))
    else:
        samples = pipeline.corpus(cfg)
        params = pipeline.train_wsbdn(samples, pipeline.confident_maps(samples, cfg), cfg)
        if spec.param == "branch_combo":
            table, _ = run_branch_ablation(samples, params, cfg)
            rows = [r for r in table if r["branch"] in spec.values]
        else:
            for v in spec.values:
                on = bool(v)
                nms = dataclasses.replace(cfg.nms, enabled=on) if spec.param == "nms_on" else None
                msf = on if spec.param == "msf_on" else True
                soft, hard = pipeline.pseudo_metrics(
                    pipeline.pseudo_labels(params, samples, cfg, msf=msf, nms=nms), samples, cfg)
                rows.append(_pseudo_row({spec.param: int(on)}, soft, hard))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_csv(Path(out_dir) / f"sweep_{spec.param}.csv", rows)
    return rows


def parse_values(param, text):
    """Parse a comma-separated value list for ``param``."""
    items = [t.strip() for t in text.split(",") if t.strip()]
    if param in ("gamma", "lam"):
        return tuple(float(t) for t in items)
    if param in ("cam_degradation", "msf_on", "nms_on"):
        return tuple(int(t) for t in items)
    return tuple(items)
