"""Command line entry point: ``python -m milboundary <subcommand> ...``.

Every subcommand writes into a fresh output directory and records the
resolved configuration there as ``config.json``.  Exit codes: 0 success,
1 runtime failure, 2 usage error, 3 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import (config, evaluation, experiments, imaging, net, pipeline, segments, synthgen)

log = logging.getLogger("milboundary")

PSEUDO_MANIFEST = "pseudo_manifest.json"
SEEDS_MANIFEST = "seeds_manifest.json"
PRED_MANIFEST = "predictions_manifest.json"
WSBDN_CKPT = "wsbdn.ckpt"
STUDENT_CKPT = "student.ckpt"


class CliError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# helpers

def _threads(args):
    if args.deterministic:
        return 1
    if args.threads is not None:
        return args.threads
    env = os.environ.get("MILBOUNDARY_THREADS")
    return int(env) if env else None


def _limit_threads(n):
    if n is None:
        return None
    from threadpoolctl import threadpool_limits

    # the numba kernels are serial, so only the BLAS pools need a cap
    return threadpool_limits(limits=n)


def _load_config(args):
    cfg = config.load(args.config) if args.config else config.RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.deterministic:
        changes["deterministic"] = True
    if getattr(args, "tol", None) is not None:
        changes["match"] = evaluation.MatchConfig(tolerance=args.tol)
    return pipeline.with_overrides(cfg, **changes) if changes else cfg


def _fresh_dir(path):
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        raise CliError(f"output directory {out} is not empty")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out, cfg, args):
    inputs = {k: v for k, v in sorted(vars(args).items())
              if k not in ("func", "config", "threads") and v is not None}
    payload = {"command": args.command, "arguments": _plain(inputs), "config": config.to_dict(cfg)}
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, Path):
        return str(v)
    return v


def _need(path, what):
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing {what}: {p}")
    return p


def _corpus(data_dir):
    _need(Path(data_dir) / synthgen.MANIFEST, "corpus manifest")
    return synthgen.load_corpus(data_dir)


def _read_json(path, what):
    return json.loads(_need(path, what).read_text())


def _checkpoint(path, cfg):
    params, _ = net.load_checkpoint(_need(path, "checkpoint"), cfg.net_config())
    return params


# ----------------------------------------------------------------------------
# subcommands

def cmd_gen(args, cfg):
    out = _fresh_dir(args.out)
    scene = cfg.scene_config()
    train = synthgen.generate_corpus(scene, cfg.corpus.num_samples, cfg.cam)
    synthgen.write_corpus(out, scene, cfg.cam, len(train), samples=train)
    if cfg.corpus.test_samples:
        test = pipeline.corpus(cfg, "test")
        synthgen.write_corpus(out / "test", scene, cfg.cam, len(test), samples=test)
    _echo(out, cfg, args)
    return f"wrote {len(train)} samples to {out}"


def cmd_seeds(args, cfg):
    samples = _corpus(args.data)
    manifest = synthgen.read_manifest(args.data)
    out = _fresh_dir(args.out)
    entries = []
    for s, e in zip(samples, manifest["samples"]):
        lab = (pipeline.confident_maps([s], cfg, use_gt=True)[0] if args.from_gt
               else pipeline.confident_map(s, cfg))
        name = f"{e['id']}.seed.pgm"
        imaging.write_label_pgm(out / name, lab)
        entries.append({"id": e["id"], "labels": name})
    (out / SEEDS_MANIFEST).write_text(json.dumps({"samples": entries}, indent=2) + "\n")
    _echo(out, cfg, args)
    return f"wrote {len(entries)} confident label maps to {out}"


def _seed_maps(seeds_dir, manifest):
    seeds_dir = Path(seeds_dir)
    index = {e["id"]: e["labels"] for e in _read_json(seeds_dir / SEEDS_MANIFEST, "seeds manifest")["samples"]}
    maps = []
    for e in manifest["samples"]:
        if e["id"] not in index:
            raise CliError(f"no confident label map for sample {e['id']}")
        maps.append(imaging.read_label_pgm(_need(seeds_dir / index[e["id"]], f"labels of {e['id']}")))
    return maps


def cmd_segments_debug(args, cfg):
    manifest = synthgen.read_manifest(args.data)
    maps = _seed_maps(args.seeds, manifest)
    ids = [e["id"] for e in manifest["samples"]]
    if args.sample not in ids:
        raise CliError(f"unknown sample {args.sample}")
    lab = maps[ids.index(args.sample)]
    out = _fresh_dir(args.out)
    sets = segments.build_segment_sets(lab, cfg.train.gamma, cfg.scene.num_classes)
    segments.write_debug_csv(out / f"{args.sample}.segments.csv", sets)
    _echo(out, cfg, args)
    return f"wrote {len(sets)} segments"


def cmd_train_wsbdn(args, cfg):
    samples = _corpus(args.data)
    maps = _seed_maps(args.seeds, synthgen.read_manifest(args.data))
    out = _fresh_dir(args.out)
    history = []
    params = pipeline.train_wsbdn(samples, maps, cfg, history=history)
    net.save_checkpoint(out / WSBDN_CKPT, params)
    with open(out / "loss_history.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "total", "loss_aw", "loss_ag"])
        for k, row in enumerate(history):
            w.writerow([k] + [f"{v:.8f}" for v in row])
    _echo(out, cfg, args)
    return f"trained {len(history)} steps, checkpoint {out / WSBDN_CKPT}"


def cmd_pseudo(args, cfg):
    samples = _corpus(args.data)
    manifest = synthgen.read_manifest(args.data)
    params = _checkpoint(args.checkpoint, cfg)
    out = _fresh_dir(args.out)
    entries = []
    for s, e in zip(samples, manifest["samples"]):
        p = pipeline.pseudo_labels(params, [s], cfg, msf=not args.no_msf)[0]
        imaging.write_multi_pfm(out / f"{e['id']}.soft", p.soft)
        imaging.write_multi_pgm(out / f"{e['id']}.hard", p.hard.astype(np.uint8) * 255)
        entries.append({"id": e["id"], "soft": f"{e['id']}.soft", "hard": f"{e['id']}.hard",
                        "threshold": None if np.isnan(p.threshold) else p.threshold,
                        "otsu_degenerate": bool(p.flags["otsu_degenerate"])})
    doc = {"num_classes": manifest["num_classes"], "samples": entries}
    (out / PSEUDO_MANIFEST).write_text(json.dumps(doc, indent=2) + "\n")
    _echo(out, cfg, args)
    return f"wrote pseudo labels for {len(entries)} samples"


def _pseudo_targets(pseudo_dir, manifest):
    pseudo_dir = Path(pseudo_dir)
    doc = _read_json(pseudo_dir / PSEUDO_MANIFEST, "pseudo-label manifest")
    index = {e["id"]: e for e in doc["samples"]}
    c = manifest["num_classes"]
    targets = []
    for e in manifest["samples"]:
        if e["id"] not in index:
            raise CliError(f"no pseudo labels for sample {e['id']}")
        stem = pseudo_dir / index[e["id"]]["hard"]
        try:
            targets.append(imaging.read_multi_pgm(stem, c) > 0)
        except FileNotFoundError as exc:
            raise CliError(f"missing pseudo labels for sample {e['id']}: {exc.filename}") from exc
    return targets


def cmd_train_student(args, cfg):
    samples = _corpus(args.data)
    manifest = synthgen.read_manifest(args.data)
    if args.from_gt:
        targets = [s.gt_boundaries for s in samples]
    else:
        targets = _pseudo_targets(args.pseudo, manifest)
    out = _fresh_dir(args.out)
    history = []
    params = pipeline.train_student(samples, targets, cfg, history=history)
    net.save_checkpoint(out / STUDENT_CKPT, params)
    with open(out / "loss_history.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "balanced_bce"])
        for k, v in enumerate(history):
            w.writerow([k, f"{v:.8f}"])
    _echo(out, cfg, args)
    return f"trained student for {len(history)} steps"


def _predictions(args, cfg, samples):
    """Prediction maps for ``eval``: a checkpoint, pseudo labels or a corpus."""
    c = cfg.scene.num_classes
    if args.checkpoint:
        return pipeline.student_predictions(_checkpoint(args.checkpoint, cfg), samples, cfg)
    pred = Path(args.pred)
    gt_manifest = synthgen.read_manifest(args.gt)
    ids = [e["id"] for e in gt_manifest["samples"]]
    if (pred / PSEUDO_MANIFEST).exists():
        doc = _read_json(pred / PSEUDO_MANIFEST, "pseudo-label manifest")
        index = {e["id"]: e for e in doc["samples"]}
        maps = []
        for i in ids:
            if i not in index:
                raise CliError(f"no prediction for sample {i}")
            if args.kind == "hard":
                maps.append((imaging.read_multi_pgm(pred / index[i]["hard"], c) > 0).astype(float))
            else:
                maps.append(imaging.read_multi_pfm(pred / index[i]["soft"], c))
        return maps
    if (pred / synthgen.MANIFEST).exists():
        doc = synthgen.read_manifest(pred)
        index = {e["id"]: e for e in doc["samples"]}
        return [(imaging.read_multi_pgm(pred / index[i]["boundaries"], c) > 0).astype(float)
                for i in ids]
    raise CliError(f"{pred} holds neither pseudo labels nor a corpus")


def cmd_eval(args, cfg):
    if not args.checkpoint and not args.pred:
        raise CliError("eval needs --pred or --checkpoint")
    samples = _corpus(args.gt)
    maps = _predictions(args, cfg, samples)
    out = _fresh_dir(args.out)
    rows = pipeline.evaluate_maps(maps, samples, cfg)
    evaluation.write_metrics(out, rows, svg=cfg.eval.svg)
    _echo(out, cfg, args)
    s = pipeline.summarize(rows)
    return f"mean MF {s['mean_mf']:.4f} AP {s['mean_ap']:.4f} agnostic MF {s['agnostic_mf']:.4f}"


def cmd_sweep(args, cfg):
    out = _fresh_dir(Path(args.out) / args.name)
    _echo(out, cfg, args)
    if args.param == "cam_robustness":
        rows = experiments.run_cam_robustness(cfg, out_dir=out)
    elif args.param == "msf_nms":
        samples = pipeline.corpus(cfg)
        params = pipeline.train_wsbdn(samples, pipeline.confident_maps(samples, cfg), cfg)
        rows = experiments.run_msf_nms_ablation(samples, params, cfg, out_dir=out)
    elif args.param == "branch":
        samples = pipeline.corpus(cfg)
        params = (_checkpoint(args.checkpoint, cfg) if args.checkpoint else
                  pipeline.train_wsbdn(samples, pipeline.confident_maps(samples, cfg), cfg))
        rows, _ = experiments.run_branch_ablation(samples, params, cfg, out_dir=out)
    else:
        if not args.values:
            raise CliError(f"sweep over {args.param} needs --values")
        spec = experiments.SweepSpec(args.param, experiments.parse_values(args.param, args.values), cfg)
        rows = experiments.run_hyper_sweep(spec, out_dir=out)
    return f"wrote {len(rows)} rows to {out}"


def cmd_report(args, cfg):
    root = _need(args.runs, "runs directory")
    found = sorted(p for p in Path(root).rglob("metrics.csv"))
    if not found:
        raise CliError(f"no metrics.csv under {root}")
    out = _fresh_dir(args.out)
    table = []
    for path in found:
        run = str(path.parent.relative_to(root)) or "."
        for row in evaluation.read_metrics(path):
            table.append({"run": run, **row})
    columns = ["run", "class", "MF", "best_threshold", "AP", "tp", "fp", "fn"]
    experiments.write_csv(out / "summary.csv", table, columns)
    _echo(out, cfg, args)
    lines = ["%-30s %-9s %8s %8s" % ("run", "class", "MF", "AP")]
    lines += ["%-30s %-9s %8s %8s" % (r["run"], r["class"], r["MF"], r["AP"]) for r in table
              if r["class"] in ("mean", "agnostic")]
    print("\n".join(lines))
    return f"collated {len(found)} metrics files"


# ----------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (unknown keys are rejected)")
    common.add_argument("--out", required=True, help="output directory (must be new or empty)")
    common.add_argument("--seed", type=int, help="override the configuration seed")
    common.add_argument("--threads", type=int,
                        help="thread cap for BLAS (default: $MILBOUNDARY_THREADS)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, ordered reductions")

    parser = argparse.ArgumentParser(
        prog="milboundary",
        description="Weakly supervised semantic boundary detection on synthetic scenes.",
        epilog="Defaults: gamma 10, lambda 0.25, SGD lr 1e-2 momentum 0.9 weight decay 1e-4 "
               "poly power 0.9, NMS radius 10 multiplier 1.1, MSF scales 0.75/1/1.25 with flips, "
               "tolerance 2 px.  Print the full default configuration with `config --out DIR`.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    add("config", lambda a, c: "wrote default configuration", "write the resolved configuration")
    add("gen", cmd_gen, "generate the synthetic corpus")
    p = add("seeds", cmd_seeds, "confident label maps from CAMs")
    p.add_argument("--data", required=True)
    p.add_argument("--from-gt", action="store_true", help="use ground-truth masks instead of CAMs")
    p = add("segments-debug", cmd_segments_debug, "dump the valid segments of one sample")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", required=True)
    p.add_argument("--sample", required=True)
    p = add("train-wsbdn", cmd_train_wsbdn, "MIL training of the boundary network")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", required=True)
    p = add("pseudo", cmd_pseudo, "pseudo labels from a trained network")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--no-msf", action="store_true", help="single forward pass instead of MSF")
    p = add("train-student", cmd_train_student, "supervised retraining on pseudo labels")
    p.add_argument("--data", required=True)
    p.add_argument("--pseudo")
    p.add_argument("--from-gt", action="store_true", help="train on ground-truth boundaries")
    p = add("eval", cmd_eval, "boundary metrics")
    p.add_argument("--gt", required=True, help="corpus directory with ground truth")
    p.add_argument("--pred", help="pseudo-label or corpus directory")
    p.add_argument("--checkpoint", help="evaluate a network's class-aware output")
    p.add_argument("--kind", choices=("soft", "hard"), default="soft")
    p.add_argument("--tol", type=float, help="matching tolerance in pixels")
    p = add("sweep", cmd_sweep, "ablations and hyper-parameter sweeps")
    p.add_argument("--name", required=True)
    p.add_argument("--param", required=True,
                   choices=experiments.SWEEP_PARAMS + ("cam_robustness", "msf_nms", "branch"))
    p.add_argument("--values", help="comma-separated values")
    p.add_argument("--checkpoint")
    p = add("report", cmd_report, "collate metrics.csv files")
    p.add_argument("--runs", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args)
    except config.ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 3
    limiter = _limit_threads(_threads(args))
    try:
        if args.command == "config":
            out = _fresh_dir(args.out)
            _echo(out, cfg, args)
            config.dump(cfg, out / "run_config.json")
            message = f"wrote {out / 'run_config.json'}"
        else:
            message = args.func(args, cfg)
    except (CliError, imaging.InvalidInput, imaging.DecodeError, synthgen.InvalidConfig,
            net.TrainingDiverged, FileNotFoundError) as exc:
        print(f"error: {args.command}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    print(message)
    return 0
