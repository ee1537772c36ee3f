"""MIL training of the boundary network from confident label maps."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import mil, net, segments
from .imaging import InvalidInput

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    gamma: float = 10.0
    lam: float = mil.DEFAULT_LAMBDA
    base_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    flip: bool = True
    max_per_pixel: int | None = None
    seed: int = 0
    log_every: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidInput("steps must be non-negative")
        if self.gamma < 2:
            raise InvalidInput("gamma must be >= 2")
        if self.lam < 0:
            raise InvalidInput("lam must be non-negative")


def train_step(params, opt, x, sets, cfg: net.NetConfig, lam=mil.DEFAULT_LAMBDA, frozen=(),
               gamma=None):
    """One SGD step on the MIL loss of a single image; updates ``params`` in place.

    ``sets`` is either a labelled :class:`SegmentSets` or, together with
    ``gamma``, a confident label map whose full segment set is scored by the
    fused kernel.  Returns the loss breakdown evaluated before the update.
    Parameters whose name starts with any prefix in ``frozen`` are not updated.
    """
    out = net.forward(params, x, cfg, keep=True)
    if isinstance(sets, segments.SegmentSets):
        lb = mil.total_loss(out.b_ag, out.b_aw, sets, lam)
    else:
        lb = mil.dense_total_loss(out.b_ag, out.b_aw, sets, gamma, lam)
    net.check_finite({"total": lb.total, "loss_ag": lb.loss_ag, "loss_aw": lb.loss_aw},
                     params, opt.step)
    grads = net.backward(params, out, cfg, lb.grad_ag if lam > 0 else None, lb.grad_aw)
    grads = {k: g for k, g in grads.items() if not k.startswith(tuple(frozen))}
    net.sgd_update(params, grads, opt)
    return lb


def _schedule(n_images, steps, rng):
    """Image visiting order: consecutive seeded permutations of the corpus."""
    order = []
    while len(order) < steps:
        order.extend(rng.permutation(n_images).tolist())
    return order[:steps]


def train_wsbdn(images, label_maps, net_cfg: net.NetConfig, cfg: TrainConfig,
                params=None, history=None, frozen=()):
    """Train on ``(image, confident label map)`` pairs, batch size one.

    Horizontal flips (when enabled) mirror both the image and its label map,
    and the segment sets are rebuilt from the mirrored map.  Deterministic for
    a given seed.
    """
    if len(images) != len(label_maps) or not images:
        raise InvalidInput("need one label map per image and at least one image")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = net.init_params(net_cfg, seed=cfg.seed)
    if cfg.steps == 0:
        return params
    opt = net.init_optim(params, cfg.steps, cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.power)
    order = _schedule(len(images), cfg.steps, rng)
    flips = rng.random(cfg.steps) < 0.5 if cfg.flip else np.zeros(cfg.steps, dtype=bool)
    cap_rng = np.random.default_rng([cfg.seed, 1])
    for step, (i, flip) in enumerate(zip(order, flips)):
        x = net.preprocess(images[i])
        lab = label_maps[i]
        if flip:
            x, lab = x[:, :, ::-1], lab[:, ::-1]
        lab = np.ascontiguousarray(lab)
        if cfg.max_per_pixel is None:
            bags = lab
        else:
            bags = segments.build_segment_sets(lab, cfg.gamma, net_cfg.num_classes,
                                               cfg.max_per_pixel, cap_rng)
        lb = train_step(params, opt, np.ascontiguousarray(x), bags, net_cfg, cfg.lam,
                        frozen=frozen, gamma=cfg.gamma)
        if history is not None:
            history.append((lb.total, lb.loss_aw, lb.loss_ag))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d lr %.2e loss %.4f (aw %.4f ag %.4f)", step,
                     net.poly_lr(step, cfg.steps, cfg.base_lr, cfg.power),
                     lb.total, lb.loss_aw, lb.loss_ag)
    return params
