"""Fully supervised retraining of the network on hard pseudo boundary labels."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import net
from .imaging import InvalidInput
from .training import TrainConfig, _schedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PixelLossConfig:
    eps: float = 1e-7


def class_weights(target):
    """Per-class ``beta_c``: fraction of negative pixels in channel ``c``."""
    target = np.asarray(target, dtype=bool)
    n = target[0].size
    return (n - target.reshape(target.shape[0], -1).sum(axis=1)) / n


def balanced_bce(pred, target, cfg: PixelLossConfig = PixelLossConfig()):
    """Class-balanced binary cross-entropy and its gradient w.r.t. ``pred``.

    Channel ``c`` weighs positives by ``beta_c`` and negatives by
    ``1 - beta_c``; each channel is averaged over pixels and the channels are
    averaged.  The clamp to ``[eps, 1 - eps]`` has zero derivative outside.
    """
    pred = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=bool)
    if pred.shape != t.shape or pred.ndim != 3:
        raise InvalidInput(f"shape mismatch: {pred.shape} vs {t.shape}")
    num_classes, n = pred.shape[0], pred[0].size
    beta = class_weights(t)[:, None, None]
    eps = cfg.eps
    p = np.clip(pred, eps, 1.0 - eps)
    inside = (pred > eps) & (pred < 1.0 - eps)
    pos = beta * t
    neg = (1.0 - beta) * ~t
    value = -(pos * np.log(p) + neg * np.log1p(-p)).sum() / (n * num_classes)
    grad = np.where(inside, -pos / p + neg / (1.0 - p), 0.0) / (n * num_classes)
    return float(value), grad


def train_student(images, targets, net_cfg: net.NetConfig, cfg: TrainConfig,
                  loss_cfg: PixelLossConfig = PixelLossConfig(), params=None, history=None):
    """Train a fresh network on ``(image, hard boundary map)`` pairs.

    Only the class-aware branch output is supervised, so the class-agnostic
    head keeps its initial weights.
    """
    if len(images) != len(targets) or not images:
        raise InvalidInput("need one target per image and at least one image")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = net.init_params(net_cfg, seed=cfg.seed)
    if cfg.steps == 0:
        return params
    opt = net.init_optim(params, cfg.steps, cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.power)
    order = _schedule(len(images), cfg.steps, rng)
    flips = rng.random(cfg.steps) < 0.5 if cfg.flip else np.zeros(cfg.steps, dtype=bool)
    for step, (i, flip) in enumerate(zip(order, flips)):
        x = net.preprocess(images[i])
        t = np.asarray(targets[i], dtype=bool)
        if flip:
            x, t = x[:, :, ::-1], t[:, :, ::-1]
        out = net.forward(params, np.ascontiguousarray(x), net_cfg, keep=True)
        value, grad = balanced_bce(out.b_aw, t, loss_cfg)
        net.check_finite({"balanced_bce": value}, params, opt.step)
        grads = net.backward(params, out, net_cfg, None, grad)
        net.sgd_update(params, grads, opt)
        if history is not None:
            history.append(value)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("student step %d loss %.5f", step, value)
    return params


def predict(params, image, net_cfg: net.NetConfig):
    """Class-aware boundary map of the student (plain forward pass)."""
    out = net.forward(params, net.preprocess(image, dtype=params["s1.w"].dtype), net_cfg)
    return np.asarray(out.b_aw, dtype=np.float64)
