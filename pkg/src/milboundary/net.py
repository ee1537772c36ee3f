"""Two-branch boundary network in plain numpy with hand-written backprop.

Layout (single image, channels first)::

    x ─ s1 ─ s2 ─ s3 ─ s4            3x3 conv + ReLU per stage
        │    │    │    └─ 1x1 conv → C ─ upsample ─ sigmoid → B_aw
        └────┴────┴─ 1x1 projections ─ upsample ─ concat
                       ─ 1x1 conv ─ ReLU ─ 1x1 conv ─ sigmoid → B_ag
    B_final = B_aw * B_ag

Parameters live in an ordered ``dict`` of arrays.  Tensor layouts:
``s{k}.w`` is ``(out, in, 3, 3)``, every 1x1 conv weight is ``(out, in)`` and
biases are ``(out,)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import expit

from .imaging import InvalidInput, DecodeError, interpolation_matrix

STAGES = 4


@dataclass(frozen=True)
class NetConfig:
    num_classes: int = 3
    in_size: int = 64
    channels: tuple = (16, 32, 64, 64)
    strides: tuple = (1, 2, 2, 1)
    proj_width: int = 8
    ag_hidden: int = 16

    def __post_init__(self):
        if len(self.channels) != STAGES or len(self.strides) != STAGES:
            raise InvalidInput("need exactly four backbone stages")
        if any(s not in (1, 2) for s in self.strides):
            raise InvalidInput("stage strides must be 1 or 2")
        if self.num_classes < 1:
            raise InvalidInput("num_classes must be positive")

    def param_shapes(self):
        shapes = {}
        cin = 3
        for k, cout in enumerate(self.channels, start=1):
            shapes[f"s{k}.w"] = (cout, cin, 3, 3)
            shapes[f"s{k}.b"] = (cout,)
            cin = cout
        for k in range(1, 4):
            shapes[f"ag.p{k}.w"] = (self.proj_width, self.channels[k - 1])
            shapes[f"ag.p{k}.b"] = (self.proj_width,)
        shapes["ag.h.w"] = (self.ag_hidden, 3 * self.proj_width)
        shapes["ag.h.b"] = (self.ag_hidden,)
        shapes["ag.o.w"] = (1, self.ag_hidden)
        shapes["ag.o.b"] = (1,)
        shapes["aw.o.w"] = (self.num_classes, self.channels[-1])
        shapes["aw.o.b"] = (self.num_classes,)
        return shapes


def init_params(cfg: NetConfig, seed=0, dtype=np.float32):
    """Fan-in scaled uniform kernels, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in cfg.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def preprocess(image, dtype=np.float32):
    """``(H, W, 3)`` uint8 image to a centred ``(3, H, W)`` float tensor."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInput(f"expected an (H, W, 3) image, got {image.shape}")
    return (np.moveaxis(image, -1, 0).astype(dtype) / 255.0 - 0.5).astype(dtype)


# ----------------------------------------------------------------------------
# primitive ops

def _conv_forward(x, w, b, stride):
    cin, h, wd = x.shape
    cout = w.shape[0]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((cin, 3, 3, ho, wo), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(cin * 9, ho * wo)
    out = w.reshape(cout, -1) @ cols + b[:, None]
    return out.reshape(cout, ho, wo), cols


def _conv_backward(g, cols, w, x_shape, stride):
    cout = w.shape[0]
    cin, h, wd = x_shape
    ho, wo = g.shape[1:]
    g2 = g.reshape(cout, -1)
    dw = (g2 @ cols.T).reshape(w.shape)
    db = g2.sum(axis=1)
    dcols = (w.reshape(cout, -1).T @ g2).reshape(cin, 3, 3, ho, wo)
    dxp = np.zeros((cin, h + 2, wd + 2), dtype=g.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, i, j]
    return dw, db, dxp[:, 1:-1, 1:-1]


def _pointwise(x, w, b):
    c, h, wd = x.shape
    return (w @ x.reshape(c, -1) + b[:, None]).reshape(w.shape[0], h, wd)


def _pointwise_backward(g, x, w):
    c, h, wd = x.shape
    g2 = g.reshape(g.shape[0], -1)
    x2 = x.reshape(c, -1)
    return g2 @ x2.T, g2.sum(axis=1), (w.T @ g2).reshape(c, h, wd)


@lru_cache(maxsize=64)
def _resampler(h_in, w_in, h_out, w_out, dtype):
    ry = interpolation_matrix(h_in, h_out).astype(dtype)
    rx = interpolation_matrix(w_in, w_out).astype(dtype)
    ry.setflags(write=False)
    rx.setflags(write=False)
    return ry, rx


def _upsample(x, h, w):
    if x.shape[1:] == (h, w):
        return x
    ry, rx = _resampler(x.shape[1], x.shape[2], h, w, np.dtype(x.dtype).str)
    return ry @ (x @ rx.T)


def _upsample_backward(g, in_hw):
    if g.shape[1:] == tuple(in_hw):
        return g
    ry, rx = _resampler(in_hw[0], in_hw[1], g.shape[1], g.shape[2], np.dtype(g.dtype).str)
    return (ry.T @ g) @ rx


# ----------------------------------------------------------------------------
# network

@dataclass
class Outputs:
    b_ag: np.ndarray
    b_aw: np.ndarray
    b_final: np.ndarray
    cache: dict | None = field(default=None, repr=False)


def forward(params, x, cfg: NetConfig, keep=False) -> Outputs:
    """Run the network on a preprocessed ``(3, H, W)`` tensor."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != 3:
        raise InvalidInput(f"expected a (3, H, W) tensor, got {x.shape}")
    h, w = x.shape[1:]
    if min(h, w) < 8:
        raise InvalidInput(f"input {h}x{w} is too small")
    dtype = params["s1.w"].dtype
    x = x.astype(dtype, copy=False)

    acts, cols, pre = [x], [], []
    for k in range(1, STAGES + 1):
        z, c = _conv_forward(acts[-1], params[f"s{k}.w"], params[f"s{k}.b"], cfg.strides[k - 1])
        pre.append(z)
        cols.append(c)
        acts.append(np.maximum(z, 0))

    proj = []
    for k in range(1, 4):
        q = _pointwise(acts[k], params[f"ag.p{k}.w"], params[f"ag.p{k}.b"])
        proj.append(_upsample(q, h, w))
    cat = np.concatenate(proj, axis=0)
    hid_pre = _pointwise(cat, params["ag.h.w"], params["ag.h.b"])
    hid = np.maximum(hid_pre, 0)
    b_ag = expit(_pointwise(hid, params["ag.o.w"], params["ag.o.b"]))[0]

    aw_low = _pointwise(acts[STAGES], params["aw.o.w"], params["aw.o.b"])
    b_aw = expit(_upsample(aw_low, h, w))

    cache = None
    if keep:
        cache = dict(acts=acts, cols=cols, pre=pre, cat=cat, hid_pre=hid_pre, hid=hid,
                     b_ag=b_ag, b_aw=b_aw)
    return Outputs(b_ag, b_aw, b_aw * b_ag, cache)


def backward(params, out: Outputs, cfg: NetConfig, grad_ag=None, grad_aw=None):
    """Parameter gradients given ``dL/dB_ag`` and ``dL/dB_aw``.

    A branch whose output gradient is ``None`` is skipped entirely, so its
    head parameters get no entry in the returned dict.
    """
    c = out.cache
    if c is None:
        raise InvalidInput("forward was run without keep=True")
    dtype = params["s1.w"].dtype
    acts = c["acts"]
    h, w = acts[0].shape[1:]
    grads = {}
    g_acts = [None] * (STAGES + 1)

    def add(k, g):
        g_acts[k] = g if g_acts[k] is None else g_acts[k] + g

    if grad_aw is not None:
        b_aw = c["b_aw"]
        g_logit = (np.asarray(grad_aw) * b_aw * (1 - b_aw)).astype(dtype)
        g_low = _upsample_backward(g_logit, acts[STAGES].shape[1:])
        dw, db, gx = _pointwise_backward(g_low, acts[STAGES], params["aw.o.w"])
        grads["aw.o.w"], grads["aw.o.b"] = dw, db
        add(STAGES, gx)

    if grad_ag is not None:
        b_ag = c["b_ag"]
        g_logit = (np.asarray(grad_ag) * b_ag * (1 - b_ag)).astype(dtype)[None]
        dw, db, g_hid = _pointwise_backward(g_logit, c["hid"], params["ag.o.w"])
        grads["ag.o.w"], grads["ag.o.b"] = dw, db
        g_hid = g_hid * (c["hid_pre"] > 0)
        dw, db, g_cat = _pointwise_backward(g_hid, c["cat"], params["ag.h.w"])
        grads["ag.h.w"], grads["ag.h.b"] = dw, db
        p = cfg.proj_width
        for k in range(1, 4):
            g_q = _upsample_backward(g_cat[(k - 1) * p:k * p], acts[k].shape[1:])
            dw, db, gx = _pointwise_backward(g_q, acts[k], params[f"ag.p{k}.w"])
            grads[f"ag.p{k}.w"], grads[f"ag.p{k}.b"] = dw, db
            add(k, gx)

    for k in range(STAGES, 0, -1):
        if g_acts[k] is None:
            continue
        g_z = g_acts[k] * (c["pre"][k - 1] > 0)
        dw, db, gx = _conv_backward(g_z, c["cols"][k - 1], params[f"s{k}.w"],
                                    acts[k - 1].shape, cfg.strides[k - 1])
        grads[f"s{k}.w"], grads[f"s{k}.b"] = dw, db
        if k > 1:
            add(k - 1, gx)
    return {name: grads[name] for name in params if name in grads}


# ----------------------------------------------------------------------------
# optimisation

def poly_lr(step, total_steps, base_lr, power=0.9):
    if total_steps <= 0:
        raise InvalidInput("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise InvalidInput(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps) ** power


@dataclass
class OptimState:
    total_steps: int
    base_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    step: int = 0
    buffers: dict = field(default_factory=dict)

    @property
    def lr(self):
        return poly_lr(self.step, self.total_steps, self.base_lr, self.power)


def init_optim(params, total_steps, base_lr=1e-2, momentum=0.9, weight_decay=1e-4, power=0.9):
    return OptimState(total_steps, base_lr, momentum, weight_decay, power, 0,
                      {k: np.zeros_like(v) for k, v in params.items()})


def sgd_update(params, grads, opt: OptimState):
    """Momentum SGD with weight decay; parameters without a gradient are left alone."""
    lr = opt.lr
    for name, g in grads.items():
        p = params[name]
        g = g.astype(p.dtype, copy=False) + opt.weight_decay * p
        buf = opt.buffers[name]
        buf *= opt.momentum
        buf += g
        p -= (lr * buf).astype(p.dtype, copy=False)
    opt.step += 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def check_finite(loss_parts, params, step):
    if all(math.isfinite(v) for v in loss_parts.values()):
        return
    diag = dict(step=step, **loss_parts)
    diag["param_norms"] = {k: float(np.linalg.norm(v)) for k, v in params.items()}
    raise TrainingDiverged(f"non-finite loss at step {step}: {loss_parts}", diag)


# ----------------------------------------------------------------------------
# checkpoints

MAGIC = b"WSBD"
VERSION = 1


def save_checkpoint(path, params, opt: OptimState | None = None):
    """Write tensors as ``WSBD`` + version, then name/shape/float32 records.

    Optimiser buffers follow under ``<name>.momentum``; the step counter is the
    one-element tensor ``optim.step``.
    """
    tensors = list(params.items())
    if opt is not None:
        tensors += [(f"{k}.momentum", opt.buffers[k]) for k in params]
        tensors.append(("optim.step", np.array([opt.step], dtype=np.float32)))
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path):
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise DecodeError(f"{path}: not a WSBD checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise DecodeError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    tensors = {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DecodeError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return tensors


def load_checkpoint(path, cfg: NetConfig, total_steps=None, **optim_kwargs):
    """Read parameters (and optimiser state when present) for ``cfg``.

    Shape mismatches raise :class:`InvalidInput` naming the tensor; missing
    tensors (e.g. a file cut at a record boundary) raise :class:`DecodeError`.
    """
    tensors = read_tensors(path)
    params = {}
    for name, shape in cfg.param_shapes().items():
        if name not in tensors:
            raise DecodeError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise InvalidInput(f"tensor {name!r} has shape {tensors[name].shape}, "
                               f"config expects {shape}")
        params[name] = tensors[name]
    opt = None
    if "optim.step" in tensors:
        buffers = {}
        for name in params:
            buf = tensors.get(f"{name}.momentum")
            if buf is None or buf.shape != params[name].shape:
                raise DecodeError(f"{path}: bad optimiser buffer for {name!r}")
            buffers[name] = buf
        step = int(tensors["optim.step"][0])
        opt = OptimState(total_steps if total_steps is not None else max(step, 1),
                         step=step, buffers=buffers, **optim_kwargs)
    return params, opt
