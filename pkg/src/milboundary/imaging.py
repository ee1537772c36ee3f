"""Grid types, resampling, mask boundaries and the PFM/PGM codecs.

Conventions used across the package:

* a score map is a float ``(H, W)`` array, a multi-channel map is ``(C, H, W)``;
* a segmentation mask is an integer ``(H, W)`` array holding class ids
  ``0..C-1`` or :data:`BACKGROUND`;
* a boundary label map is a boolean ``(C, H, W)`` array;
* RGB images are ``(H, W, 3)`` uint8 arrays.
"""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

BACKGROUND = -1
IGNORE = -2


class InvalidInput(ValueError):
    pass


class DecodeError(ValueError):
    pass


def normalize_cam(raw):
    """Clamp negative attention to zero and divide by the global maximum.

    An all-zero map is returned unchanged.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise InvalidInput("empty score map")
    if not np.all(np.isfinite(raw)):
        raise InvalidInput("score map contains non-finite values")
    out = np.maximum(raw, 0.0)
    peak = out.max()
    if peak > 0:
        out = out / peak
    return out


_NEIGHBORS_8 = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


def extract_boundaries(mask, num_classes):
    """Per-class boundary bits of a segmentation mask.

    Bit ``(c, y, x)`` is set when ``mask[y, x] == c`` and at least one of the
    eight in-image neighbours carries a different label.  Background gets no
    channel.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvalidInput(f"mask must be 2-D, got shape {mask.shape}")
    if mask.size and (mask.max() >= num_classes or mask.min() < BACKGROUND):
        raise InvalidInput("mask holds labels outside {background, 0..C-1}")
    h, w = mask.shape
    differs = np.zeros((h, w), dtype=bool)
    for dy, dx in _NEIGHBORS_8:
        ys = slice(max(0, -dy), h - max(0, dy))
        xs = slice(max(0, -dx), w - max(0, dx))
        ny = slice(max(0, dy), h - max(0, -dy))
        nx = slice(max(0, dx), w - max(0, -dx))
        differs[ys, xs] |= mask[ys, xs] != mask[ny, nx]
    out = np.zeros((num_classes, h, w), dtype=bool)
    for c in range(num_classes):
        out[c] = differs & (mask == c)
    return out


def _axis_weights(n_in, n_out):
    """Source indices and weights of align-corners-false linear resampling.

    The table is built for the left half and mirrored, so resampling commutes
    exactly with flipping the axis.
    """
    i0 = np.empty(n_out, dtype=np.intp)
    i1 = np.empty(n_out, dtype=np.intp)
    w0 = np.empty(n_out, dtype=np.float64)
    w1 = np.empty(n_out, dtype=np.float64)
    scale = n_in / n_out
    half = (n_out + 1) // 2
    for j in range(half):
        if 2 * j + 1 == n_out:
            src = (n_in - 1) / 2.0  # centre sample, exactly self-symmetric
        else:
            src = min(max((j + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        i0[j], i1[j], w0[j], w1[j] = lo, hi, 1.0 - frac, frac
    for j in range(half, n_out):
        m = n_out - 1 - j
        i0[j], i1[j] = n_in - 1 - i1[m], n_in - 1 - i0[m]
        w0[j], w1[j] = w1[m], w0[m]
    return i0, i1, w0, w1


def resize_bilinear(values, new_width, new_height):
    """Bilinear resampling (half-pixel centres) of the last two axes."""
    if new_width < 1 or new_height < 1:
        raise InvalidInput(f"target size must be positive, got {new_width}x{new_height}")
    values = np.asarray(values)
    h, w = values.shape[-2:]
    if h == 0 or w == 0:
        raise InvalidInput("cannot resize an empty map")
    out = values
    if new_height != h:
        i0, i1, w0, w1 = _axis_weights(h, new_height)
        out = out[..., i0, :] * w0[:, None] + out[..., i1, :] * w1[:, None]
    if new_width != w:
        i0, i1, w0, w1 = _axis_weights(w, new_width)
        out = out[..., :, i0] * w0 + out[..., :, i1] * w1
    if out is values:
        out = values.copy()
    return out


def interpolation_matrix(n_in, n_out, dtype=np.float64):
    """Dense ``(n_out, n_in)`` matrix form of :func:`resize_bilinear` on one axis."""
    i0, i1, w0, w1 = _axis_weights(n_in, n_out)
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), w0)
    np.add.at(m, (rows, i1), w1)
    return m


# ----------------------------------------------------------------------------
# codecs

def write_pfm(path, values):
    """Write a single-channel float map as little-endian, bottom-up PFM."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2 or values.size == 0:
        raise InvalidInput(f"PFM needs a non-empty 2-D map, got shape {values.shape}")
    h, w = values.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    payload = np.ascontiguousarray(values[::-1]).astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


_PFM_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s")


def read_pfm(path):
    data = Path(path).read_bytes()
    m = _PFM_HEADER.match(data)
    if m is None:
        raise DecodeError(f"{path}: malformed PFM header")
    if m.group(1) != b"Pf":
        raise DecodeError(f"{path}: colour PFM is not supported")
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError:
        raise DecodeError(f"{path}: bad PFM scale field") from None
    if w == 0 or h == 0 or scale == 0 or not np.isfinite(scale):
        raise DecodeError(f"{path}: bad PFM dimensions or scale")
    payload = data[m.end():]
    if len(payload) != 4 * w * h:
        raise DecodeError(f"{path}: expected {4 * w * h} payload bytes, got {len(payload)}")
    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(payload, dtype=dtype).reshape(h, w)[::-1].astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise DecodeError(f"{path}: non-finite values in PFM payload")
    return values


def write_pgm(path, values):
    """Write an 8-bit grayscale image as binary PGM (P5)."""
    values = np.asarray(values)
    if values.ndim != 2 or values.size == 0:
        raise InvalidInput(f"PGM needs a non-empty 2-D image, got shape {values.shape}")
    if values.dtype != np.uint8:
        if values.min() < 0 or values.max() > 255:
            raise InvalidInput("PGM values must lie in 0..255")
        values = values.astype(np.uint8)
    h, w = values.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + values.tobytes())


_PGM_HEADER = re.compile(rb"^P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path):
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if m is None:
        raise DecodeError(f"{path}: malformed PGM header")
    w, h, maxval = (int(g) for g in m.groups())
    if w == 0 or h == 0 or not 0 < maxval < 256:
        raise DecodeError(f"{path}: unsupported PGM dimensions or maxval")
    payload = data[m.end():]
    if len(payload) != w * h:
        raise DecodeError(f"{path}: expected {w * h} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def channel_path(stem, k, ext):
    return f"{os.fspath(stem)}.c{k}.{ext}"


def write_multi_pfm(stem, values):
    """Store a ``(C, H, W)`` map as ``<stem>.c<k>.pfm`` files; returns the paths."""
    paths = []
    for k, channel in enumerate(np.asarray(values)):
        p = channel_path(stem, k, "pfm")
        write_pfm(p, channel)
        paths.append(p)
    return paths


def read_multi_pfm(stem, channels):
    return np.stack([read_pfm(channel_path(stem, k, "pfm")) for k in range(channels)])


def write_multi_pgm(stem, values):
    paths = []
    for k, channel in enumerate(np.asarray(values)):
        p = channel_path(stem, k, "pgm")
        write_pgm(p, channel)
        paths.append(p)
    return paths


def read_multi_pgm(stem, channels):
    return np.stack([read_pgm(channel_path(stem, k, "pgm")) for k in range(channels)])


def write_rgb(stem, image):
    """An RGB image is stored as three PGM planes."""
    return write_multi_pgm(stem, np.moveaxis(np.asarray(image, dtype=np.uint8), -1, 0))


def read_rgb(stem):
    return np.moveaxis(read_multi_pgm(stem, 3), 0, -1).copy()


def write_label_pgm(path, labels):
    """Categorical map palette: 0=background, 1..C=classes, 255=ignore."""
    labels = np.asarray(labels)
    out = np.where(labels == IGNORE, 255, labels + 1)
    write_pgm(path, out.astype(np.uint8))


def read_label_pgm(path):
    raw = read_pgm(path).astype(np.int16)
    return np.where(raw == 255, IGNORE, raw - 1).astype(np.int16)
