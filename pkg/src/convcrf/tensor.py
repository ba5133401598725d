"""Dense NCHW tensor substrate.

Tensors are plain numpy arrays. Public functions validate shapes, never
mutate their inputs and return new arrays. Float32 is the working dtype;
float64 inputs are kept as float64 so gradient checks can run at higher
precision. Reductions accumulate in float64.

Tiled tensors flatten the k x k window into a single axis of length k*k.
Offset index ``dy * k + dx`` addresses the neighbour at
``(x + dx - k // 2, y + dy - k // 2)`` where ``x`` indexes height and ``y``
indexes width.
"""

from __future__ import annotations

import struct
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, InvalidShapeError

CTF_MAGIC = b"CTF1"


def as_tensor(t, ndim=4, name="tensor"):
    """Return ``t`` as a float32 (or float64) array with ``ndim`` axes."""
    arr = np.asarray(t)
    if arr.ndim != ndim:
        raise InvalidShapeError(f"{name} must have {ndim} axes, got shape {arr.shape}")
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32, copy=False)
    return arr


def _check_odd(k):
    if int(k) != k or k < 1 or k % 2 == 0:
        raise InvalidArgumentError(f"filter size must be a positive odd integer, got {k}")
    return int(k)


def _check_factor(factor):
    if int(factor) != factor or factor < 1:
        raise InvalidArgumentError(f"factor must be a positive integer, got {factor}")
    return int(factor)


def make_rng(seed):
    """Deterministic generator (numpy PCG64), identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


# ---------------------------------------------------------------------------
# softmax


def softmax_channels(t):
    t = as_tensor(t)
    if t.size == 0:
        raise InvalidShapeError(f"softmax of an empty tensor (shape {t.shape})")
    z = t.astype(np.float64) - t.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return out.astype(t.dtype)


def softmax_channels_backward(q, dq):
    """Vector-Jacobian product of the channel softmax given its output ``q``."""
    q64 = q.astype(np.float64)
    dq64 = dq.astype(np.float64)
    dz = q64 * (dq64 - (q64 * dq64).sum(axis=1, keepdims=True))
    return dz.astype(q.dtype)


# ---------------------------------------------------------------------------
# padding and tiling


def pad_zero(t, margin):
    t = as_tensor(t)
    if int(margin) != margin or margin < 0:
        raise InvalidArgumentError(f"margin must be a non-negative integer, got {margin}")
    m = int(margin)
    return np.pad(t, ((0, 0), (0, 0), (m, m), (m, m)))


def crop(t, margin):
    m = int(margin)
    if m == 0:
        return t.copy()
    return t[:, :, m:-m, m:-m].copy()


@lru_cache(maxsize=None)
def window_offsets(k):
    """``(dx, dy)`` displacement of every flattened window index, centred on 0."""
    k = _check_odd(k)
    r = k // 2
    return tuple((dx - r, dy - r) for dy in range(k) for dx in range(k))


def center_index(k):
    k = _check_odd(k)
    return (k // 2) * k + k // 2


def im2col_tile(t, k):
    """Tile ``t`` into ``(bs, c, k*k, h, w)`` zero-padded neighbourhood windows."""
    t = as_tensor(t)
    k = _check_odd(k)
    r = k // 2
    bs, c, h, w = t.shape
    padded = pad_zero(t, r)
    out = np.empty((bs, c, k * k, h, w), dtype=t.dtype)
    for idx, (ox, oy) in enumerate(window_offsets(k)):
        out[:, :, idx] = padded[:, :, r + ox : r + ox + h, r + oy : r + oy + w]
    return out


def col2im_accumulate(tiled, k):
    """Adjoint of :func:`im2col_tile`: scatter-add windows back onto the image.

    Offsets are visited in flattened order, so the summation order is fixed.
    """
    k = _check_odd(k)
    r = k // 2
    bs, c, kk, h, w = tiled.shape
    if kk != k * k:
        raise InvalidShapeError(f"tiled axis has {kk} offsets, expected {k * k}")
    acc = np.zeros((bs, c, h + 2 * r, w + 2 * r), dtype=np.float64)
    for idx, (ox, oy) in enumerate(window_offsets(k)):
        acc[:, :, r + ox : r + ox + h, r + oy : r + oy + w] += tiled[:, :, idx]
    return acc[:, :, r : r + h, r : r + w].astype(tiled.dtype)


# ---------------------------------------------------------------------------
# resampling
#
# All three resamplers are separable linear maps, stored as (out, in)
# matrices per axis so the adjoint is the transposed product.


@lru_cache(maxsize=64)
def _avg_pool_matrix(n, factor):
    m = -(-n // factor)
    mat = np.zeros((m, n), dtype=np.float64)
    for j in range(m):
        lo, hi = j * factor, min((j + 1) * factor, n)
        mat[j, lo:hi] = 1.0 / (hi - lo)
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=64)
def _nearest_matrix(n, factor):
    mat = np.zeros((n * factor, n), dtype=np.float64)
    mat[np.arange(n * factor), np.arange(n * factor) // factor] = 1.0
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=64)
def _bilinear_matrix(n, factor):
    # align_corners=False: source coordinate (i + 0.5) / factor - 0.5
    out = n * factor
    mat = np.zeros((out, n), dtype=np.float64)
    for i in range(out):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        mat[i, i0] += 1.0 - lam
        mat[i, i1] += lam
    mat.setflags(write=False)
    return mat


def _apply_separable(t, rows, cols):
    out = np.matmul(np.matmul(rows, t.astype(np.float64)), cols.T)
    return out.astype(t.dtype)


def _resample_mats(kind, h, w, factor):
    build = {"avg": _avg_pool_matrix, "nearest": _nearest_matrix, "bilinear": _bilinear_matrix}[kind]
    return build(h, factor), build(w, factor)


def avg_pool(t, factor):
    """Average non-overlapping ``factor x factor`` blocks.

    Trailing rows/columns that do not fill a block form partial windows.
    """
    t = as_tensor(t)
    factor = _check_factor(factor)
    if factor == 1:
        return t.copy()
    return _apply_separable(t, *_resample_mats("avg", t.shape[2], t.shape[3], factor))


def nearest_upsample(t, factor):
    t = as_tensor(t)
    factor = _check_factor(factor)
    if factor == 1:
        return t.copy()
    return np.repeat(np.repeat(t, factor, axis=2), factor, axis=3)


def bilinear_upsample(t, factor):
    t = as_tensor(t)
    factor = _check_factor(factor)
    if factor == 1:
        return t.copy()
    return _apply_separable(t, *_resample_mats("bilinear", t.shape[2], t.shape[3], factor))


def resample_backward(kind, grad_out, in_hw, factor):
    """Adjoint of ``avg_pool`` / ``nearest_upsample`` / ``bilinear_upsample``.

    ``in_hw`` is the spatial size of the forward input.
    """
    if factor == 1:
        return grad_out.copy()
    rows, cols = _resample_mats(kind, in_hw[0], in_hw[1], factor)
    return _apply_separable(grad_out, rows.T, cols.T)


# ---------------------------------------------------------------------------
# CTF1 binary format


def write_ctf(path, t):
    """Write a 4-D tensor as CTF1: magic, 4 x u32 dims, f32 payload (little-endian)."""
    t = np.asarray(t)
    if t.ndim != 4:
        raise InvalidShapeError(f"CTF1 stores 4-D tensors, got shape {t.shape}")
    header = CTF_MAGIC + struct.pack("<4I", *t.shape)
    payload = np.ascontiguousarray(t, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_ctf(path):
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != CTF_MAGIC:
        raise InvalidShapeError(f"{path}: not a CTF1 file")
    shape = struct.unpack("<4I", raw[4:20])
    count = int(np.prod(shape))
    if len(raw) != 20 + 4 * count:
        raise InvalidShapeError(f"{path}: payload size does not match header {shape}")
    return np.frombuffer(raw, dtype="<f4", offset=20).astype(np.float32).reshape(shape)
