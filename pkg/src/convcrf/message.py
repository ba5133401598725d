"""Truncated message passing.

``Q[b, c, x, y] = sum_o K[b, o, x, y] * P[b, c, neighbour_o(x, y)]``

The filter varies per pixel but is shared by every channel, so after tiling
``P`` into windows the operation is a per-pixel dot product along the offset
axis. Offsets are accumulated in flattened (row-major) order into a float64
buffer, which makes the result bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidShapeError
from .kernels import kernel_size
from .tensor import as_tensor, col2im_accumulate, im2col_tile, pad_zero, window_offsets


@dataclass
class MessagePassContext:
    kernel: np.ndarray
    tiled: np.ndarray
    k: int


def _check(K, P):
    K = as_tensor(K, name="kernel")
    P = as_tensor(P, name="input")
    bs, _, h, w = P.shape
    if K.shape[0] != bs or K.shape[2:] != (h, w):
        raise InvalidShapeError(f"kernel {K.shape} does not match input {P.shape}")
    return K, P, kernel_size(K)


def _out_dtype(K, P):
    return np.float64 if np.float64 in (K.dtype, P.dtype) else np.float32


def message_pass(K, P):
    """Inference-only message passing; reads windows straight from padded ``P``."""
    K, P, k = _check(K, P)
    r = k // 2
    bs, c, h, w = P.shape
    padded = pad_zero(P, r)
    acc = np.zeros((bs, c, h, w), dtype=np.float64)
    for idx, (ox, oy) in enumerate(window_offsets(k)):
        acc += K[:, None, idx] * padded[:, :, r + ox : r + ox + h, r + oy : r + oy + w]
    return acc.astype(_out_dtype(K, P))


def message_pass_with_context(K, P):
    """Message passing over the im2col-tiled input; keeps the tiles for backward."""
    K, P, k = _check(K, P)
    tiled = im2col_tile(P, k)
    acc = np.zeros(P.shape, dtype=np.float64)
    for idx in range(k * k):
        acc += K[:, None, idx] * tiled[:, :, idx]
    return acc.astype(_out_dtype(K, P)), MessagePassContext(kernel=K, tiled=tiled, k=k)


def message_pass_backward(ctx, dQ):
    """Return ``(dP, dK)`` for upstream gradient ``dQ``."""
    dQ = as_tensor(dQ, name="dQ")
    bs, c, kk, h, w = ctx.tiled.shape
    if dQ.shape != (bs, c, h, w):
        raise InvalidShapeError(f"gradient {dQ.shape} does not match forward output {(bs, c, h, w)}")
    dtype = _out_dtype(ctx.kernel, dQ)
    dq64 = dQ.astype(np.float64)
    dK = np.einsum("bchw,bckhw->bkhw", dq64, ctx.tiled.astype(np.float64))
    dtiled = ctx.kernel[:, None].astype(np.float64) * dq64[:, :, None]
    dP = col2im_accumulate(dtiled, ctx.k)
    return dP.astype(dtype), dK.astype(dtype)


# ---------------------------------------------------------------------------
# O(n^2) oracle


def brute_force_message_pass(pairwise, P, k, exclude_center=False):
    """Dense pairwise-sum reference.

    ``pairwise(b, xi, yi, xj, yj)`` returns the affinity of receiving pixel
    ``i`` and sending pixel ``j`` for broadcast coordinate arrays. Every pixel
    pair is enumerated, pairs outside the ``k x k`` window are dropped, and
    the sum is a dense ``(n, n) @ (n, c)`` product. Testing only.
    """
    P = np.asarray(P, dtype=np.float64)
    bs, c, h, w = P.shape
    r = k // 2
    xs, ys = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    xs, ys = xs.ravel(), ys.ravel()
    xi, xj = xs[:, None], xs[None, :]
    yi, yj = ys[:, None], ys[None, :]
    mask = (np.abs(xi - xj) <= r) & (np.abs(yi - yj) <= r)
    if exclude_center:
        mask &= ~((xi == xj) & (yi == yj))
    out = np.empty_like(P)
    for b in range(bs):
        weights = np.where(mask, pairwise(b, xi, yi, xj, yj), 0.0)
        out[b] = (weights @ P[b].reshape(c, h * w).T).T.reshape(c, h, w)
    return out


def kernel_lookup_pairwise(K):
    """Pairwise evaluator that reads affinities out of a kernel matrix."""
    K = np.asarray(K, dtype=np.float64)
    k = kernel_size(K)
    r = k // 2
    h, w = K.shape[2:]

    def pairwise(b, xi, yi, xj, yj):
        dx = np.clip(xj - xi + r, 0, k - 1)
        dy = np.clip(yj - yi + r, 0, k - 1)
        xi, yi = np.broadcast_arrays(xi, yi, dx)[:2]
        return K[b, dy * k + dx, np.clip(xi, 0, h - 1), np.clip(yi, 0, w - 1)]

    return pairwise


def gaussian_pairwise(features, specs):
    """Pairwise evaluator computing ``sum_m w_m exp(-sum_i d_i^2 / 2 theta_i^2)`` directly."""

    def pairwise(b, xi, yi, xj, yj):
        total = 0.0
        for spec in specs:
            sq = 0.0
            for name, theta in zip(spec.features, spec.thetas):
                plane = np.asarray(features[name][b], dtype=np.float64)
                sq = sq + ((plane[xi, yi] - plane[xj, yj]) / theta) ** 2
            total = total + spec.weight * np.exp(-0.5 * sq)
        return total

    return pairwise
