"""Feature stacks and truncated Gaussian kernel matrices.

A kernel matrix has shape ``(bs, k*k, h, w)``. Entry ``[b, o, x, y]`` is the
Gaussian affinity between pixel ``(x, y)`` and its neighbour at window offset
``o`` (see :func:`convcrf.tensor.window_offsets`). Neighbours that fall
outside the image are stored as exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError, InvalidShapeError
from .tensor import as_tensor, center_index, im2col_tile


@dataclass
class FeatureStack:
    """Named per-pixel feature planes, each shaped ``(bs, h, w)``."""

    planes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.planes:
            raise InvalidShapeError("a feature stack needs at least one plane")
        shapes = {np.shape(p) for p in self.planes.values()}
        if len(shapes) != 1 or len(next(iter(shapes))) != 3:
            raise InvalidShapeError(f"feature planes must share one (bs, h, w) shape, got {shapes}")

    @property
    def names(self):
        return list(self.planes)

    @property
    def shape(self):
        return np.shape(next(iter(self.planes.values())))

    def __getitem__(self, name):
        return self.planes[name]

    def __or__(self, other):
        return FeatureStack({**self.planes, **other.planes})


@dataclass(frozen=True)
class KernelSpec:
    features: tuple
    thetas: tuple
    weight: float = 1.0
    learnable: tuple = ()

    def __post_init__(self):
        if not self.features:
            raise ConfigurationError("kernel feature selector is empty")
        if len(self.thetas) != len(self.features):
            raise ConfigurationError("one bandwidth per selected feature is required")
        if any(not theta > 0 for theta in self.thetas):
            raise InvalidArgumentError(f"bandwidths must be positive, got {self.thetas}")


def spatial_features(bs, h, w, dtype=np.float32):
    """Pixel coordinates: ``pos_x`` runs along height, ``pos_y`` along width."""
    if h < 1 or w < 1:
        raise InvalidArgumentError(f"image must be at least 1x1, got {h}x{w}")
    xs, ys = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return FeatureStack(
        {
            "pos_x": np.broadcast_to(xs, (bs, h, w)).copy(),
            "pos_y": np.broadcast_to(ys, (bs, h, w)).copy(),
        }
    )


def color_features(image):
    """Colour planes ``r``, ``g``, ``b`` copied from a 3-channel image (0..255 scale)."""
    image = as_tensor(image, name="image")
    if image.shape[1] != 3:
        raise InvalidArgumentError(f"colour features need 3 channels, got {image.shape[1]}")
    return FeatureStack({name: image[:, i].copy() for i, name in enumerate("rgb")})


def feature_differences(plane, k):
    """Return ``(diff, valid)`` for one feature plane.

    ``diff[b, o, x, y] = plane[b, x, y] - plane[b, neighbour(o)]`` with zeros where
    the neighbour is outside the image; ``valid`` is the matching 0/1 mask
    shaped ``(1, k*k, h, w)``.
    """
    plane = np.asarray(plane)
    tiled = im2col_tile(plane[:, None], k)[:, 0]
    valid = im2col_tile(np.ones((1, 1) + plane.shape[1:], dtype=plane.dtype), k)[:, 0]
    diff = (plane[:, None] - tiled) * valid
    return diff, valid


def kernel_matrix(features, spec, k):
    """Truncated Gaussian kernel: ``exp(-sum_i |f_i(p) - f_i(q)|^2 / (2 theta_i^2))``."""
    missing = [name for name in spec.features if name not in features.planes]
    if missing:
        raise ConfigurationError(f"feature planes missing for kernel: {missing}")
    if any(not theta > 0 for theta in spec.thetas):
        raise InvalidArgumentError(f"bandwidths must be positive, got {spec.thetas}")
    sq = 0.0
    valid = None
    dtype = np.float32
    for name, theta in zip(spec.features, spec.thetas):
        plane = np.asarray(features[name])
        dtype = plane.dtype if plane.dtype == np.float64 else np.float32
        diff, valid = feature_differences(plane, k)
        sq = sq + (diff.astype(np.float64) / theta) ** 2
    return (np.exp(-0.5 * sq) * valid).astype(dtype)


def merge_kernels(kernels):
    """Weighted sum ``sum_i w_i * K_i`` of ``(weight, kernel_matrix)`` pairs."""
    if not kernels:
        raise InvalidArgumentError("nothing to merge")
    shape = np.shape(kernels[0][1])
    acc = np.zeros(shape, dtype=np.float64)
    for weight, km in kernels:
        if np.shape(km) != shape:
            raise InvalidArgumentError(f"kernel shapes differ: {np.shape(km)} vs {shape}")
        acc += weight * np.asarray(km, dtype=np.float64)
    dtype = np.float64 if any(np.asarray(km).dtype == np.float64 for _, km in kernels) else np.float32
    return acc.astype(dtype)


def kernel_size(km):
    kk = np.shape(km)[1]
    k = int(round(np.sqrt(kk)))
    if k * k != kk or k % 2 == 0:
        raise InvalidShapeError(f"offset axis of length {kk} is not an odd square")
    return k


def exclude_center(km):
    """Zero the self-affinity plane so a pixel sends no message to itself."""
    out = np.array(km, copy=True)
    out[:, center_index(kernel_size(out))] = 0
    return out
