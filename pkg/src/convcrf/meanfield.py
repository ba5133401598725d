"""Mean-field inference for the convolutional CRF.

Each iteration computes

    Q <- softmax(unary - compat(message_pass(K, Q)))

where ``unary`` are logits (negative unary energies), ``K`` is the merged,
centre-excluded kernel matrix and ``compat`` is the Potts model or a learned
``c x c`` matrix. ``K`` depends on the image only, so it is built once per
call.

With ``blur_factor > 1`` the kernel is built from average-pooled feature
planes, which widens the effective window by that factor. Two placements of
the reduced resolution are supported:

* ``blur_mode="message"`` (default): ``Q`` and the unary stay at full
  resolution; each message pass pools ``Q``, filters at low resolution and
  bilinearly upsamples the message.
* ``blur_mode="resolution"``: the unary is pooled too, every iteration runs at
  low resolution and the final ``Q`` is upsampled and renormalised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError, InvalidShapeError
from .kernels import FeatureStack, KernelSpec, color_features, feature_differences, spatial_features
from .message import message_pass, message_pass_with_context
from .params import CrfParams
from .tensor import as_tensor, avg_pool, bilinear_upsample, center_index, softmax_channels

POTTS = "potts"
MATRIX = "matrix"
BLUR_MODES = ("message", "resolution")


@dataclass
class CompatibilityTransform:
    variant: str = POTTS
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.variant == POTTS:
            if self.matrix is not None:
                raise ConfigurationError("the Potts transform takes no matrix")
        elif self.variant == MATRIX:
            m = np.asarray(self.matrix)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise InvalidArgumentError(f"compatibility matrix must be square, got {m.shape}")
        else:
            raise ConfigurationError(f"unknown compatibility variant {self.variant!r}")

    @classmethod
    def potts_matrix(cls, c):
        """Learnable transform initialised to the Potts pattern (0 diagonal, 1 elsewhere)."""
        return cls(MATRIX, (1.0 - np.eye(c)).astype(np.float32))


@dataclass
class ConvCrfConfig:
    filter_size: int = 7
    iterations: int = 5
    blur_factor: int = 4
    normalization: str = "softmax"
    compatibility: str = POTTS
    exclude_center: bool = True
    blur_mode: str = "message"

    def __post_init__(self):
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ConfigurationError(f"filter_size must be odd and positive, got {self.filter_size}")
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if self.blur_factor < 1:
            raise ConfigurationError(f"blur_factor must be >= 1, got {self.blur_factor}")
        if self.normalization != "softmax":
            raise ConfigurationError(f"unsupported normalization {self.normalization!r}")
        if self.compatibility not in (POTTS, MATRIX):
            raise ConfigurationError(f"unknown compatibility {self.compatibility!r}")
        if self.blur_mode not in BLUR_MODES:
            raise ConfigurationError(f"unknown blur_mode {self.blur_mode!r}")


@dataclass
class MeanFieldState:
    Q: np.ndarray
    iteration: int = 0


def init_state(unary_logits):
    return MeanFieldState(softmax_channels(as_tensor(unary_logits, name="unary")), 0)


def apply_compatibility(q_msg, ct):
    q_msg = as_tensor(q_msg)
    if ct.variant == POTTS:
        return q_msg.sum(axis=1, keepdims=True, dtype=np.float64).astype(q_msg.dtype) - q_msg
    m = np.asarray(ct.matrix)
    if m.shape != (q_msg.shape[1],) * 2:
        raise InvalidArgumentError(f"compatibility matrix {m.shape} does not match {q_msg.shape[1]} classes")
    out = np.einsum("lm,bmhw->blhw", m.astype(np.float64), q_msg.astype(np.float64))
    return out.astype(np.result_type(q_msg.dtype, m.dtype, np.float32))


def compatibility_backward(q_msg, ct, d_out):
    """Return ``(d_q_msg, d_matrix)``; ``d_matrix`` is None for Potts."""
    d64 = d_out.astype(np.float64)
    if ct.variant == POTTS:
        d_msg = d64.sum(axis=1, keepdims=True) - d64
        return d_msg.astype(d_out.dtype), None
    m = np.asarray(ct.matrix, dtype=np.float64)
    d_msg = np.einsum("lm,blhw->bmhw", m, d64)
    d_m = np.einsum("blhw,bmhw->lm", d64, q_msg.astype(np.float64))
    return d_msg.astype(d_out.dtype), d_m


def argmax_labels(Q):
    """Per-pixel class argmax; ties resolve to the lowest class index."""
    return np.argmax(as_tensor(Q), axis=1).astype(np.int64)


def mean_field_step(state, unary_logits, K, ct, config=None):
    msg = message_pass(K, state.Q)
    z = as_tensor(unary_logits, name="unary") - apply_compatibility(msg, ct)
    return MeanFieldState(softmax_channels(z), state.iteration + 1)


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class Tape:
    """Activations recorded by a training-mode forward pass."""

    config: ConvCrfConfig
    params: CrfParams
    ct: CompatibilityTransform
    shape: tuple
    low_shape: tuple
    g_app: np.ndarray
    g_smooth: np.ndarray
    diffs: dict
    kernel: np.ndarray
    steps: list = field(default_factory=list)
    q_low: np.ndarray | None = None
    q_up: np.ndarray | None = None
    q_out: np.ndarray | None = None


def compatibility_from(params, config, num_classes):
    if config.compatibility == POTTS:
        return CompatibilityTransform(POTTS)
    if params.compatibility is None:
        raise ConfigurationError("compatibility 'matrix' requires params.compatibility")
    ct = CompatibilityTransform(MATRIX, params.compatibility)
    if ct.matrix.shape != (num_classes, num_classes):
        raise InvalidArgumentError(f"compatibility matrix {ct.matrix.shape} does not match {num_classes} classes")
    return ct


def build_features(image, params, blur_factor):
    """Feature stack for both kernels at the working (possibly pooled) resolution.

    Positions stay in full-resolution pixel units after pooling, so the
    bandwidths keep their meaning while the window covers ``blur_factor``
    times more image.
    """
    image = as_tensor(image, name="image")
    bs, _, h, w = image.shape
    dtype = image.dtype
    pos = spatial_features(bs, h, w, dtype=dtype)
    planes = {name: pos[name] for name in pos.names}
    planes.update(color_features(image).planes)
    if params.smoothness_features is not None:
        sf = np.asarray(params.smoothness_features)
        if sf.shape != (2, h, w):
            raise InvalidShapeError(f"smoothness features {sf.shape} do not match image size {(2, h, w)}")
        sf = sf.astype(dtype)
        planes["smooth_x"] = np.broadcast_to(sf[0], (bs, h, w))
        planes["smooth_y"] = np.broadcast_to(sf[1], (bs, h, w))
    else:
        planes["smooth_x"], planes["smooth_y"] = planes["pos_x"], planes["pos_y"]
    if blur_factor > 1:
        names = list(planes)
        stacked = np.stack([planes[n] for n in names], axis=1)
        pooled = avg_pool(stacked, blur_factor)
        planes = {n: pooled[:, i] for i, n in enumerate(names)}
    return FeatureStack(planes)


def kernel_specs(params):
    w_app, w_smooth = params.weights
    alpha, beta, gamma = params.thetas
    appearance = KernelSpec(("pos_x", "pos_y", "r", "g", "b"), (alpha, alpha, beta, beta, beta), w_app)
    smoothness = KernelSpec(("smooth_x", "smooth_y"), (gamma, gamma), w_smooth)
    return appearance, smoothness


def _gaussian(diffs, valid, spec):
    sq = 0.0
    for name, theta in zip(spec.features, spec.thetas):
        sq = sq + (diffs[name].astype(np.float64) / theta) ** 2
    return np.exp(-0.5 * sq) * valid


def build_kernel(features, params, config):
    """Return ``(K, g_app, g_smooth, diffs)``: merged kernel plus its ingredients."""
    k = config.filter_size
    diffs, valid = {}, None
    for name in features.names:
        diffs[name], valid = feature_differences(features[name], k)
    appearance, smoothness = kernel_specs(params)
    g_app = _gaussian(diffs, valid, appearance)
    g_smooth = _gaussian(diffs, valid, smoothness)
    K = appearance.weight * g_app + smoothness.weight * g_smooth
    if config.exclude_center:
        K[:, center_index(k)] = 0.0
    return K, g_app, g_smooth, diffs


def _upsample_to(t, factor, h, w):
    return bilinear_upsample(t, factor)[:, :, :h, :w]


def run_crf(unary_logits, image, params, config, record=False):
    """Run unrolled mean-field inference; returns ``(Q, tape_or_None)``."""
    unary = as_tensor(unary_logits, name="unary")
    image = as_tensor(image, name="image")
    bs, c, h, w = unary.shape
    if image.shape[0] != bs or image.shape[2:] != (h, w):
        raise InvalidShapeError(f"image {image.shape} is not aligned with unary {unary.shape}")
    dtype = np.float64 if np.float64 in (unary.dtype, image.dtype) else np.float32
    f = config.blur_factor
    pooled_unary = f > 1 and config.blur_mode == "resolution"
    pooled_messages = f > 1 and config.blur_mode == "message"
    ct = compatibility_from(params, config, c)

    features = build_features(image.astype(dtype), params, f)
    K, g_app, g_smooth, diffs = build_kernel(features, params, config)
    K = K.astype(dtype)
    u = avg_pool(unary.astype(dtype), f) if pooled_unary else unary.astype(dtype)

    tape = None
    if record:
        tape = Tape(config, params, ct, (bs, c, h, w), u.shape, g_app, g_smooth, diffs, K)

    Q = softmax_channels(u)
    for _ in range(config.iterations):
        P = avg_pool(Q, f) if pooled_messages else Q
        if record:
            msg, ctx = message_pass_with_context(K, P)
        else:
            msg, ctx = message_pass(K, P), None
        if pooled_messages:
            msg = _upsample_to(msg, f, h, w)
        Q = softmax_channels(u - apply_compatibility(msg, ct).astype(dtype))
        if record:
            tape.steps.append((ctx, msg, Q))

    if pooled_unary:
        q_up = _upsample_to(Q, f, h, w)
        out = (q_up / q_up.sum(axis=1, keepdims=True, dtype=np.float64)).astype(dtype)
    else:
        q_up, out = Q, Q
    if record:
        tape.q_low, tape.q_up, tape.q_out = Q, q_up, out
    return out, tape


def inference(unary_logits, image, params=None, config=None):
    """Refined per-pixel class distribution, same shape as ``unary_logits``."""
    params = CrfParams() if params is None else params
    config = ConvCrfConfig() if config is None else config
    Q, _ = run_crf(unary_logits, image, params, config)
    return Q
