"""Fitting CRF parameters by back-propagating through unrolled mean-field.

The unary logits are fixed inputs (two-stage training): only the kernel
weights, bandwidths, optional smoothness feature planes and the optional
compatibility matrix receive gradients. Gradients are taken with respect to
the stored (log-space) values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, InvalidArgumentError, TrainingDivergedError, UsageError
from .meanfield import MATRIX, ConvCrfConfig, compatibility_backward, run_crf
from .message import message_pass_backward
from .params import PARAM_GROUPS, CrfParams
from .tensor import center_index, col2im_accumulate, resample_backward, softmax_channels_backward

log = logging.getLogger(__name__)

IGNORE_INDEX = 255
PROB_FLOOR = 1e-8


def _valid_labels(Q, labels, ignore_index):
    labels = np.asarray(labels)
    if labels.shape != (Q.shape[0],) + Q.shape[2:]:
        raise DataError(f"labels {labels.shape} do not match prediction {Q.shape}")
    keep = labels != ignore_index
    if np.any((labels[keep] < 0) | (labels[keep] >= Q.shape[1])):
        raise DataError(f"label outside [0, {Q.shape[1]})")
    return labels, keep


def loss_cross_entropy(Q, labels, ignore_index=IGNORE_INDEX):
    """Mean ``-log Q[true class]`` over non-ignored pixels, probabilities floored at 1e-8."""
    labels, keep = _valid_labels(Q, labels, ignore_index)
    if not np.any(keep):
        return 0.0
    b, x, y = np.nonzero(keep)
    p = np.asarray(Q, dtype=np.float64)[b, labels[keep], x, y]
    return float(np.mean(-np.log(np.maximum(p, PROB_FLOOR))))


def loss_cross_entropy_grad(Q, labels, ignore_index=IGNORE_INDEX):
    labels, keep = _valid_labels(Q, labels, ignore_index)
    grad = np.zeros(Q.shape, dtype=np.float64)
    n = int(np.sum(keep))
    if n == 0:
        return grad
    b, x, y = np.nonzero(keep)
    p = np.asarray(Q, dtype=np.float64)[b, labels[keep], x, y]
    grad[b, labels[keep], x, y] = np.where(p > PROB_FLOOR, -1.0 / (n * np.maximum(p, PROB_FLOOR)), 0.0)
    return grad


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape, d_out):
    """Gradients of a scalar loss w.r.t. every parameter group in ``tape.params``.

    ``d_out`` is the loss gradient w.r.t. the returned distribution. The
    result maps group names (as in :data:`convcrf.params.PARAM_GROUPS`) to
    arrays shaped like the parameters.
    """
    if tape is None:
        raise UsageError("backward needs a tape from run_crf(..., record=True)")
    cfg, params = tape.config, tape.params
    bs, c, h, w = tape.shape
    f, k = cfg.blur_factor, cfg.filter_size
    d = np.asarray(d_out, dtype=np.float64)
    if d.shape != tape.shape:
        raise InvalidArgumentError(f"gradient {d.shape} does not match output {tape.shape}")

    pooled_unary = f > 1 and cfg.blur_mode == "resolution"
    pooled_messages = f > 1 and cfg.blur_mode == "message"
    lh, lw = tape.kernel.shape[2:]

    def upsample_adjoint(g):
        padded = np.zeros((bs, c, lh * f, lw * f))
        padded[:, :, :h, :w] = g
        return resample_backward("bilinear", padded, (lh, lw), f)

    if pooled_unary:
        out = tape.q_out.astype(np.float64)
        total = tape.q_up.astype(np.float64).sum(axis=1, keepdims=True)
        dQ = upsample_adjoint((d - (d * out).sum(axis=1, keepdims=True)) / total)
    else:
        dQ = d

    dK = np.zeros(tape.kernel.shape)
    dM = np.zeros((c, c)) if tape.ct.variant == MATRIX else None
    for ctx, msg, q in reversed(tape.steps):
        dz = softmax_channels_backward(q.astype(np.float64), dQ)
        d_msg, d_m = compatibility_backward(msg, tape.ct, -dz)
        if d_m is not None:
            dM += d_m
        if pooled_messages:
            d_msg = upsample_adjoint(d_msg)
        dP, dk = message_pass_backward(ctx, d_msg)
        dK += dk
        dP = dP.astype(np.float64)
        dQ = resample_backward("avg", dP, (h, w), f) if pooled_messages else dP
    if cfg.exclude_center:
        dK[:, center_index(k)] = 0.0

    weights, thetas = params.weights, params.thetas
    alpha, beta, gamma = thetas
    g_app, g_smooth, diffs = tape.g_app, tape.g_smooth, tape.diffs
    a = weights[0] * dK * g_app
    s = weights[1] * dK * g_smooth
    grads = {
        "log_weights": np.array([np.sum(a), np.sum(s)]),
        "log_thetas": np.array(
            [
                np.sum(a * (diffs["pos_x"] ** 2 + diffs["pos_y"] ** 2)) / alpha**2,
                np.sum(a * (diffs["r"] ** 2 + diffs["g"] ** 2 + diffs["b"] ** 2)) / beta**2,
                np.sum(s * (diffs["smooth_x"] ** 2 + diffs["smooth_y"] ** 2)) / gamma**2,
            ]
        ),
    }
    # zero weights are stored as -inf; their kernels carry no gradient
    grads["log_weights"] = np.where(np.isfinite(params.log_weights), grads["log_weights"], 0.0)

    if params.smoothness_features is not None:
        planes = []
        for name in ("smooth_x", "smooth_y"):
            t = s * diffs[name].astype(np.float64) / gamma**2
            planes.append(col2im_accumulate(t[:, None], k)[:, 0] - t.sum(axis=1))
        d_low = np.stack(planes, axis=1)
        d_full = resample_backward("avg", d_low, (h, w), f) if f > 1 else d_low
        grads["smoothness_features"] = d_full.sum(axis=0)
    if params.compatibility is not None:
        grads["compatibility"] = dM if dM is not None else np.zeros_like(params.compatibility, dtype=np.float64)
    return grads


def loss_and_grads(params, config, image, unary, labels, ignore_index=IGNORE_INDEX):
    Q, tape = run_crf(unary, image, params, config, record=True)
    loss = loss_cross_entropy(Q, labels, ignore_index)
    return loss, backward(tape, loss_cross_entropy_grad(Q, labels, ignore_index))


# ---------------------------------------------------------------------------
# optimisers


class SGD:
    def __init__(self, learning_rate):
        self.learning_rate = learning_rate
        self.t = 0

    def step(self, values, grads):
        self.t += 1
        return {name: values[name] - self.learning_rate * grads[name] for name in grads}

    def state_dict(self):
        return {"t": np.array([self.t], dtype=np.float32)}

    def load_state_dict(self, state):
        self.t = int(state.get("t", np.zeros(1))[0])


class Adam:
    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, values, grads):
        self.t += 1
        out = {}
        for name, g in grads.items():
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            out[name] = values[name] - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return out

    def state_dict(self):
        state = {"t": np.array([self.t], dtype=np.float32)}
        for name in self.m:
            state[f"m.{name}"] = self.m[name]
            state[f"v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state):
        self.t = int(state.get("t", np.zeros(1))[0])
        for key, value in state.items():
            if key.startswith("m."):
                self.m[key[2:]] = np.asarray(value, dtype=np.float64)
            elif key.startswith("v."):
                self.v[key[2:]] = np.asarray(value, dtype=np.float64)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 100
    batch_size: int = 1
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    trainable: tuple | None = None
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidArgumentError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.steps < 0:
            raise InvalidArgumentError(f"steps must be non-negative, got {self.steps}")
        if self.batch_size < 1:
            raise InvalidArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return SGD(self.learning_rate)
        return Adam(self.learning_rate, self.beta1, self.beta2, self.eps)


def _batch_indices(seed, step, n, batch_size):
    if batch_size >= n:
        return np.arange(n)
    rng = np.random.Generator(np.random.PCG64([seed, step]))
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def dataset_loss(params, config, dataset, ignore_index=IGNORE_INDEX):
    """Mean per-sample cross-entropy over ``(image, unary, labels)`` triples."""
    losses = [loss_cross_entropy(run_crf(u, img, params, config)[0], lab, ignore_index) for img, u, lab in dataset]
    return float(np.mean(losses))


def fit(params, dataset, tc, config=None, optimizer=None, start_step=0):
    """Optimise ``params`` on ``dataset`` for ``tc.steps`` updates.

    ``dataset`` holds ``(image, unary_logits, labels)`` triples. Returns
    ``(params, losses)`` where ``losses[i]`` is the mini-batch loss measured
    before update ``i``. Pass a previously used ``optimizer`` and
    ``start_step`` to resume a run. Inputs are never modified.
    """
    if not dataset:
        raise InvalidArgumentError("cannot fit on an empty dataset")
    config = ConvCrfConfig() if config is None else config
    optimizer = tc.make_optimizer() if optimizer is None else optimizer
    present = params.groups()
    trainable = [g for g in (tc.trainable or PARAM_GROUPS) if g in present]
    values = {name: np.asarray(present[name], dtype=np.float64) for name in trainable}
    current = params.copy()
    losses = []
    for step in range(start_step, start_step + tc.steps):
        idx = _batch_indices(tc.seed, step, len(dataset), tc.batch_size)
        batch_loss, batch_grads = 0.0, {name: np.zeros_like(v) for name, v in values.items()}
        for i in idx:
            image, unary, labels = dataset[i]
            loss, grads = loss_and_grads(current, config, image, unary, labels, tc.ignore_index)
            batch_loss += loss / len(idx)
            for name in trainable:
                batch_grads[name] += grads[name] / len(idx)
        finite = np.isfinite(batch_loss) and all(np.all(np.isfinite(g)) for g in batch_grads.values())
        if not finite:
            state = {"step": step, "params": current.describe(), "losses": losses[-10:], "loss": batch_loss}
            raise TrainingDivergedError(f"non-finite loss or gradient at step {step}", state)
        losses.append(batch_loss)
        log.debug("step %d loss %.6f", step, batch_loss)
        values = optimizer.step(values, batch_grads)
        current = current.replace(**{name: v.astype(np.float32) for name, v in values.items()})
    return current, losses


# ---------------------------------------------------------------------------
# finite-difference verification


def relative_error(analytic, numeric):
    """``max|a - n| / max(max|a|, max|n|)`` with a tiny floor for all-zero groups."""
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_gradient(func, x, eps):
    """Central differences of scalar ``func`` over every entry of ``x``."""
    x = np.array(x, dtype=np.float64 if x.dtype != np.float32 else np.float32, copy=True)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        plus = func(x)
        flat[j] = orig - eps
        minus = func(x)
        flat[j] = orig
        grad.reshape(-1)[j] = (plus - minus) / (2 * eps)
    return grad


@dataclass
class GradCheckReport:
    errors: dict
    threshold: float = 1e-2

    @property
    def flagged(self):
        return sorted(name for name, err in self.errors.items() if not err <= self.threshold)

    @property
    def ok(self):
        return not self.flagged


def finite_difference_check(params, instance, eps=1e-3, config=None, dtype=np.float64, threshold=1e-2):
    """Compare analytic and central-difference gradients for every parameter group.

    ``instance`` is ``(image, unary, labels)``. Runs at ``dtype`` precision
    (float64 by default, so rounding noise stays far below the tolerance).
    """
    config = ConvCrfConfig() if config is None else config
    image, unary, labels = instance
    image, unary = np.asarray(image, dtype), np.asarray(unary, dtype)
    base = params.astype(dtype)
    _, analytic = loss_and_grads(base, config, image, unary, labels)
    errors = {}
    for name, value in base.groups().items():

        def loss_at(x, name=name):
            Q, _ = run_crf(unary, image, base.replace(**{name: x}), config)
            return loss_cross_entropy(Q, labels)

        errors[name] = relative_error(analytic[name], numeric_gradient(loss_at, value, eps))
    return GradCheckReport(errors, threshold)
