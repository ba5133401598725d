"""Learnable CRF parameters and their on-disk checkpoint format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidArgumentError
from .tensor import read_ctf, write_ctf

# CrfParams field -> checkpoint file stem
PARAM_GROUPS = ("log_weights", "log_thetas", "smoothness_features", "compatibility")
DEFAULT_WEIGHTS = (1.0, 1.0)
DEFAULT_THETAS = (13.0, 13.0, 3.0)


def _log(values):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(values, dtype=np.float64)).astype(np.float32)


@dataclass
class CrfParams:
    """All learnable CRF parameters.

    Kernel weights ``(appearance, smoothness)`` and bandwidths
    ``(theta_alpha, theta_beta, theta_gamma)`` live in log space so every
    update keeps them positive. A weight of exactly zero is stored as
    ``-inf`` and switches its kernel off.

    ``smoothness_features`` is an optional ``(2, h, w)`` pair of planes that
    replaces pixel coordinates in the smoothness kernel; ``compatibility`` an
    optional ``(c, c)`` label-interaction matrix.
    """

    log_weights: np.ndarray = field(default_factory=lambda: _log(DEFAULT_WEIGHTS))
    log_thetas: np.ndarray = field(default_factory=lambda: _log(DEFAULT_THETAS))
    smoothness_features: np.ndarray | None = None
    compatibility: np.ndarray | None = None

    @classmethod
    def create(cls, weights=DEFAULT_WEIGHTS, thetas=DEFAULT_THETAS, smoothness_features=None, compatibility=None):
        weights = np.asarray(weights, dtype=np.float64)
        thetas = np.asarray(thetas, dtype=np.float64)
        if weights.shape != (2,) or np.any(weights < 0):
            raise InvalidArgumentError(f"need two non-negative kernel weights, got {weights}")
        if thetas.shape != (3,) or np.any(thetas <= 0):
            raise InvalidArgumentError(f"need three positive bandwidths, got {thetas}")
        return cls(
            log_weights=_log(weights),
            log_thetas=_log(thetas),
            smoothness_features=None if smoothness_features is None else np.asarray(smoothness_features, np.float32),
            compatibility=None if compatibility is None else np.asarray(compatibility, np.float32),
        )

    @property
    def weights(self):
        return np.exp(self.log_weights.astype(np.float64))

    @property
    def thetas(self):
        return np.exp(self.log_thetas.astype(np.float64))

    def groups(self):
        """Present parameter groups as ``{name: array}``."""
        return {name: getattr(self, name) for name in PARAM_GROUPS if getattr(self, name) is not None}

    def replace(self, **arrays):
        values = {name: getattr(self, name) for name in PARAM_GROUPS}
        values.update(arrays)
        return CrfParams(**values)

    def astype(self, dtype):
        return CrfParams(**{name: None if a is None else np.asarray(a, dtype=dtype) for name, a in self._all().items()})

    def copy(self):
        return CrfParams(**{name: None if a is None else np.array(a, copy=True) for name, a in self._all().items()})

    def _all(self):
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def describe(self):
        out = {"weights": self.weights.tolist(), "thetas": self.thetas.tolist()}
        if self.compatibility is not None:
            out["compatibility"] = np.asarray(self.compatibility).tolist()
        if self.smoothness_features is not None:
            out["smoothness_features_shape"] = list(np.shape(self.smoothness_features))
        return out


def _as4d(a):
    a = np.asarray(a, dtype=np.float32)
    return a.reshape((1,) * (4 - a.ndim) + a.shape)


def save_checkpoint(directory, params, config=None, extra_tensors=None, metadata=None):
    """Write ``params`` as CTF1 tensors plus ``manifest.json`` (written last).

    ``extra_tensors`` (e.g. optimizer moments) are stored alongside under
    their own names.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    tensors = dict(params.groups())
    for name, value in (extra_tensors or {}).items():
        tensors[f"extra.{name}"] = value
    for name, value in tensors.items():
        filename = f"{name}.ctf"
        write_ctf(directory / filename, _as4d(value))
        entries[name] = {"file": filename, "shape": list(np.shape(value))}
    if config is not None:
        (directory / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    manifest = {"format": "convcrf-checkpoint-1", "tensors": entries, "metadata": metadata or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory):
    """Return ``(params, extra_tensors, manifest)`` from a checkpoint directory."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{directory}: no manifest.json, not a checkpoint")
    manifest = json.loads(manifest_path.read_text())
    arrays, extra = {}, {}
    for name, entry in manifest["tensors"].items():
        value = read_ctf(directory / entry["file"]).reshape(entry["shape"])
        if name.startswith("extra."):
            extra[name[len("extra.") :]] = value
        elif name in PARAM_GROUPS:
            arrays[name] = value
        else:
            raise DataError(f"unknown tensor {name!r} in checkpoint manifest")
    return CrfParams(**arrays), extra, manifest
