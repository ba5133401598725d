"""Convolutional CRF: truncated mean-field inference for segmentation refinement."""

from .meanfield import CompatibilityTransform, ConvCrfConfig, argmax_labels, inference, run_crf
from .message import message_pass, message_pass_backward, message_pass_with_context
from .params import CrfParams, load_checkpoint, save_checkpoint
from .training import TrainConfig, finite_difference_check, fit

__all__ = [
    "CompatibilityTransform",
    "ConvCrfConfig",
    "CrfParams",
    "TrainConfig",
    "argmax_labels",
    "finite_difference_check",
    "fit",
    "inference",
    "load_checkpoint",
    "message_pass",
    "message_pass_backward",
    "message_pass_with_context",
    "run_crf",
    "save_checkpoint",
]

__version__ = "0.1.0"
