"""Skeleton-based two-person interaction recognition.

A self-contained implementation of an interaction-graph transformer: a
reverse-mode autodiff tensor core, body-part tokenization of skeleton
sequences, distance- and semantics-based cross-person interaction graphs,
graph-fused multi-head attention blocks, and a deterministic SGD training
harness with synthetic desk-scale data.
"""

from . import attention, config, gradcheck, graphs, model, skeleton, spm, tensor, training, verify
from .errors import (ConfigError, NumericError, ParseError, ShapeError,
                     TrainingDiverged, UsageError)
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "attention", "config", "gradcheck", "graphs", "model", "skeleton", "spm",
    "tensor", "training", "verify", "Tensor", "ConfigError", "NumericError",
    "ParseError", "ShapeError", "TrainingDiverged", "UsageError", "__version__",
]
