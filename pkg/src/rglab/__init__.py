"""Gradient-attribution laboratory: a small CNN engine with pluggable backward rules."""

from .attribution import AttributionConfig, AttributionMap, attribute, attribute_batch
from .nn import Checkpoint, NetworkSpec, TrainConfig, build_cifar_cnn, forward, load_weights, save_weights, train

__version__ = "0.1.0"

__all__ = [
    "AttributionConfig",
    "AttributionMap",
    "Checkpoint",
    "NetworkSpec",
    "TrainConfig",
    "attribute",
    "attribute_batch",
    "build_cifar_cnn",
    "forward",
    "load_weights",
    "save_weights",
    "train",
]
