"""Python bindings for the wsseg core."""

import json

from . import _wsseg
from ._wsseg import (
    CheckpointError,
    ConfigError,
    Model as _Model,
    ValidationError,
    confusion,
    diagnose,
    evaluate,
    infer,
    iou_dice,
    roc_auc,
    softmax_channels,
    synth_dataset,
    train,
    visualize,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "Model",
    "ValidationError",
    "confusion",
    "crf_refine",
    "default_config",
    "diagnose",
    "evaluate",
    "infer",
    "iou_dice",
    "resolve_config",
    "roc_auc",
    "softmax_channels",
    "synth_dataset",
    "train",
    "visualize",
]


def default_config():
    return json.loads(_wsseg.default_config_json())


def resolve_config(user=None):
    """Defaults merged with a (possibly nested, partial) user dict; unknown keys raise ConfigError."""
    return json.loads(_wsseg.resolve_config_json(json.dumps(user or {})))


def crf_refine(image, probs, brute_force=False, **params):
    """image: H x W x 3 uint8, probs: C x H x W summing to 1 per pixel."""
    return _wsseg.crf_refine(image, probs, json.dumps(params) if params else "", brute_force)


class Model(_Model):
    def __init__(self, config=None):
        super().__init__(json.dumps(config or {}))
