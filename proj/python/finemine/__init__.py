"""Pseudo-label mining and shot-routed fusion on synthetic fine-grained data."""

import json

from ._finemine import (
    Classifier,
    DatasetBundle,
    Example,
    IoError,
    Shot,
    TrainingError,
    ValidationError,
    accuracy,
    attention,
    augment,
    format_report,
    forward,
    fusion,
    grad_check,
    imbalanced_counts,
    init_classifier,
    load_bundle,
    load_checkpoint,
    mining,
    predict,
    set_num_threads,
    softmax,
    train_on_labeled,
)
from . import _finemine


def default_config():
    """Default run configuration as a dict."""
    return json.loads(_finemine.default_config())


def generate(gen=None):
    """Generate a dataset bundle from a dict of gen-section overrides."""
    return _finemine.generate(json.dumps(gen or {}))


def run_pipeline(config, seed=None):
    """Run the full pipeline; `config` is a dict in the CLI's JSON layout."""
    return _finemine.run_pipeline(json.dumps(config), seed)


__all__ = [name for name in dir() if not name.startswith("_") and name != "json"]
