"""Fairness-aware model selection and debiasing."""

import json as _json

from . import _core
from ._core import (
    Error,
    LoadError,
    Network,
    NumericError,
    SchemaError,
    ShapeError,
    UndefinedRateError,
    ValidationError,
    balanced_accuracy,
    bias,
    generate_synthetic,
    minimize,
    objective_value,
    random_search,
    select_threshold,
)

__all__ = [
    "Error",
    "LoadError",
    "Network",
    "NumericError",
    "SchemaError",
    "ShapeError",
    "UndefinedRateError",
    "ValidationError",
    "apply_postproc",
    "balanced_accuracy",
    "baseline",
    "bias",
    "default_config",
    "evaluate_scores",
    "fit_postproc",
    "generate_synthetic",
    "minimize",
    "objective_value",
    "random_search",
    "run_method",
    "run_sweep",
    "select_threshold",
    "sensitivity_study",
    "variance_study",
]


def _dump(config):
    return config if isinstance(config, str) else _json.dumps(config)


def default_config():
    return _json.loads(_core.default_config())


def evaluate_scores(labels, scores, groups, threshold=0.5, bias="spd", epsilon=0.05):
    return _json.loads(_core.evaluate_scores(labels, scores, groups, threshold, bias, epsilon))


def run_method(config, method, seed=0):
    return _json.loads(_core.run_method(_dump(config), method, seed))


def run_sweep(config):
    return _json.loads(_core.run_sweep(_dump(config)))


def variance_study(config, networks=10):
    return _json.loads(_core.variance_study(_dump(config), networks))


def sensitivity_study(config, networks=10, deltas=1000, delta_std=0.1, ridge=1e-6, holdout_fraction=0.2):
    return _json.loads(_core.sensitivity_study(_dump(config), networks, deltas, delta_std, ridge, holdout_fraction))


def fit_postproc(method, scores, labels, groups, seed=0, bias="spd", epsilon=0.05):
    return _json.loads(_core.fit_postproc(method, scores, labels, groups, seed, bias, epsilon))


def baseline(config, seed=0):
    return _core.baseline(_dump(config), seed)


def apply_postproc(rule, scores, groups, seed=None):
    return _core.apply_postproc(_dump(rule), scores, groups, seed)
