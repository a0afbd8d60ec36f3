"""Compositional Koopman operators with graph-structured embeddings.

Numerical work happens in the C++ extension; this package adds dict-based
wrappers for the experiment harness.
"""

import json

from . import _core
from ._core import (
    ConfigError,
    DimensionError,
    Dynamics,
    KoopmanModel,
    NumericalError,
    SceneGraph,
    complete_graph,
    env_graph,
    identify,
    rollout,
    rope_graph,
    solve_control,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "Dynamics",
    "KoopmanModel",
    "NumericalError",
    "SceneGraph",
    "complete_graph",
    "datagen",
    "env_graph",
    "eval_control",
    "eval_sim",
    "identify",
    "report",
    "rollout",
    "rope_graph",
    "solve_control",
    "sweep",
    "train",
]


def _call(fn, config, *args):
    return json.loads(fn(json.dumps(config), *args))


def datagen(config):
    """Writes the episode files and returns the manifest."""
    return _call(_core._datagen, config)


def train(config):
    return _call(_core._train, config)


def eval_sim(config, mode="Block", extrapolate=False):
    return _call(_core._eval_sim, config, mode, extrapolate)


def eval_control(config, mode="Block", extrapolate=False):
    return _call(_core._eval_control, config, mode, extrapolate)


def sweep(config):
    return _call(_core._sweep, config)


def report(config):
    return _call(_core._report, config)
