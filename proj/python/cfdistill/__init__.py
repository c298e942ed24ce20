"""Car-following model distillation: scenario generation, teacher voting,
constrained student training, stability analysis and simulation."""

import json as _json

from ._core import *  # noqa: F401,F403
from ._core import train as _train, find_equilibria as _find_equilibria

def train(states, labels, config=None):
    """Train a student on (states, labels); `config` is a dict of training options."""
    return _train(states, labels, _json.dumps(config or {}))


def find_equilibria(model, config=None):
    """Equilibrium points of `model` as a list of dicts."""
    return _find_equilibria(model, _json.dumps(config or {}))


__all__ = [name for name in dir() if not name.startswith("_") and name != "annotations"]
