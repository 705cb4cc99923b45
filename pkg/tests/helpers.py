"""Small system builders shared by the test modules."""

import numpy as np

from mudicho.evolution import LinearCocycle
from mudicho.sysdef.spec import spec_from_dict


def discrete_system(linear, nonlinear=None, rate=None, constants=None, index_start=0, **extra):
    """Build a validated discrete system from expression strings."""
    dim = len(linear)
    doc = {
        "kind": "discrete",
        "dim": dim,
        "index_start": index_start,
        "growth_rate": rate or {"builtin": "exponential"},
        "linear": linear,
        "nonlinear": nonlinear or ["0"] * dim,
        "constants": constants or {},
        **extra,
    }
    return spec_from_dict(doc)


def constant_diagonal(exponents, window):
    """LinearCocycle of diag(e^{c_1}, ..., e^{c_d}) repeated ``window`` times."""
    return LinearCocycle(np.broadcast_to(np.diag(np.exp(exponents)), (window, len(exponents), len(exponents))))


def continuous_system(linear, nonlinear=None, rate=None, constants=None, start=1.0):
    """Build a validated continuous system on t ≥ ``start``."""
    dim = len(linear)
    return spec_from_dict({
        "kind": "continuous",
        "dim": dim,
        "index_start": start,
        "growth_rate": rate or {"builtin": "exponential"},
        "linear": linear,
        "nonlinear": nonlinear or ["0"] * dim,
        "constants": constants or {},
    })
