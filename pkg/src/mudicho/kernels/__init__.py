"""Hot loops behind a single interface.

The compiled module ``_core`` is used when it was built; otherwise, or when
``MUDICHO_PURE=1`` is set, the numpy implementation in ``_pure`` is used.
Both take the same arguments and agree to rounding.
"""

import os

import numpy as np

from . import _pure

try:
    if os.environ.get("MUDICHO_PURE") == "1":
        raise ImportError("compiled kernels disabled by MUDICHO_PURE")
    from . import _core as _backend
except ImportError:
    _backend = _pure

BACKEND = _backend.BACKEND


def available_backends():
    out = {"python": _pure}
    try:
        from . import _core

        out["cython"] = _core
    except ImportError:
        pass
    return out


def get_backend(name=None):
    if name is None:
        return _backend
    backends = available_backends()
    if name not in backends:
        raise ImportError(f"kernel backend {name!r} is not available")
    return backends[name]


def step_sizes(t0, t1, h):
    """Fixed steps of size ``h`` from ``t0`` toward ``t1`` plus a final partial step."""
    span = float(t1) - float(t0)
    if span == 0.0:
        return np.empty(0)
    n_full = int(np.floor(abs(span) / h * (1.0 + 1e-12)))
    signed = np.copysign(h, span)
    rest = span - signed * n_full
    sizes = np.full(n_full, signed)
    if abs(rest) > 1e-12 * max(1.0, abs(span)):
        sizes = np.append(sizes, rest)
    return sizes


# above this many points numpy's vectorized evaluation beats the compiled interpreter
VECTORIZE_ABOVE = 512


def eval_programs(program, variables, backend=None):
    variables = np.ascontiguousarray(variables, dtype=np.float64)
    if backend is None and variables.shape[0] > VECTORIZE_ABOVE:
        return _pure.eval_programs(program, variables)
    return get_backend(backend).eval_programs(program, variables)


def discrete_forward(program, A, times, X, record=False, backend=None):
    return get_backend(backend).discrete_forward(program, A, times, X, record)


def discrete_backward(program, Ainv, times, Y, tol, max_iters, backend=None):
    return get_backend(backend).discrete_backward(program, Ainv, times, Y, tol, max_iters)


def rk4_flow(program_a, program_f, t0, t1, h, X, backend=None):
    steps = step_sizes(t0, t1, h)
    return get_backend(backend).rk4_flow(program_a, program_f, float(t0), steps, X)


def qr_sweep(mats, Q0, backend=None):
    """Orthonormal frames carried along ``mats`` by QR and the per-column log growth."""
    mats = np.ascontiguousarray(mats, dtype=np.float64)
    Q0 = np.ascontiguousarray(Q0, dtype=np.float64)
    return get_backend(backend).qr_sweep(mats, Q0)


def propagate_log_norms(mats, idx, start, keep=None, backend=None):
    """Table T[i, c] = ln‖M(idx_c, idx_i) start_i‖ for c ≥ i (NaN below the
    diagonal), where M(m, n) = keep_m M_{m-1} ⋯ keep_{n+1} M_n.

    ``mats[j]`` is the step from j to j+1 and ``keep[j]`` acts at index j.
    States are renormalized every step, so the table stays finite however
    large the products get."""
    mats = np.ascontiguousarray(mats, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    start = np.ascontiguousarray(start, dtype=np.float64)
    if keep is not None:
        keep = np.ascontiguousarray(keep, dtype=np.float64)
    records, scales = get_backend(backend).propagate_log_norms(mats, idx, start, keep)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(np.linalg.norm(records, ord=2, axis=(-2, -1))) + scales
