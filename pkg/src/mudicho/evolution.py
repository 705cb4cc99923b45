"""Linear cocycles, nonlinear cocycles and flows, plus the flow discretization."""

from __future__ import annotations

import hashlib
import os
import threading
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractionFailure, IllConditionedError, WindowError
from .growth import GrowthRate

DEFAULT_COND_CAP = 1e12
DEFAULT_STEP = 1e-3
CACHE_ENV = "MUDICHO_CACHE_DIR"
# forward/adjoint round trips used to align the growth frames
GROWTH_ROUNDS = 12


class ContractionWarning(UserWarning):
    """The smallness condition c K θ^(a+1) < 1 fails for the declared constants."""


@dataclass(frozen=True)
class GrowthFrames:
    forward: np.ndarray
    adjoint: np.ndarray
    log_growth: np.ndarray


class LinearCocycle:
    """The cocycle 𝒜(m,n) of matrices A_0, ..., A_{W-1} on the index window [0, W].

    ``transfer`` multiplies the factors directly and norm tables come from
    renormalized propagation.  The anchor tables Φ_m = 𝒜(m,0) and
    Φ_m^{-1} = 𝒜(0,m) serve quick products of moderate size.  With
    ``rescaled_anchors`` each anchor is stored as a unit-norm matrix times
    exp(log scale), which keeps long windows with strong growth finite.
    """

    def __init__(self, matrices, *, cond_cap=DEFAULT_COND_CAP, times=None, rescaled_anchors=False, name=None):
        mats = np.array(matrices, dtype=np.float64)
        if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
            raise ConfigurationError("matrices must have shape (window, d, d)")
        self.matrices = mats
        self.window = mats.shape[0]
        self.dim = mats.shape[1]
        self.cond_cap = cond_cap
        self.name = name
        self.times = np.arange(self.window, dtype=float) if times is None else np.asarray(times, dtype=float)
        self.rescaled_anchors = rescaled_anchors
        self._lock = threading.RLock()
        self._inverses = None
        self._anchors = None
        self._frames = None
        self.matrices.setflags(write=False)

    @classmethod
    def from_spec(cls, spec, window, **kwargs):
        if spec.kind != "discrete":
            raise ConfigurationError("LinearCocycle.from_spec needs a discrete system; discretize flows first")
        idx = np.arange(window)
        return cls(spec.linear_matrices(idx), times=spec.label(idx), name=spec.metadata.get("name"), **kwargs)

    def __repr__(self):
        return f"LinearCocycle(dim={self.dim}, window={self.window})"

    # --- factors ----------------------------------------------------------------

    @property
    def inverses(self):
        if self._inverses is None:
            with self._lock:
                if self._inverses is None:
                    conds = np.linalg.cond(self.matrices) if self.window else np.empty(0)
                    bad = ~(conds < self.cond_cap)
                    if bad.any():
                        j = int(np.argmax(bad))
                        raise IllConditionedError(
                            f"A_{j} has condition number {conds[j]:.3g} above the cap {self.cond_cap:.3g}",
                            condition="invertible linear part", witness={"index": j},
                        )
                    inv = np.linalg.inv(self.matrices)
                    inv.setflags(write=False)
                    self._inverses = inv
        return self._inverses

    def _check(self, *indices):
        for k in indices:
            if not 0 <= k <= self.window:
                raise WindowError(f"index {k} outside the cocycle window [0, {self.window}]",
                                  condition="index in window", witness={"index": int(k), "window": self.window})

    def transfer(self, m, n):
        """𝒜(m,n): A_{m-1}⋯A_n for m ≥ n, A_m^{-1}⋯A_{n-1}^{-1} for m < n."""
        m, n = int(m), int(n)
        self._check(m, n)
        out = np.eye(self.dim)
        if m >= n:
            for j in range(n, m):
                out = self.matrices[j] @ out
        else:
            inv = self.inverses
            for j in range(m, n):
                out = out @ inv[j]
        return out

    # --- anchor tables ------------------------------------------------------------

    def _build_anchors(self):
        W, d = self.window, self.dim
        inv = self.inverses
        phi = np.empty((W + 1, d, d))
        phi_inv = np.empty((W + 1, d, d))
        ls = np.zeros(W + 1)
        ls_inv = np.zeros(W + 1)
        phi[0] = np.eye(d)
        phi_inv[0] = np.eye(d)
        for j in range(W):
            with np.errstate(over="ignore", invalid="ignore"):
                nxt = self.matrices[j] @ phi[j]
                nxt_inv = phi_inv[j] @ inv[j]
            if self.rescaled_anchors:
                s = np.linalg.norm(nxt)
                si = np.linalg.norm(nxt_inv)
                nxt /= s
                nxt_inv /= si
                ls[j + 1] = ls[j] + np.log(s)
                ls_inv[j + 1] = ls_inv[j] + np.log(si)
            phi[j + 1] = nxt
            phi_inv[j + 1] = nxt_inv
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(phi_inv))):
            raise IllConditionedError(
                "anchor products overflow; use rescaled anchors (--qr-accumulate) or a shorter window",
                condition="finite cocycle",
            )
        for arr in (phi, phi_inv, ls, ls_inv):
            arr.setflags(write=False)
        return phi, phi_inv, ls, ls_inv

    @property
    def anchors(self):
        """(Φ, Φ^{-1}, log scale of Φ, log scale of Φ^{-1})."""
        if self._anchors is None:
            with self._lock:
                if self._anchors is None:
                    self._anchors = self._build_anchors()
        return self._anchors

    def transfer_via_anchors(self, m, n):
        self._check(m, n)
        phi, phi_inv, ls, ls_inv = self.anchors
        return np.exp(ls[m] + ls_inv[n]) * (phi[m] @ phi_inv[n])

    def sample_log_norms(self, idx, start=None, keep=None, backward=False):
        """Table T[i, c] for sample indices ``idx`` (sorted, c ≥ i; NaN below).

        Forward, T[i, c] = ln‖𝒜(idx_c, idx_i) X_i‖ with X_i = ``start[idx_i]``;
        backward, T[i, c] = ln‖𝒜(idx_i, idx_c) X_c‖ with X_c = ``start[idx_c]``.
        ``start`` and ``keep`` are tables over [0, W] (identity when omitted);
        ``keep[j]`` is applied at every index the state passes through, which
        for an invariant family keeps rounding from leaking out of its range."""
        idx = np.asarray(idx, dtype=np.int64)
        self._check(int(idx[0]), int(idx[-1]))
        d = self.dim
        starts = np.broadcast_to(np.eye(d), (idx.size, d, d)) if start is None else np.asarray(start)[idx]
        if not backward:
            return kernels.propagate_log_norms(self.matrices, idx, starts, keep)
        # run backward as forward on the reversed window
        W = self.window
        rev = kernels.propagate_log_norms(self.inverses[::-1], (W - idx)[::-1], starts[::-1],
                                          None if keep is None else np.asarray(keep)[::-1])
        return rev[::-1, ::-1].T

    def log_norms(self, ms, ns):
        """ln‖𝒜(m,n)‖ for pairs (m_k, n_k)."""
        ms = np.asarray(ms, dtype=np.int64)
        ns = np.asarray(ns, dtype=np.int64)
        idx = np.unique(np.concatenate((ms, ns)))
        pm, pn = np.searchsorted(idx, ms), np.searchsorted(idx, ns)
        out = np.empty(ms.shape)
        ahead = ms >= ns
        if ahead.any():
            out[ahead] = self.sample_log_norms(idx)[pn[ahead], pm[ahead]]
        if not ahead.all():
            out[~ahead] = self.sample_log_norms(idx, backward=True)[pm[~ahead], pn[~ahead]]
        return out

    def growth_frames(self, rounds=GROWTH_ROUNDS, tol=1e-12):
        """Forward and adjoint orthonormal frames along the window, cached.

        ``forward[n]`` carries 𝒜(n,0)Q_0 by QR and ``adjoint[n]`` carries
        𝒜(W,n)^T forward[W] backward by QR; the first k columns of each span
        invariant subspaces for every k.  Q_0 is refined by round trips until
        the first k columns of forward[W] span the k most expanding directions
        of 𝒜(W,0), so that ``log_growth`` holds its log singular values,
        largest first."""
        if self._frames is None:
            with self._lock:
                if self._frames is None:
                    self._frames = self._build_frames(rounds, tol)
        return self._frames

    def _build_frames(self, rounds, tol):
        adjoint_steps = np.ascontiguousarray(np.swapaxes(self.matrices[::-1], 1, 2))
        Q0 = np.eye(self.dim)
        for _ in range(rounds):
            forward, growth = kernels.qr_sweep(self.matrices, Q0)
            order = np.argsort(-growth, kind="stable")
            if np.any(order != np.arange(self.dim)):
                # an invariant start never reorders itself, so sort it by growth
                Q0 = Q0[:, order]
                forward, growth = kernels.qr_sweep(self.matrices, Q0)
            adjoint = kernels.qr_sweep(adjoint_steps, forward[-1])[0][::-1]
            moved = float(np.max(np.abs(adjoint[0] - Q0)))
            Q0 = adjoint[0]
            if moved <= tol:
                break
        forward, growth = kernels.qr_sweep(self.matrices, Q0)
        frames = GrowthFrames(forward, np.ascontiguousarray(adjoint), growth)
        for arr in (frames.forward, frames.adjoint, frames.log_growth):
            arr.setflags(write=False)
        return frames

    # --- derived cocycles ----------------------------------------------------------

    def scaled(self, rate: GrowthRate, tau: float):
        """The cocycle of (μ_{j+1}/μ_j)^{-τ} A_j."""
        logs = rate.log(np.arange(self.window + 1, dtype=float))
        factors = np.exp(-tau * np.diff(logs))
        return LinearCocycle(self.matrices * factors[:, None, None], cond_cap=self.cond_cap, times=self.times,
                             rescaled_anchors=self.rescaled_anchors, name=self.name)

    def truncated(self, window):
        if window > self.window:
            raise WindowError(f"cannot extend a cocycle of window {self.window} to {window}")
        return LinearCocycle(self.matrices[:window], cond_cap=self.cond_cap, times=self.times[:window],
                             rescaled_anchors=self.rescaled_anchors, name=self.name)


def transfer(cocycle: LinearCocycle, m: int, n: int):
    return cocycle.transfer(m, n)


class NonlinearCocycle:
    """𝒢(m,n) for G_j = A_j + g_j on the window of ``linear``.

    Backward steps solve G_j(x) = y with the contraction x ← A_j^{-1}(y − g_j(x)).
    """

    def __init__(self, linear: LinearCocycle, program=None, *, times=None, tol=1e-12, max_iters=200,
                 constants=None, theta=None):
        self.linear = linear
        self.program = program
        self.times = linear.times if times is None else np.asarray(times, dtype=float)
        self.tol = tol
        self.max_iters = max_iters
        self.dim = linear.dim
        self.window = linear.window
        self.contraction_value = None
        constants = constants or {}
        if program is not None and theta is not None and all(k in constants for k in ("c", "K", "a")):
            value = constants["c"] * constants["K"] * theta ** (constants["a"] + 1.0)
            self.contraction_value = float(value)
            if value >= 1.0:
                warnings.warn(
                    f"contraction condition c K theta^(a+1) < 1 fails ({value:.3g}); backward steps may not converge",
                    ContractionWarning, stacklevel=2,
                )

    @classmethod
    def from_spec(cls, spec, window, linear=None, **kwargs):
        if linear is None:
            linear = LinearCocycle.from_spec(spec, window)
        return cls(linear, spec.nonlinear_program(), times=spec.label(np.arange(linear.window)),
                   constants=spec.constants, theta=spec.rate.theta, **kwargs)

    def _points(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        return np.atleast_2d(X), single

    def perturbation(self, j, X):
        """g_j(X)."""
        pts, single = self._points(X)
        if self.program is None:
            out = np.zeros_like(pts)
        else:
            slots = np.empty((pts.shape[0], self.dim + 1))
            slots[:, 0] = self.times[j]
            slots[:, 1:] = pts
            out = kernels.eval_programs(self.program, slots)
        return out[0] if single else out

    def forward(self, m, n, X, record=False):
        """𝒢(m,n)(X) for m ≥ n; with ``record`` the whole orbit n..m."""
        m, n = int(m), int(n)
        if m < n:
            raise ConfigurationError("forward needs m >= n")
        self.linear._check(m, n)
        pts, single = self._points(X)
        out = kernels.discrete_forward(self.program, self.linear.matrices[n:m], self.times[n:m], pts, record)
        if single:
            return out[:, 0] if record else out[0]
        return out

    def backward(self, m, n, Y):
        """𝒢(m,n)(Y) for m < n."""
        m, n = int(m), int(n)
        if m >= n:
            raise ConfigurationError("backward needs m < n")
        self.linear._check(m, n)
        pts, single = self._points(Y)
        out, failed, _, delta = kernels.discrete_backward(
            self.program, self.linear.inverses[m:n], self.times[m:n], pts, self.tol, self.max_iters
        )
        if failed >= 0:
            raise ContractionFailure(
                f"backward step {m + failed} did not converge in {self.max_iters} iterations (last change {delta:.3g})",
                condition="contraction c K theta^(a+1) < 1", witness={"index": m + failed, "residual": float(delta)},
            )
        return out[0] if single else out

    def __call__(self, m, n, X):
        if m == n:
            return np.array(X, dtype=float)
        return self.forward(m, n, X) if m > n else self.backward(m, n, X)


def nonlinear_forward(cocycle, m, n, x):
    return cocycle.forward(m, n, x)


def nonlinear_backward(cocycle, m, n, y):
    return cocycle.backward(m, n, y)


# --- continuous time ---------------------------------------------------------------


class Flow:
    """Transfer matrices T(t,s) and the nonlinear flow φ(t,s;x) by fixed-step RK4."""

    def __init__(self, spec, step=DEFAULT_STEP):
        if spec.kind != "continuous":
            raise ConfigurationError("Flow needs a continuous system")
        self.spec = spec
        self.step = float(step)
        self.dim = spec.dim
        self.start = float(spec.index_start)
        self._program_a = spec.linear_program()
        self._program_f = spec.nonlinear_program()

    def _check_time(self, *ts):
        for t in ts:
            if t < self.start - 1e-12:
                raise ConfigurationError(f"time {t} precedes the domain start {self.start}")

    def transfer(self, t, s):
        """T(t,s)."""
        self._check_time(t, s)
        rows = kernels.rk4_flow(self._program_a, None, s, t, self.step, np.eye(self.dim))
        return rows.T

    def flow(self, t, s, X):
        """φ(t,s;X) for a point or a batch of points."""
        self._check_time(t, s)
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        out = kernels.rk4_flow(self._program_a, self._program_f, s, t, self.step, np.atleast_2d(X))
        return out[0] if single else out

    def unit_transfers(self, window):
        """A_i = T(t0+i+1, t0+i) for i < window, optionally cached on disk."""
        cache = _cache_path(self, window)
        if cache is not None and cache.exists():
            mats = np.load(cache)
            if mats.shape == (window, self.dim, self.dim):
                return mats
        mats = np.empty((window, self.dim, self.dim))
        eye = np.eye(self.dim)
        for i in range(window):
            t0 = self.start + i
            mats[i] = kernels.rk4_flow(self._program_a, None, t0, t0 + 1.0, self.step, eye).T
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
            tmp = cache.with_suffix(f".{os.getpid()}.tmp.npy")
            np.save(tmp, mats)
            os.replace(tmp, cache)
        return mats

    def discretize(self, window):
        """(LinearCocycle of A_i, FlowCocycle of the time-one maps) with t = t0 + i."""
        times = self.start + np.arange(window, dtype=float)
        linear = LinearCocycle(self.unit_transfers(window), times=times, name=self.spec.metadata.get("name"))
        return linear, FlowCocycle(self, linear)


def integrate_transfer(flow: Flow, t, s):
    return flow.transfer(t, s)


def discretize(flow: Flow, window):
    return flow.discretize(window)


def _cache_path(flow, window):
    root = os.environ.get(CACHE_ENV)
    if not root:
        return None
    key = hashlib.sha256(
        f"{flow.spec.sha256}|{flow.step!r}|{window}|{kernels.BACKEND}".encode()
    ).hexdigest()[:32]
    return Path(root) / f"transfer-{key}.npy"


class FlowCocycle:
    """Nonlinear cocycle of the time-one maps G_i = φ(t0+i+1, t0+i; ·)."""

    def __init__(self, flow: Flow, linear: LinearCocycle):
        self.flow_map = flow
        self.linear = linear
        self.dim = flow.dim
        self.window = linear.window
        self.times = linear.times
        self.program = flow._program_f
        self.contraction_value = None

    def _time(self, i):
        return self.flow_map.start + i

    def perturbation(self, j, X):
        """g_j(X) = φ(t_j+1, t_j; X) − A_j X."""
        pts = np.atleast_2d(np.asarray(X, dtype=float))
        out = self.flow_map.flow(self._time(j + 1), self._time(j), pts) - pts @ self.linear.matrices[j].T
        return out[0] if np.asarray(X).ndim == 1 else out

    def forward(self, m, n, X, record=False):
        m, n = int(m), int(n)
        if m < n:
            raise ConfigurationError("forward needs m >= n")
        self.linear._check(m, n)
        pts = np.atleast_2d(np.asarray(X, dtype=float))
        if not record:
            out = self.flow_map.flow(self._time(m), self._time(n), pts) if m > n else pts.copy()
            return out[0] if np.asarray(X).ndim == 1 else out
        orbit = [pts]
        for j in range(n, m):
            orbit.append(self.flow_map.flow(self._time(j + 1), self._time(j), orbit[-1]))
        out = np.stack(orbit)
        return out[:, 0] if np.asarray(X).ndim == 1 else out

    def backward(self, m, n, Y):
        m, n = int(m), int(n)
        if m >= n:
            raise ConfigurationError("backward needs m < n")
        self.linear._check(m, n)
        return self.flow_map.flow(self._time(m), self._time(n), Y)

    def __call__(self, m, n, X):
        if m == n:
            return np.array(X, dtype=float)
        return self.forward(m, n, X) if m > n else self.backward(m, n, X)
