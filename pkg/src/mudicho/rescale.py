"""Time rescaling of a μ-indexed system onto the exponential scale.

Anchors k(n) = ⌊μ̃⁻¹(e^{n−1})⌋ + 1 for n ≥ 1 (with k(0) = 0) cut the source
index line into blocks; the rescaled system steps from one anchor to the next:

    B_n = 𝒜(k(n+1), k(n)),    f_n = 𝒢(k(n+1), k(n)) − B_n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dichotomy import certify, pair_set
from .errors import ConfigurationError, InvalidGrowthRate, WindowError, WindowExhausted
from .evolution import LinearCocycle, NonlinearCocycle
from .growth import GrowthRate, Interpolant, builtin_rate

# floor() of an inverse that lands on a knot up to rounding
_KNOT_SNAP = 1e-9


def anchor_indices(rate: GrowthRate, horizon: int) -> np.ndarray:
    """k(0), ..., k(horizon)."""
    if horizon < 0:
        raise ConfigurationError("horizon must be non-negative")
    if rate.kind != "discrete":
        raise ConfigurationError("rescaling needs a discrete growth rate; discretize flows first")
    anchors = np.zeros(horizon + 1, dtype=np.int64)
    if horizon == 0:
        return anchors
    if rate.is_exponential():
        anchors[1:] = np.arange(1, horizon + 1)
        return anchors
    inv = Interpolant(rate).inverse(np.exp(np.arange(horizon, dtype=float)))
    near = np.round(inv)
    snapped = np.where(np.abs(inv - near) < _KNOT_SNAP, near, np.floor(inv))
    anchors[1:] = snapped.astype(np.int64) + 1
    return anchors


def max_horizon(rate: GrowthRate, window: int) -> int:
    """Largest N whose anchors k(0..N) all fit in a source window of ``window`` steps."""
    n = 0
    while True:
        k = anchor_indices(rate, n + 1)
        if k[-1] > window:
            return n
        n += 1
        if n > 10 * window + 10:
            return n


@dataclass
class RescaledSystem:
    anchors: np.ndarray
    linear: LinearCocycle
    source: LinearCocycle
    rate: GrowthRate
    nonlinear: NonlinearCocycle | None = None
    anchor_ratios: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def horizon(self):
        return self.anchors.size - 1

    @property
    def required_window(self):
        return int(self.anchors[-1])

    @property
    def B(self):
        return self.linear.matrices

    def block_of(self, k):
        """The n with k(n) ≤ k < k(n+1)."""
        k = int(k)
        if k < 0 or k >= self.anchors[-1]:
            raise WindowError(f"source index {k} outside the rescaled horizon [0, {int(self.anchors[-1])})",
                              condition="anchor lookup")
        return int(np.searchsorted(self.anchors, k, side="right") - 1)

    def F(self, n, X):
        """B_n X + f_n(X) = 𝒢(k(n+1), k(n)) X."""
        if self.nonlinear is None:
            return np.asarray(X, dtype=float) @ self.B[n].T
        return self.nonlinear.forward(self.anchors[n + 1], self.anchors[n], X)

    def f(self, n, X):
        X = np.asarray(X, dtype=float)
        if self.nonlinear is None or self.nonlinear.program is None:
            return np.zeros_like(X)
        return self.F(n, X) - X @ self.B[n].T

    def F_inverse(self, n, Y):
        if self.nonlinear is None:
            return np.asarray(Y, dtype=float) @ self.linear.inverses[n].T
        return self.nonlinear.backward(self.anchors[n], self.anchors[n + 1], Y)

    def to_dict(self, include_matrices=True):
        doc = {
            "horizon": self.horizon,
            "required_window": self.required_window,
            "anchors": [int(k) for k in self.anchors],
            "anchor_ratios": [float(r) for r in self.anchor_ratios],
            "anchor_ratio_bound": float(math.e * self.rate.theta ** 2),
        }
        if include_matrices:
            doc["B"] = self.B.tolist()
        return doc


def rescale(cocycle: LinearCocycle, rate: GrowthRate, horizon: int, nonlinear: NonlinearCocycle | None = None,
            ratio_slack: float = 1e-9) -> RescaledSystem:
    """Build B_n and f_n for n < horizon from the source cocycles."""
    anchors = anchor_indices(rate, horizon)
    need = int(anchors[-1])
    available = cocycle.window if nonlinear is None else min(cocycle.window, nonlinear.window)
    if need > available:
        raise WindowExhausted(
            f"rescaled horizon {horizon} needs a source window of {need}, have {available}",
            required=need,
        )
    if horizon == 0:
        raise ConfigurationError("horizon must be at least 1")
    mats = np.stack([cocycle.transfer(anchors[n + 1], anchors[n]) for n in range(horizon)])
    logs = rate.log(anchors.astype(float))
    ratios = np.exp(np.diff(logs))
    bound = math.e * rate.theta ** 2
    bad = np.nonzero(ratios[1:] > bound * (1 + ratio_slack))[0]
    if bad.size:
        n = int(bad[0]) + 1
        raise InvalidGrowthRate(
            f"anchor ratio mu_k(n+1)/mu_k(n) = {ratios[n]:.6g} exceeds e*theta^2 = {bound:.6g} at n = {n}",
            condition="anchor ratio bound e theta^2", witness={"n": n, "ratio": float(ratios[n])},
        )
    linear = LinearCocycle(mats, cond_cap=np.inf, name=f"rescaled:{cocycle.name}")
    return RescaledSystem(anchors=anchors, linear=linear, source=cocycle, rate=rate, nonlinear=nonlinear,
                          anchor_ratios=ratios)


def rescaled_transfer(rs: RescaledSystem, m, n):
    """ℬ(m,n), equal to 𝒜(k(m), k(n))."""
    return rs.linear.transfer(m, n)


def fn_series_crosscheck(rs: RescaledSystem, n: int, x) -> float:
    """‖Σ_j 𝒜(k(n+1), j+1) g_j(𝒢(j, k(n))x) − f_n(x)‖, the sum over the block of n."""
    if not 0 <= n < rs.horizon:
        raise ConfigurationError(f"n = {n} outside the rescaled horizon {rs.horizon}")
    x = np.asarray(x, dtype=float)
    if rs.nonlinear is None or rs.nonlinear.program is None:
        return float(np.linalg.norm(rs.f(n, x)))
    lo, hi = int(rs.anchors[n]), int(rs.anchors[n + 1])
    orbit = rs.nonlinear.forward(hi, lo, x, record=True)
    series = np.zeros_like(x)
    for j in range(lo, hi):
        series += rs.source.transfer(hi, j + 1) @ rs.nonlinear.perturbation(j, orbit[j - lo])
    return float(np.linalg.norm(series - rs.f(n, x)))


@dataclass
class EquivalenceReport:
    source_verdict: str
    rescaled_verdict: str
    agree: bool
    source_constants: dict
    rescaled_constants: dict
    growth_K_prime: float | None
    growth_a: float | None
    horizon: int
    flags: list

    def to_dict(self):
        return dict(self.__dict__)


def _constants(cert):
    if cert is None:
        return {"verdict": "none", "reason": "no singular value gap at cut 0"}
    return {"verdict": cert.verdict, "K": cert.K, "lambda": cert.lam, "a": cert.a, "rank": cert.rank}


def verify_equivalence(rs: RescaledSystem, rate: GrowthRate | None = None, source_window=None,
                       min_window: int = 4) -> EquivalenceReport:
    """Certify the source under μ and the rescaled system under e^n, and fit
    K′ with ‖ℬ(m,n)‖ ≤ K′ e^{a(m−n)} using the source's growth exponent a."""
    rate = rs.rate if rate is None else rate
    source = certify(rs.source, rate, window=source_window)
    exp_rate = builtin_rate("exponential")
    flags = []
    if rs.horizon < 32:
        flags.append("short_rescaled_horizon")
    rescaled = certify(rs.linear, exp_rate, min_window=min_window)
    K_prime = a = None
    if source is not None:
        a = source.a
        n, m = pair_set(rs.horizon)
        y = np.maximum(rs.linear.log_norms(m, n), rs.linear.log_norms(n, m))
        K_prime = float(np.exp(np.max(y - a * (m - n))))
    sv = "none" if source is None else source.verdict
    rv = "none" if rescaled is None else rescaled.verdict
    return EquivalenceReport(sv, rv, sv == rv, _constants(source), _constants(rescaled), K_prime, a,
                             rs.horizon, flags)


def df_bound(c, K, a, theta):
    """c·C with C = θ^{1+2(a+ã)} K² e^{a+ã} ln(θ²e) and ã = a + Kcθ."""
    a_tilde = a + K * c * theta
    return c * theta ** (1 + 2 * (a + a_tilde)) * K ** 2 * math.exp(a + a_tilde) * math.log(theta ** 2 * math.e)


def max_df_norm(rs: RescaledSystem, points, step=1e-6):
    """Largest central-difference ‖Df_n(x)‖ over n < horizon and the given points,
    with its witness."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    d = points.shape[1]
    best, witness = 0.0, None
    eye = np.eye(d) * step
    for n in range(rs.horizon):
        cols = [(rs.f(n, points + e) - rs.f(n, points - e)) / (2 * step) for e in eye]
        J = np.stack(cols, axis=-1)
        norms = np.linalg.norm(J, ord=2, axis=(1, 2))
        i = int(np.argmax(norms))
        if norms[i] > best:
            best, witness = float(norms[i]), {"n": n, "x": points[i].tolist()}
    return best, witness
