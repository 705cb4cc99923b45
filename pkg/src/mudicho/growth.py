"""Growth rates, their piecewise-linear interpolant and the ratio bound θ."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, InvalidGrowthRate

BUILTIN_NAMES = ("exponential", "polynomial", "logarithmic")

# Analytic ratio bounds.  For 1+n and ln(e+n) the ratio of consecutive values
# decreases in n (both are concave in n), so the sup sits at the domain start;
# for e^n it is constant.
_DISCRETE_THETA = {
    "exponential": math.e,
    "polynomial": 2.0,
    "logarithmic": math.log(math.e + 1.0),
}
_CONTINUOUS_THETA = {
    "exponential": math.e,
    "polynomial": 1.5,
    "logarithmic": math.log(math.e + 2.0) / math.log(math.e + 1.0),
}


def _exp_value(t):
    return np.exp(t)


def _poly_value(t):
    return 1.0 + t


def _log_value(t):
    return np.log(math.e + t)


_BUILTIN = {
    # name: (value, log value, derivative)
    "exponential": (_exp_value, lambda t: np.asarray(t, dtype=float) * 1.0, np.exp),
    "polynomial": (_poly_value, np.log1p, lambda t: np.ones_like(np.asarray(t, dtype=float))),
    "logarithmic": (_log_value, lambda t: np.log(np.log(math.e + t)), lambda t: 1.0 / (math.e + t)),
}


class GrowthRate:
    """A growth rate μ, either a sequence (``kind="discrete"``, indexed from 0
    with μ_0 = 1) or a differentiable function of t ≥ ``domain_start``."""

    def __init__(self, value, *, kind, theta, name, log_value=None, derivative=None,
                 domain_start=None, source=None):
        if kind not in ("discrete", "differentiable"):
            raise ConfigurationError(f"unknown growth rate kind {kind!r}")
        self._value = value
        self._log_value = log_value
        self._derivative = derivative
        self.kind = kind
        self.theta = float(theta)
        self.name = name
        self.source = source if source is not None else {"builtin": name}
        if domain_start is None:
            domain_start = 0 if kind == "discrete" else 1.0
        self.domain_start = domain_start

    def __repr__(self):
        return f"GrowthRate({self.name!r}, kind={self.kind!r}, theta={self.theta:.6g})"

    def __call__(self, t):
        with np.errstate(all="ignore"):
            return np.asarray(self._value(np.asarray(t, dtype=float)), dtype=float)

    def log(self, t):
        """ln μ, computed without forming μ when a closed form exists."""
        t = np.asarray(t, dtype=float)
        if self._log_value is not None:
            return np.asarray(self._log_value(t), dtype=float)
        with np.errstate(all="ignore"):
            return np.log(self(t))

    def derivative(self, t):
        if self.kind != "differentiable":
            raise ConfigurationError("derivative requested for a discrete growth rate")
        t = np.asarray(t, dtype=float)
        if self._derivative is not None:
            return np.asarray(self._derivative(t), dtype=float)
        h = 1e-6 * np.maximum(1.0, np.abs(t))
        return (self(t + h) - self(t - h)) / (2.0 * h)

    def log_derivative(self, t):
        """μ'(t)/μ(t)."""
        return self.derivative(t) / self(t)

    def is_exponential(self):
        return self.source == {"builtin": "exponential"}

    def discretized(self, start=None):
        """The sequence i ↦ μ(start+i)/μ(start) sampled at unit steps."""
        if self.kind == "discrete":
            return self
        start = float(self.domain_start if start is None else start)
        log0 = float(self.log(start))
        value = self._value

        def seq(i):
            return value(start + i) / value(start)

        def log_seq(i):
            return self.log(start + i) - log0

        return GrowthRate(
            seq,
            kind="discrete",
            theta=self.theta,
            name=f"{self.name}@{start:g}",
            log_value=log_seq,
            source={"discretized": self.source, "start": start},
        )


def builtin_rate(name: str, kind: str = "discrete") -> GrowthRate:
    if name not in _BUILTIN:
        raise ConfigurationError(
            f"unknown growth rate {name!r}; expected one of {', '.join(BUILTIN_NAMES)}",
            condition="builtin growth rate",
        )
    value, log_value, deriv = _BUILTIN[name]
    theta = (_DISCRETE_THETA if kind == "discrete" else _CONTINUOUS_THETA)[name]
    return GrowthRate(value, kind=kind, theta=theta, name=name, log_value=log_value,
                      derivative=deriv if kind == "differentiable" else None)


def expression_rate(source: str, theta: float, kind: str = "discrete", constants=None) -> GrowthRate:
    """A custom rate written in the expression language, in ``n`` or ``t``."""
    from .sysdef.expr import parse_expr

    var = "n" if kind == "discrete" else "t"
    expr = parse_expr(source, variables=(var,), constants=constants)

    def value(t):
        return expr.evaluate({var: t}) + np.zeros_like(t)

    rate = GrowthRate(value, kind=kind, theta=theta, name=source,
                      source={"expr": source, "theta": float(theta)})
    if kind == "discrete" and abs(float(rate(0.0)) - 1.0) > 1e-12:
        raise InvalidGrowthRate(f"growth rate {source!r} has value {float(rate(0.0))} at n=0, expected 1",
                                condition="mu_0 = 1", witness={"n": 0})
    return rate


def rate_from_dict(spec: dict, kind: str = "discrete", constants=None) -> GrowthRate:
    if not isinstance(spec, dict):
        raise ConfigurationError("growth_rate must be an object", condition="growth_rate")
    if "builtin" in spec:
        return builtin_rate(spec["builtin"], kind)
    if "expr" in spec:
        if "theta" not in spec:
            raise ConfigurationError("custom growth rate needs 'theta'", condition="growth_rate.theta")
        return expression_rate(spec["expr"], float(spec["theta"]), kind, constants)
    raise ConfigurationError("growth_rate needs 'builtin' or 'expr'", condition="growth_rate")


@dataclass(frozen=True)
class RatioCheck:
    theta_hat: float
    argmax: int
    declared: float
    ok: bool


def verify_ratio_bound(rate: GrowthRate, horizon: int = 10_000) -> RatioCheck:
    """Scan consecutive ratios up to ``horizon`` and compare with the declared θ."""
    if horizon < 1:
        raise ConfigurationError("horizon must be at least 1")
    start = rate.domain_start
    grid = start + np.arange(horizon + 1, dtype=float)
    logs = rate.log(grid)
    steps = np.diff(logs)
    if not np.all(np.isfinite(logs)):
        bad = int(np.argmax(~np.isfinite(logs)))
        raise InvalidGrowthRate(f"growth rate is not finite and positive at {grid[bad]:g}",
                                condition="positivity", witness={"n": float(grid[bad])})
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0))
        raise InvalidGrowthRate(f"growth rate is not strictly increasing at {grid[bad]:g}",
                                condition="strict monotonicity", witness={"n": float(grid[bad])})
    i = int(np.argmax(steps))
    theta_hat = float(np.exp(steps[i]))
    return RatioCheck(theta_hat, int(grid[i]), rate.theta, theta_hat <= rate.theta + 1e-12)


class Interpolant:
    """Piecewise-linear μ̃ through (n, μ_n) and its inverse.

    Knot values are cached and extended on demand under a lock; lookups on
    the inverse locate the branch by binary search."""

    _MAX_KNOTS = 1 << 26

    def __init__(self, rate: GrowthRate, initial: int = 256):
        if rate.kind != "discrete":
            raise ConfigurationError("interpolation needs a discrete growth rate")
        self.rate = rate
        self._lock = threading.RLock()
        self._knots = np.empty(0)
        self._extend(initial)

    def _extend(self, size, required=0):
        with self._lock:
            if size <= self._knots.size:
                return
            values = self.rate(np.arange(size, dtype=float))
            finite = np.isfinite(values)
            if not finite.all():
                # overflow at the far end (e.g. e^n past n = 709) just caps the table
                cut = int(np.argmin(finite))
                if cut < max(required, 2):
                    raise DomainError(f"growth rate overflows at n = {cut}", condition="finite knots",
                                      witness={"n": cut})
                values = values[:cut]
            if np.any(np.diff(values) <= 0):
                bad = int(np.argmax(np.diff(values) <= 0))
                raise InvalidGrowthRate("growth rate knots are not strictly increasing",
                                        condition="strict monotonicity", witness={"n": bad})
            self._knots = values

    @property
    def knots(self):
        return self._knots

    def forward(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise DomainError("interpolant evaluated below 0", condition="domain t >= 0")
        n = np.floor(t).astype(np.int64)
        need = int(np.max(n, initial=0)) + 2
        if need > self._knots.size:
            self._extend(max(need, 2 * self._knots.size), required=need)
        k = self._knots
        return k[n] + (t - n) * (k[n + 1] - k[n])

    def inverse(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < 1.0):
            raise DomainError("interpolant inverse evaluated below mu_0 = 1", condition="domain s >= 1")
        top = float(np.max(s, initial=1.0))
        while self._knots[-1] <= top:
            size = self._knots.size
            if size >= self._MAX_KNOTS:
                raise DomainError(f"value {top:g} beyond {self._MAX_KNOTS} knots", condition="divergence")
            self._extend(2 * size, required=size + 1)
            if self._knots.size == size:
                raise DomainError(f"value {top:g} beyond the representable knots", condition="divergence")
        k = self._knots
        n = np.searchsorted(k, s, side="right") - 1
        return n + (s - k[n]) / (k[n + 1] - k[n])


def interpolate(rate: GrowthRate) -> Interpolant:
    return Interpolant(rate)
