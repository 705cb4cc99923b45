"""Linearizing conjugacies built from a bounded-solution series.

On the rescaled system F_j = B_j + f_j the base conjugacy is h_n = id + v_n,
where along the orbit x_j = 𝒢_B(j, n)x

    v_n(x) = −Σ_{j<n} ℬ(n, j+1) P_{j+1} f_j(x_j) + Σ_{j≥n} ℬ(n, j+1) Q_{j+1} f_j(x_j),

with f_j := 0 outside [0, N).  This satisfies h_{n+1}∘F_n = B_n∘h_n term by
term.  On the source index line

    ψ_k = 𝒜(k, k(n)) ∘ h_n ∘ 𝒢(k(n), k)    for k(n) ≤ k < k(n+1).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dichotomy import ProjectionFamily, certify, fit_certificate
from .errors import ConfigurationError, ConvergenceError, DichotomyTooWeak, WindowError
from .evolution import Flow, LinearCocycle, NonlinearCocycle
from .growth import builtin_rate
from .rescale import RescaledSystem, max_horizon, rescale
from .sysdef.spec import estimate_lipschitz

DEFAULT_TAIL_EPS = 1e-12
INVERSE_TOL = 1e-10
INVERSE_ITERS = 500


class SmallnessWarning(UserWarning):
    """The nonlinearity may be too large for the conjugacy to exist."""


class ConjugacyField:
    """ψ_k on source indices 0 ≤ k ≤ W, assembled from h_n on the rescaled system.

    ``projections`` are P_j of the rescaled system for j = 0..N, shape (N+1, d, d)."""

    def __init__(self, rescaled: RescaledSystem, projections, *, tail_eps=DEFAULT_TAIL_EPS, k_max=None,
                 certificate=None, provenance=None):
        self.rs = rescaled
        self.N = rescaled.horizon
        self.dim = rescaled.linear.dim
        self.source = rescaled.source
        self.nonlinear = rescaled.nonlinear
        self.window = self.source.window
        self.P = np.asarray(projections, dtype=float)
        if self.P.shape != (self.N + 1, self.dim, self.dim):
            raise ConfigurationError(f"projections must have shape {(self.N + 1, self.dim, self.dim)}")
        self.Q = np.eye(self.dim) - self.P
        self.tail_eps = float(tail_eps)
        self.k_max = int(10 * self.window if k_max is None else k_max)
        self.certificate = certificate
        self.provenance = provenance or {}
        self.last_terms = {}
        # ℬ(n, m) for 0 ≤ n, m ≤ N
        self._Bnm = np.empty((self.N + 1, self.N + 1, self.dim, self.dim))
        for n in range(self.N + 1):
            for m in range(self.N + 1):
                self._Bnm[n, m] = rescaled.linear.transfer(n, m)

    # --- rescaled level -------------------------------------------------------

    @property
    def trivial(self):
        return self.nonlinear is None or self.nonlinear.program is None

    def base(self, n, X):
        """h_n(X) for 0 ≤ n ≤ N."""
        n = int(n)
        if not 0 <= n <= self.N:
            raise WindowError(f"base index {n} outside [0, {self.N}]", condition="rescaled horizon")
        X = np.asarray(X, dtype=float)
        if self.trivial:
            return X.copy()
        pts = np.atleast_2d(X)
        v = np.zeros_like(pts)
        past = []
        # past: x_{j+1} known, x_j = F_j^{-1}(x_{j+1}), f_j(x_j) = x_{j+1} − B_j x_j
        nxt = pts
        small = 0
        for j in range(n - 1, max(-1, n - 1 - self.k_max), -1):
            cur = self.rs.F_inverse(j, nxt)
            fj = nxt - cur @ self.rs.B[j].T
            term = fj @ (self._Bnm[n, j + 1] @ self.P[j + 1]).T
            self._check_term(term, j, n)
            v -= term
            size = float(np.max(np.linalg.norm(term, axis=1)))
            past.append(size)
            small = small + 1 if size < self.tail_eps else 0
            if small >= 2:
                break
            nxt = cur
        future = []
        cur = pts
        small = 0
        for j in range(n, min(self.N, n + self.k_max)):
            nxt = self.rs.F(j, cur)
            fj = nxt - cur @ self.rs.B[j].T
            term = fj @ (self._Bnm[n, j + 1] @ self.Q[j + 1]).T
            self._check_term(term, j, n)
            v += term
            size = float(np.max(np.linalg.norm(term, axis=1)))
            future.append(size)
            small = small + 1 if size < self.tail_eps else 0
            if small >= 2:
                break
            cur = nxt
        self.last_terms = {"n": n, "past": past, "future": future}
        out = pts + v
        return out[0] if X.ndim == 1 else out

    def _check_term(self, term, j, n):
        if not np.all(np.isfinite(term)):
            raise DichotomyTooWeak(
                f"series term j = {j} for h_{n} is not finite; the orbit escapes before the dichotomy can damp it",
                condition="summable Green series", witness={"j": int(j), "n": int(n)},
            )

    def base_residual(self, n, X):
        """‖h_{n+1}(F_n X) − B_n h_n(X)‖ per point, for 0 ≤ n < N."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lhs = self.base(n + 1, self.rs.F(n, X))
        rhs = self.base(n, X) @ self.rs.B[n].T
        return np.linalg.norm(lhs - rhs, axis=1)

    def tail_bound(self, n, K=None, lam=None):
        """K e^{−λ(N−n)}/(1 − e^{−λ}) times the last future term: the size of what
        the zero extension past N drops, under the rescaled certificate."""
        cert = self.certificate
        K = K if K is not None else (cert.K if cert is not None else 1.0)
        lam = lam if lam is not None else (cert.lam if cert is not None else 1.0)
        last = self.last_terms.get("future") or [0.0]
        return float(K * math.exp(-lam * (self.N - n)) * last[-1] / max(1e-300, -math.expm1(-lam)))

    # --- source level ---------------------------------------------------------

    def block_of(self, k):
        k = int(k)
        if not 0 <= k <= self.window:
            raise WindowError(f"source index {k} outside [0, {self.window}]", condition="anchor lookup")
        return int(np.searchsorted(self.rs.anchors, k, side="right") - 1)

    def psi(self, k, X):
        """ψ_k(X)."""
        n = self.block_of(k)
        anchor = int(self.rs.anchors[n])
        X = np.asarray(X, dtype=float)
        if self.trivial:
            return X.copy()
        Z = X if k == anchor else self.nonlinear.backward(anchor, k, X)
        H = self.base(n, Z)
        if k == anchor:
            return H
        return H @ self.source.transfer(k, anchor).T

    def inverse_psi(self, k, Y, tol=INVERSE_TOL, max_iters=INVERSE_ITERS):
        """Solve ψ_k(x) = y by x ← x − ω(ψ_k(x) − y), halving ω when a step
        does not reduce the residual."""
        Y = np.asarray(Y, dtype=float)
        if self.trivial:
            return Y.copy()
        pts = np.atleast_2d(Y)
        x = pts.copy()
        res = self.psi(k, x) - pts
        err = np.linalg.norm(res, axis=1)
        omega = np.ones(len(pts))
        goal = tol * np.maximum(1.0, np.linalg.norm(pts, axis=1))
        for _ in range(max_iters):
            active = np.nonzero(err > goal)[0]
            if active.size == 0:
                return x[0] if Y.ndim == 1 else x
            trial = x[active] - omega[active, None] * res[active]
            r_trial = self.psi(k, trial) - pts[active]
            e_trial = np.linalg.norm(r_trial, axis=1)
            better = e_trial < err[active]
            idx = active[better]
            x[idx], res[idx], err[idx] = trial[better], r_trial[better], e_trial[better]
            omega[idx] = np.minimum(1.0, omega[idx] * 1.5)
            omega[active[~better]] *= 0.5
            if np.any(omega[active] < 1e-12):
                break
        worst = int(np.argmax(err))
        raise ConvergenceError(
            f"inverse of psi_{k} did not converge (residual {err[worst]:.3g})",
            condition="near-identity fixed point", witness={"k": int(k), "residual": float(err[worst]),
                                                            "y": pts[worst].tolist()},
        )

    def residual(self, k, X):
        """‖ψ_{k+1}(G_k X) − A_k ψ_k(X)‖ per point."""
        if not 0 <= k < self.window:
            raise WindowError(f"residual needs 0 <= k < {self.window}")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        step = X @ self.source.matrices[k].T
        if not self.trivial:
            step = self.nonlinear.forward(k + 1, k, X)
        lhs = self.psi(k + 1, step)
        rhs = self.psi(k, X) @ self.source.matrices[k].T
        return np.linalg.norm(lhs - rhs, axis=1)

    def to_dict(self):
        return {
            "horizon": self.N,
            "source_window": self.window,
            "anchors": [int(a) for a in self.rs.anchors],
            "tail_eps": self.tail_eps,
            "k_max": self.k_max,
            "rescaled_certificate": None if self.certificate is None else self.certificate.to_dict(
                include_projections=False),
            **self.provenance,
        }


# --- construction ---------------------------------------------------------------


def _smallness(spec, lin, cert, c_override=None):
    """(c·K·θ^{a+1}, fitted c, 0.1·λ/K) and the warnings they trigger."""
    consts = spec.constants
    K = consts.get("K", cert.K if cert is not None else 1.0)
    a = consts.get("a", cert.a if cert is not None else 1.0)
    lip = lin
    c_fit = lip.c_hat if lip is not None else None
    c = c_override if c_override is not None else consts.get("c", consts.get("eta", c_fit or 0.0))
    value = c * K * spec.rate.theta ** (a + 1.0)
    threshold = 0.1 * cert.lam / cert.K if cert is not None else None
    if value >= 1.0:
        warnings.warn(f"c K theta^(a+1) = {value:.3g} >= 1; the nonlinearity may be too large",
                      SmallnessWarning, stacklevel=3)
    if c_fit is not None and threshold is not None and c_fit > threshold:
        warnings.warn(f"fitted c = {c_fit:.3g} exceeds 0.1 lambda/K = {threshold:.3g}", SmallnessWarning,
                      stacklevel=3)
    return {"c_K_theta_a1": float(value), "c_fit": c_fit, "c_threshold": threshold}


def _rescaled_projections(source_family, rs):
    return source_family.matrices(rs.anchors)


def build_field(linear: LinearCocycle, nonlinear, rate, projections: ProjectionFamily | None = None,
                horizon=None, tail_eps=DEFAULT_TAIL_EPS, k_max=None, provenance=None) -> ConjugacyField:
    """Rescale, pick projections for the rescaled system and wrap them in a field."""
    if horizon is None:
        horizon = max_horizon(rate, linear.window)
    if horizon < 1:
        raise WindowError(f"source window {linear.window} holds no rescaled step", condition="horizon >= 1")
    rs = rescale(linear, rate, horizon, nonlinear)
    if projections is None:
        cert = certify(linear, rate, min_window=min(32, linear.window))
        if cert is None or not cert.is_strong:
            raise DichotomyTooWeak("source system has no certified strong dichotomy; cannot split the series",
                                   condition="strong dichotomy of the linear part")
        projections = cert.projections
    P = _rescaled_projections(projections, rs)
    exp_rate = builtin_rate("exponential")
    rescaled_cert = None
    if rs.horizon >= 2:
        rescaled_cert = fit_certificate(rs.linear, exp_rate, ProjectionFamily(P), density=rs.horizon + 1)
    return ConjugacyField(rs, P, tail_eps=tail_eps, k_max=k_max, certificate=rescaled_cert, provenance=provenance)


def field_from_spec(spec, window=32, tail_eps=DEFAULT_TAIL_EPS, k_max=None, use_declared_projection=True,
                    step=None, check_smallness=True) -> ConjugacyField:
    """Field on the source window [0, window] for a discrete system, or for the
    unit-time discretization of a continuous one."""
    if spec.kind == "continuous":
        flow = Flow(spec) if step is None else Flow(spec, step)
        linear, nonlinear = flow.discretize(window)
        rate = spec.rate.discretized(flow.start)
    else:
        linear = LinearCocycle.from_spec(spec, window)
        nonlinear = NonlinearCocycle.from_spec(spec, window, linear=linear)
        rate = spec.rate
    if nonlinear.program is None:
        nonlinear = None
    family = None
    if use_declared_projection and spec.projection is not None:
        family = ProjectionFamily(spec.projection_matrices(np.arange(window + 1)))
    field = build_field(linear, nonlinear, rate, family, tail_eps=tail_eps, k_max=k_max,
                        provenance={"system": spec.metadata.get("name"), "spec_sha256": spec.sha256})
    consts = spec.constants
    c = consts.get("c", consts.get("eta"))
    if c is not None and "K" in consts and "a" in consts:
        field.provenance["constants"] = {"c": float(c), "K": float(consts["K"]), "a": float(consts["a"])}
    if check_smallness and field.nonlinear is not None and spec.kind == "discrete":
        lip = estimate_lipschitz(spec, window=min(window, 64))
        field.provenance["smallness"] = _smallness(spec, lip, field.certificate)
    return field


def base_conjugacy(field: ConjugacyField, n, x):
    return field.base(n, x)


def assemble_psi(field: ConjugacyField, k, x):
    return field.psi(k, x)


def inverse_psi(field: ConjugacyField, k, y, tol=INVERSE_TOL, max_iters=INVERSE_ITERS):
    return field.inverse_psi(k, y, tol, max_iters)


# --- continuous time ---------------------------------------------------------------


def continuous_conjugacy(flow: Flow, field: ConjugacyField, t, x, direction="H"):
    """H(t,x) = T(t,n) ψ_n(φ(n,t;x)) or G(t,x) = φ(t,n; ψ_n⁻¹(T(n,t)x)), n = ⌊t − t0⌋."""
    t = float(t)
    i = int(math.floor(t - flow.start))
    if i < 0:
        raise ConfigurationError(f"time {t} precedes the domain start {flow.start}")
    tn = flow.start + i
    X = np.asarray(x, dtype=float)
    if direction == "H":
        return flow.transfer(t, tn) @ field.psi(i, flow.flow(tn, t, X)).T if X.ndim == 1 else \
            field.psi(i, flow.flow(tn, t, X)) @ flow.transfer(t, tn).T
    if direction == "G":
        Y = X @ flow.transfer(tn, t).T
        return flow.flow(t, tn, field.inverse_psi(i, Y))
    raise ConfigurationError("direction must be 'H' or 'G'")


# --- sampling and regularity ------------------------------------------------------


def sample_ball(rng, count, dim, radius):
    """Points uniform in the closed ball of the given radius."""
    g = rng.standard_normal((count, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, count) ** (1.0 / dim)
    return g * r[:, None]


def residual_table(field: ConjugacyField, samples=500, radius=0.5, k_limit=None, seed=0):
    """Conjugacy residual at seeded (k, x) with k < k_limit and ‖x‖ ≤ radius."""
    rng = np.random.default_rng(seed)
    k_limit = field.window if k_limit is None else min(k_limit, field.window)
    ks = rng.integers(0, k_limit, samples)
    X = sample_ball(rng, samples, field.dim, radius)
    res = np.empty(samples)
    for k in np.unique(ks):
        sel = ks == k
        res[sel] = field.residual(int(k), X[sel])
    worst = int(np.argmax(res))
    rows = [{"k": int(k), "x": x.tolist(), "residual": float(r)} for k, x, r in zip(ks, X, res)]
    return {"max": float(res[worst]), "witness": rows[worst], "rows": rows, "samples": samples,
            "radius": radius, "seed": seed}


def _jacobians(fn, X, step):
    d = X.shape[1]
    cols = [(fn(X + e) - fn(X - e)) / (2.0 * step) for e in np.eye(d) * step]
    return np.stack(cols, axis=-1)


def _grid(points_per_axis, dim, radius):
    axis = np.linspace(-radius, radius, points_per_axis)
    pts = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    return pts[np.linalg.norm(pts, axis=1) <= radius * (1 + 1e-12)]


@dataclass
class RegularityReport:
    deriv_bound: float
    deriv_witness: dict
    inv_deriv_bound: float
    inv_deriv_witness: dict
    holder_exponent: float
    holder_samples: list
    diff_at_zero: list
    rho_hat: float | None
    rho_valid: float | None
    rho_formula_factor: float | None
    flags: list = field(default_factory=list)

    def to_dict(self):
        return dict(self.__dict__)


def derivative_bounds(field: ConjugacyField, ks, radius=0.1, points_per_axis=11, step=1e-5):
    """max ‖Dψ_k(x)‖ over grid x and max ‖Dψ_k⁻¹(y)‖ = ‖Dψ_k(ψ_k⁻¹ y)⁻¹‖ over grid y."""
    grid = _grid(points_per_axis, field.dim, radius)
    best = (0.0, None)
    best_inv = (0.0, None)
    for k in ks:
        J = _jacobians(lambda Z: field.psi(k, Z), grid, step)
        norms = np.linalg.norm(J, ord=2, axis=(1, 2))
        i = int(np.argmax(norms))
        if norms[i] > best[0]:
            best = (float(norms[i]), {"k": int(k), "x": grid[i].tolist()})
        pre = field.inverse_psi(k, grid)
        Jp = _jacobians(lambda Z: field.psi(k, Z), np.atleast_2d(pre), step)
        inv_norms = 1.0 / np.linalg.svd(Jp, compute_uv=False)[:, -1]
        j = int(np.argmax(inv_norms))
        if inv_norms[j] > best_inv[0]:
            best_inv = (float(inv_norms[j]), {"k": int(k), "y": grid[j].tolist()})
    return best, best_inv, grid.shape[0]


def regularity_report(field: ConjugacyField, ks=None, radius=0.1, points_per_axis=11, seed=0,
                      holder_scales=(1e-1, 1e-2, 1e-3, 1e-4), diff_radii=(1e-1, 1e-2, 1e-3, 1e-4, 1e-5),
                      directions=16, holder_bases=16, step=1e-5):
    """Finite-difference derivative bounds, a Hölder fit and the near-identity table."""
    rng = np.random.default_rng(seed)
    if ks is None:
        ks = range(0, min(field.window, 32) + 1)
    ks = list(ks)
    (T, Tw), (Ti, Tiw), _ = derivative_bounds(field, ks, radius, points_per_axis, step)
    flags = []

    # Hölder: worst increment at each scale, fitted in log-log
    bases = sample_ball(rng, holder_bases, field.dim, radius)
    units = rng.standard_normal((holder_bases, field.dim))
    units /= np.linalg.norm(units, axis=1, keepdims=True)
    log_s, log_inc, samples = [], [], []
    for s in holder_scales:
        if s < 1e-6:
            continue
        worst = 0.0
        for k in ks:
            inc = np.linalg.norm(field.psi(k, bases + s * units) - field.psi(k, bases), axis=1)
            worst = max(worst, float(np.max(inc)))
        samples.append({"scale": s, "max_increment": worst})
        if worst > 0:
            log_s.append(math.log(s))
            log_inc.append(math.log(worst))
    holder = float(np.polyfit(log_s, log_inc, 1)[0]) if len(log_s) >= 2 else float("nan")

    table = []
    for r in diff_radii:
        dirs = rng.standard_normal((directions, field.dim))
        pts = r * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        worst, wit = 0.0, None
        for k in ks:
            ratio = np.linalg.norm(field.psi(k, pts) - pts, axis=1) / r
            i = int(np.argmax(ratio))
            if ratio[i] > worst or wit is None:
                worst, wit = float(ratio[i]), {"k": int(k), "x": pts[i].tolist()}
        table.append({"radius": r, "max_ratio": worst, "witness": wit})
    ratios = np.array([row["max_ratio"] for row in table])
    radii = np.array([row["radius"] for row in table])
    rho_hat = None
    if np.all(ratios > 0):
        rho_hat = float(np.polyfit(np.log(radii), np.log(ratios), 1)[0])
        if np.any(np.diff(ratios) > 0):
            flags.append("diff_at_zero_not_monotone")

    # validity radius: largest tested radius whose derivative bound stays within 5%
    rho_valid = None
    for r in sorted({radius, 2 * radius, 5 * radius}):
        (Tr, _), _, _ = derivative_bounds(field, ks[:: max(1, len(ks) // 8)], r, max(5, points_per_axis // 2), step)
        if Tr <= 1.05 * max(T, 1.0):
            rho_valid = r
        else:
            break
    factor = None
    consts = field.provenance.get("constants")
    if consts:
        theta = field.rs.rate.theta
        a_tilde = consts["a"] + consts["K"] * consts["c"] * theta
        factor = float(1.0 / (consts["K"] * (math.e * theta ** 2) ** a_tilde))
    return RegularityReport(T, Tw, Ti, Tiw, holder, samples, table, rho_hat, rho_valid, factor, flags)
