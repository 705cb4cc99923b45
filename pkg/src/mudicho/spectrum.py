"""Dichotomy spectrum estimates by τ-scan plus bisection, and the spectral
gap and band conditions evaluated on an estimate."""

from __future__ import annotations

import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dichotomy import LAMBDA_MIN, PAIR_DENSITY, ScaledFitter, certify
from .errors import ConfigurationError, NotHyperbolicError
from .evolution import LinearCocycle
from .growth import GrowthRate, builtin_rate

DEFAULT_TAU_RANGE = (-3.0, 3.0)
DEFAULT_DTAU = 0.05
DEFAULT_REFINED = 1e-3


@dataclass
class SpectrumEstimate:
    intervals: list
    tau_range: tuple
    resolution: float
    refined: float
    per_tau_log: list
    error_bars: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    window: int | None = None
    rate: str | None = None

    @property
    def points(self):
        return [a for a, b in self.intervals if a == b]

    def contains(self, tau):
        return any(a <= tau <= b for a, b in self.intervals)

    def hausdorff(self, other):
        return hausdorff_distance(self.intervals, other.intervals if isinstance(other, SpectrumEstimate) else other)

    def to_dict(self):
        return {
            "intervals": [[float(a), float(b)] for a, b in self.intervals],
            "error_bars": [[float(l), float(r)] for l, r in self.error_bars],
            "tau_range": [float(t) for t in self.tau_range],
            "resolution": self.resolution,
            "refined": self.refined,
            "window": self.window,
            "rate": self.rate,
            "flags": list(self.flags),
            "per_tau_log": self.per_tau_log,
        }


def _dist_to_union(x, intervals):
    return min(max(a - x, 0.0, x - b) for a, b in intervals)


def hausdorff_distance(A, B):
    """Hausdorff distance between two finite unions of closed intervals."""
    A = [tuple(map(float, iv)) for iv in A]
    B = [tuple(map(float, iv)) for iv in B]
    if not A and not B:
        return 0.0
    if not A or not B:
        return float("inf")

    def directed(X, Y):
        cands = [p for iv in X for p in iv]
        Ys = sorted(Y)
        for (_, b1), (a2, _) in zip(Ys, Ys[1:]):
            mid = 0.5 * (b1 + a2)
            cands.extend(min(max(mid, a), b) for a, b in X)
        return max(_dist_to_union(p, Y) for p in cands)

    return max(directed(A, B), directed(B, A))


# --- scanning -----------------------------------------------------------------------

_WORKER_FITTER = None


def _worker_fit(taus):
    return [_summarize(t, *_WORKER_FITTER.fit(t)) for t in taus]


def _summarize(tau, verdict, rank, fit):
    entry = {"tau": float(tau), "verdict": verdict, "rank": int(rank)}
    if fit is not None:
        entry.update({"lambda": fit.lam, "a": fit.a, "K": fit.K})
    else:
        entry.update({"lambda": None, "a": None, "K": None})
    return entry


class _Probe:
    """Memoized verdicts of one fitter."""

    def __init__(self, fitter):
        self.fitter = fitter
        self.cache = {}

    def __call__(self, tau):
        tau = float(tau)
        if tau not in self.cache:
            self.cache[tau] = _summarize(tau, *self.fitter.fit(tau))
        return self.cache[tau]

    def spectral(self, tau):
        return self(tau)["verdict"] != "strong_dichotomy"


def _bisect_edge(probe, outside, inside, tol):
    """Shrink [outside, inside] (non-spectral, spectral) to width ≤ tol."""
    while abs(inside - outside) > tol:
        mid = 0.5 * (outside + inside)
        if probe.spectral(mid):
            inside = mid
        else:
            outside = mid
    return outside, inside


def _locate_rank_change(probe, lo, hi, tol):
    """Between two non-spectral points of different rank: the bracket of a spectral
    set as (left bracket, right bracket)."""
    r_lo = probe(lo)["rank"]
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if probe.spectral(mid):
            left = _bisect_edge(probe, lo, mid, tol)
            right = _bisect_edge(probe, hi, mid, tol)
            return left, right
        if probe(mid)["rank"] == r_lo:
            lo = mid
        else:
            hi = mid
    return (lo, hi), (hi, lo)


def scan_spectrum(cocycle: LinearCocycle, rate: GrowthRate, tau_range=DEFAULT_TAU_RANGE, dtau=DEFAULT_DTAU,
                  window=None, refined=DEFAULT_REFINED, workers=None, density=PAIR_DENSITY,
                  lam_min=LAMBDA_MIN) -> SpectrumEstimate:
    """Scan τ over a grid, mark τ where the scaled cocycle has no strong
    dichotomy, merge runs into intervals and refine the endpoints by bisection."""
    global _WORKER_FITTER
    if dtau <= 0:
        raise ConfigurationError("dtau must be positive")
    lo, hi = map(float, tau_range)
    if hi < lo:
        raise ConfigurationError("tau range is empty")
    count = int(round((hi - lo) / dtau))
    grid = np.round(lo + dtau * np.arange(count + 1), 12)
    if grid[-1] < hi - 1e-12:
        grid = np.append(grid, hi)
    fitter = ScaledFitter(cocycle, rate, window, density=density, lam_min=lam_min)
    probe = _Probe(fitter)
    if workers and workers > 1 and len(grid) > workers:
        _WORKER_FITTER = fitter
        chunks = [list(c) for c in np.array_split(grid, workers)]
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            for chunk in pool.map(_worker_fit, chunks):
                for entry in chunk:
                    probe.cache[entry["tau"]] = entry
        _WORKER_FITTER = None
    log = [probe(t) for t in grid]
    spectral = [e["verdict"] != "strong_dichotomy" for e in log]
    flags = []
    pieces = []  # (left bracket (outside, inside), right bracket (outside, inside)) or open ends

    i = 0
    while i < len(grid):
        if spectral[i]:
            j = i
            while j + 1 < len(grid) and spectral[j + 1]:
                j += 1
            left = (grid[i], grid[i]) if i == 0 else _bisect_edge(probe, grid[i - 1], grid[i], refined)
            right = (grid[j], grid[j]) if j == len(grid) - 1 else _bisect_edge(probe, grid[j + 1], grid[j], refined)
            if i == 0:
                flags.append("spectrum_reaches_lower_tau_bound")
            if j == len(grid) - 1:
                flags.append("spectrum_reaches_upper_tau_bound")
            pieces.append((left, right))
            i = j + 1
        else:
            if i + 1 < len(grid) and not spectral[i + 1] and log[i]["rank"] != log[i + 1]["rank"]:
                pieces.append(_locate_rank_change(probe, grid[i], grid[i + 1], refined))
            i += 1

    intervals = []
    bars = []
    for (l_out, l_in), (r_out, r_in) in pieces:
        a = 0.5 * (l_out + l_in)
        b = 0.5 * (r_out + r_in)
        bar_l = 0.5 * abs(l_in - l_out) if l_in != l_out else dtau
        bar_r = 0.5 * abs(r_in - r_out) if r_in != r_out else dtau
        if b - a < 2.0 * (refined + lam_min):
            a = b = 0.5 * (a + b)
        intervals.append([float(a), float(b)])
        bars.append([float(bar_l), float(bar_r)])
    if all(spectral):
        flags.append("no_dichotomy_in_tau_range")
    if len(intervals) > cocycle.dim:
        flags.append("more_intervals_than_dimension")
    per_tau = [probe.cache[t] for t in sorted(probe.cache)]
    return SpectrumEstimate(
        intervals=intervals, tau_range=(lo, hi), resolution=float(dtau), refined=float(refined),
        per_tau_log=per_tau, error_bars=bars, flags=flags, window=fitter.window, rate=str(rate.name),
    )


# --- spectral conditions -----------------------------------------------------------------


@dataclass
class SpectralConditions:
    k: int | None
    r: int
    one_sided: bool
    gap_ok: bool | None
    bands_ok: bool | None
    alpha1_sup: float | None
    checks: list

    def to_dict(self):
        return {
            "k": self.k, "r": self.r, "one_sided": self.one_sided, "gap_ok": self.gap_ok,
            "bands_ok": self.bands_ok, "alpha1_sup": self.alpha1_sup, "checks": self.checks,
        }


def check_conditions(spec) -> SpectralConditions:
    """Locate the last negative band and evaluate the gap and band inequalities."""
    intervals = spec.intervals if isinstance(spec, SpectrumEstimate) else spec
    bands = sorted((float(a), float(b)) for a, b in intervals)
    if not bands:
        raise ConfigurationError("spectrum has no intervals")
    for a, b in bands:
        if a <= 0.0 <= b:
            raise NotHyperbolicError(f"0 lies in the spectral interval [{a:g}, {b:g}]",
                                     condition="0 outside the spectrum (hyperbolicity)",
                                     witness={"interval": [a, b]})
    r = len(bands)
    k = sum(1 for a, b in bands if b < 0)
    if k == 0 or k == r:
        return SpectralConditions(k=k if k else None, r=r, one_sided=True, gap_ok=None, bands_ok=None,
                                  alpha1_sup=None,
                                  checks=[{"condition": "one-sided spectrum", "holds": False}])
    a1, br = bands[0][0], bands[-1][1]
    bk, ak1 = bands[k - 1][1], bands[k][0]
    gap = ak1 - bk
    checks = [{"condition": "gap a_{k+1} - b_k > max(b_r, -a_1)", "lhs": gap, "rhs": max(br, -a1),
               "holds": gap > max(br, -a1)}]
    for i, (a, b) in enumerate(bands, start=1):
        bound = -bk if i <= k else ak1
        checks.append({"condition": f"band {i}: b_i - a_i <= " + ("-b_k" if i <= k else "a_{k+1}"),
                       "lhs": b - a, "rhs": bound, "holds": b - a <= bound})
    gap_ok = checks[0]["holds"]
    bands_ok = all(c["holds"] for c in checks[1:])
    alpha1 = min(gap / br if br > 0 else np.inf, gap / (-a1) if a1 < 0 else np.inf)
    return SpectralConditions(k=k, r=r, one_sided=False, gap_ok=bool(gap_ok), bands_ok=bool(bands_ok),
                              alpha1_sup=float(alpha1), checks=checks)


# --- derived pipelines ---------------------------------------------------------------------


@dataclass
class RescaledSpectra:
    source: SpectrumEstimate
    rescaled: SpectrumEstimate
    distance: float
    horizon: int
    required_window: int

    def to_dict(self):
        return {"source": self.source.to_dict(), "rescaled": self.rescaled.to_dict(), "hausdorff": self.distance,
                "horizon": self.horizon, "required_window": self.required_window}


def spectrum_of_rescaled(cocycle: LinearCocycle, rate: GrowthRate, horizon=None, tau_range=DEFAULT_TAU_RANGE,
                         dtau=DEFAULT_DTAU, window=None, refined=DEFAULT_REFINED, workers=None) -> RescaledSpectra:
    """Spectrum of the source under μ and of the rescaled system under e^n."""
    from .rescale import max_horizon, rescale

    if horizon is None:
        horizon = max_horizon(rate, cocycle.window)
    rs = rescale(cocycle, rate, horizon)
    source = scan_spectrum(cocycle, rate, tau_range, dtau, window, refined, workers)
    rescaled = scan_spectrum(rs.linear, builtin_rate("exponential"), tau_range, dtau, None, refined, workers)
    # a slope fitted over ln μ_w = horizon cannot resolve exponents finer than ~1/horizon
    floor = 1.0 / horizon
    if any(min(bar) < floor for bar in rescaled.error_bars):
        rescaled.error_bars = [[max(lo, floor), max(hi, floor)] for lo, hi in rescaled.error_bars]
        rescaled.flags.append("error_bars_widened_for_short_horizon")
    return RescaledSpectra(source, rescaled, hausdorff_distance(source.intervals, rescaled.intervals),
                           horizon, rs.required_window)


def continuous_spectrum(flow, rate: GrowthRate, tau_range=DEFAULT_TAU_RANGE, dtau=DEFAULT_DTAU, window=256,
                        refined=DEFAULT_REFINED, workers=None, direct_taus=()):
    """Spectrum of x' = A(t)x through its unit-time discretization.

    ``direct_taus`` additionally integrates x' = (A(t) − τ μ'(t)/μ(t))x for the
    given τ and returns those verdicts as a cross-check."""
    if rate.kind != "differentiable":
        raise ConfigurationError("continuous spectrum needs a differentiable growth rate")
    cocycle, _ = flow.discretize(window)
    drate = rate.discretized(flow.start)
    est = scan_spectrum(cocycle, drate, tau_range, dtau, None, refined, workers)
    if direct_taus:
        checks = []
        for tau in direct_taus:
            scaled = LinearCocycle(scaled_unit_transfers(flow, rate, tau, window))
            cert = certify(scaled, drate, min_window=min(32, window))
            direct = "none" if cert is None else cert.verdict
            checks.append({"tau": float(tau), "direct": direct,
                           "discretized": ScaledFitter(cocycle, drate).fit(float(tau))[0]})
        est.flags.append({"direct_mode": checks})
    return est


def scaled_unit_transfers(flow, rate, tau, window):
    """Unit-step transfer matrices of x' = (A(t) − τ μ'(t)/μ(t))x, integrated by RK4
    on all unit intervals at once."""
    from .kernels import step_sizes

    d = flow.dim
    starts = flow.start + np.arange(window, dtype=float)
    X = np.broadcast_to(np.eye(d), (window, d, d)).copy()
    t = starts.copy()

    def field(tt):
        A = flow.spec.linear_at(tt)
        return A - (tau * rate.log_derivative(tt))[:, None, None] * np.eye(d)

    for dt in step_sizes(0.0, 1.0, flow.step):
        a0, am, a1 = field(t), field(t + 0.5 * dt), field(t + dt)
        k1 = a0 @ X
        k2 = am @ (X + 0.5 * dt * k1)
        k3 = am @ (X + 0.5 * dt * k2)
        k4 = a1 @ (X + dt * k3)
        X = X + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t + dt
    return X
