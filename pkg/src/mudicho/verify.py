"""Named numerical checks run by ``mudicho verify``.

Each check returns a dict with ``check``, ``passed`` (True, False, or None when
the check does not apply), the measured ``value``, its ``threshold`` and the
``condition`` it tests.
"""

from __future__ import annotations

import numpy as np

from .dichotomy import certify
from .errors import MudichoError
from .evolution import Flow, LinearCocycle, NonlinearCocycle
from .rescale import fn_series_crosscheck, max_horizon, rescale, verify_equivalence
from .spectrum import check_conditions, continuous_spectrum, scan_spectrum
from .sysdef.spec import estimate_lipschitz

IDENTITY_HORIZON = 64
IDENTITY_POINTS = 1000
COMPOSITION_TRIPLES = 200
GRONWALL_SLACK = 1.1


def _result(name, passed, value=None, threshold=None, condition=None, **extra):
    return {"check": name, "passed": passed, "value": value, "threshold": threshold, "condition": condition,
            **extra}


def _cocycles(spec, args, window=None):
    window = args.window if window is None else window
    if spec.kind == "discrete":
        lin = LinearCocycle.from_spec(spec, window)
        return lin, NonlinearCocycle.from_spec(spec, window, linear=lin), spec.rate
    flow = Flow(spec, args.step)
    lin, nonlin = flow.discretize(window)
    return lin, nonlin, spec.rate.discretized(flow.start)


def check_rescale_identity(spec, args):
    lin, nonlin, rate = _cocycles(spec, args, max(args.window, IDENTITY_HORIZON))
    if not rate.is_exponential():
        return _result("rescale-identity", None, condition="exponential growth rate (use --rate exponential)",
                       note="not applicable to this growth rate")
    horizon = min(IDENTITY_HORIZON, lin.window)
    rs = rescale(lin, rate, horizon, nonlin)
    exact = bool(np.array_equal(rs.B, lin.matrices[:horizon]))
    rng = np.random.default_rng(args.seed)
    X = rng.uniform(-1.0, 1.0, (IDENTITY_POINTS, lin.dim)) * (1.0 if args.radius is None else args.radius)
    worst = max(float(np.max(np.abs(rs.f(n, X) - nonlin.perturbation(n, X)))) for n in range(horizon))
    return _result("rescale-identity", exact and worst <= 1e-12, worst, 1e-12,
                   "B_n = A_n exactly and f_n = g_n when the growth rate is e^n", B_equal_A=exact)


def check_equivalence(spec, args):
    lin, nonlin, rate = _cocycles(spec, args)
    rs = rescale(lin, rate, max_horizon(rate, lin.window), None)
    rep = verify_equivalence(rs, rate)
    return _result("equivalence", rep.agree, rep.rescaled_verdict, rep.source_verdict,
                   "source strong dichotomy under mu iff rescaled strong exponential dichotomy",
                   report=rep.to_dict())


def check_conditions_(spec, args):
    if spec.kind == "discrete":
        lin = LinearCocycle.from_spec(spec, args.window)
        est = scan_spectrum(lin, spec.rate, (args.tau_min, args.tau_max), args.dtau, refined=args.refined,
                            workers=args.parallel)
    else:
        est = continuous_spectrum(Flow(spec, args.step), spec.rate, (args.tau_min, args.tau_max), args.dtau,
                                  args.window, args.refined, args.parallel)
    try:
        cond = check_conditions(est)
    except MudichoError as exc:
        return _result("conditions", False, condition=exc.condition, error=exc.to_dict(),
                       intervals=est.intervals)
    passed = None if cond.one_sided else bool(cond.gap_ok and cond.bands_ok)
    return _result("conditions", passed, cond.alpha1_sup, None, "spectral gap and band conditions",
                   intervals=est.intervals, details=cond.to_dict())


def check_cocycle(spec, args):
    lin, nonlin, _ = _cocycles(spec, args)
    rng = np.random.default_rng(args.seed)
    triples = np.sort(rng.integers(0, lin.window + 1, (COMPOSITION_TRIPLES, 3)), axis=1)
    worst_lin = worst_nl = 0.0
    witness = None
    for n, l, m in triples:
        lhs = lin.transfer(m, l) @ lin.transfer(l, n)
        rhs = lin.transfer(m, n)
        err = float(np.linalg.norm(lhs - rhs, 2) / max(1.0, np.linalg.norm(rhs, 2)))
        if err > worst_lin:
            worst_lin, witness = err, {"m": int(m), "l": int(l), "n": int(n)}
    for n, l, m in triples[:20]:
        if m - n > 64:
            continue
        x = rng.uniform(-0.1, 0.1, lin.dim)
        a = nonlin(m, l, nonlin(l, n, x))
        b = nonlin(m, n, x)
        worst_nl = max(worst_nl, float(np.linalg.norm(a - b) / max(1.0, np.linalg.norm(b))))
    worst = max(worst_lin, worst_nl)
    return _result("cocycle", worst <= 1e-9, worst, 1e-9, "A(m,l)A(l,n) = A(m,n) and G(m,l)G(l,n) = G(m,n)",
                   witness=witness, linear=worst_lin, nonlinear=worst_nl)


def gronwall_constants(spec, lin, rate):
    """(K, a, c) from the declared constants, falling back to fitted ones."""
    consts = spec.constants
    K, a = consts.get("K"), consts.get("a")
    if K is None or a is None:
        cert = certify(lin, rate)
        K = cert.K if K is None else K
        a = cert.a if a is None else a
    c = consts.get("c", consts.get("eta"))
    if c is None:
        c = estimate_lipschitz(spec, window=min(64, lin.window)).c_hat if spec.kind == "discrete" else 0.0
    return float(K), float(a), float(c)


def check_gronwall(spec, args):
    """‖D𝒢(m,n)x‖ and ‖𝒢(m,n)x‖/‖x‖ against K(μ_max/μ_min)^{a + Kcθ} with 10% slack."""
    lin, nonlin, rate = _cocycles(spec, args, min(args.window, 64))
    K, a, c = gronwall_constants(spec, lin, rate)
    a_tilde = a + K * c * rate.theta
    rng = np.random.default_rng(args.seed)
    worst, witness = -np.inf, None
    h = 1e-6
    for _ in range(40):
        n, m = sorted(rng.integers(0, lin.window + 1, 2))
        if rng.random() < 0.5:
            n, m = m, n
        x = rng.uniform(-0.5, 0.5, lin.dim)
        cols = [(nonlin(m, n, x + e) - nonlin(m, n, x - e)) / (2 * h) for e in np.eye(lin.dim) * h]
        D = np.stack(cols, axis=-1)
        lo, hi = min(m, n), max(m, n)
        bound = K * float(np.exp(a_tilde * (rate.log(float(hi)) - rate.log(float(lo)))))
        ratio_d = np.linalg.norm(D, 2) / bound
        ratio_g = np.linalg.norm(nonlin(m, n, x)) / (bound * np.linalg.norm(x))
        r = max(ratio_d, ratio_g)
        if r > worst:
            worst, witness = float(r), {"m": int(m), "n": int(n), "x": x.tolist()}
    return _result("gronwall", worst <= GRONWALL_SLACK, worst, GRONWALL_SLACK,
                   "||DG(m,n)(x)|| <= K (mu_max/mu_min)^(a + K c theta)", witness=witness,
                   constants={"K": K, "a": a, "c": c, "a_tilde": a_tilde})


def check_fn_series(spec, args):
    if spec.kind != "discrete":
        return _result("fn-series", None, condition="discrete system", note="not applicable to flows")
    lin, nonlin, rate = _cocycles(spec, args)
    rs = rescale(lin, rate, max_horizon(rate, lin.window), nonlin)
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for n in range(rs.horizon):
        for x in rng.uniform(-0.5, 0.5, (5, lin.dim)):
            worst = max(worst, fn_series_crosscheck(rs, n, x))
    return _result("fn-series", worst <= 1e-10, worst, 1e-10, "f_n series equals G(k(n+1),k(n)) - B_n")


_CHECKS = {
    "rescale-identity": check_rescale_identity,
    "equivalence": check_equivalence,
    "conditions": check_conditions_,
    "cocycle": check_cocycle,
    "gronwall": check_gronwall,
    "fn-series": check_fn_series,
}


def run_check(name, spec, args):
    try:
        return _CHECKS[name](spec, args)
    except MudichoError as exc:
        return _result(name, False, condition=exc.condition, error=exc.to_dict())

