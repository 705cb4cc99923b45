"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line that is printed in the "acceptance
criteria" section of the terminal summary."""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import constant_diagonal
from mudicho.dichotomy import ScaledFitter, analytic_projections, certify, fit_certificate
from mudicho.evolution import Flow, LinearCocycle, NonlinearCocycle
from mudicho.growth import builtin_rate
from mudicho.linearize import continuous_conjugacy, derivative_bounds, field_from_spec, regularity_report, \
    residual_table, sample_ball
from mudicho.rescale import rescale
from mudicho.spectrum import check_conditions, continuous_spectrum, hausdorff_distance, scan_spectrum, \
    spectrum_of_rescaled

EXP = builtin_rate("exponential")
TESTS = Path(__file__).parent

pytestmark = pytest.mark.slow


def test_ac1_example_certificate(ex42, criterion):
    start = time.perf_counter()
    lin = LinearCocycle.from_spec(ex42, 512)
    cert = fit_certificate(lin, ex42.rate, analytic_projections(ex42, 512))
    elapsed = time.perf_counter() - start
    ok = abs(cert.lam - 1) <= 0.05 and abs(cert.a - 1) <= 0.05 and cert.K <= 1.2 and elapsed < 5
    criterion("AC1", ok, f"lambda={cert.lam:.6f} a={cert.a:.6f} K={cert.K:.6f} "
                         f"verdict={cert.verdict} time={elapsed:.2f}s")


def test_ac2_example_spectrum(ex42, lin42_512, criterion):
    start = time.perf_counter()
    est = scan_spectrum(lin42_512, ex42.rate, dtau=0.05, refined=1e-3, workers=8)
    elapsed = time.perf_counter() - start
    iv = sorted(est.intervals)
    ok = (len(iv) == 2 and all(b - a <= 0.05 for a, b in iv)
          and abs(0.5 * sum(iv[0]) + 1) <= 0.1 and abs(0.5 * sum(iv[1]) - 1) <= 0.1 and elapsed < 120)
    criterion("AC2", ok, f"intervals={np.round(iv, 6).tolist()} time={elapsed:.2f}s (8 workers)")


def test_ac3_exponential_rate_negative_control(ex42, criterion):
    # the shifted system has norms (m+1)/(n+1) e^{-tau(m-n)}, so every tau != 0 is expected
    # to certify; this criterion is recorded as unattainable and left failing on purpose
    taus = np.linspace(-0.5, 0.5, 101)
    seen, nearest = {}, {}
    for window in (128, 512, 2048):
        lin = LinearCocycle.from_spec(ex42, window)
        fitter = ScaledFitter(lin, EXP)
        verdicts = {float(t): fitter.fit(float(t))[0] for t in taus}
        for tau in (-0.5, -0.25, 0.0, 0.25, 0.5):
            cert = certify(lin.scaled(EXP, tau), EXP)
            verdicts.setdefault(tau, "none" if cert is None else cert.verdict)
        seen[window] = set(verdicts.values())
        strong = [abs(t) for t, v in verdicts.items() if v != "none"]
        nearest[window] = round(min(strong), 3) if strong else None
    ok = all(v == {"none"} for v in seen.values())
    criterion("AC3", ok, "verdicts over tau in [-0.5, 0.5]: "
                         + ", ".join(f"window {w}: {sorted(v)} (smallest certified |tau| {nearest[w]})"
                                     for w, v in seen.items())
                         + "; unshifted system: none")


def test_ac4_rescaling_identity(ex42, criterion):
    window = 64
    lin = LinearCocycle.from_spec(ex42, window)
    nl = NonlinearCocycle.from_spec(ex42, window, linear=lin)
    rs = rescale(lin, EXP, window, nl)
    exact = bool(np.array_equal(rs.B, lin.matrices))
    axis = np.linspace(-1.0, 1.0, 32)
    grid = np.stack(np.meshgrid(axis, axis), axis=-1).reshape(-1, 2)
    worst = max(float(np.max(np.abs(rs.f(n, grid) - ex42.nonlinear_at(ex42.label(n), grid))))
                for n in range(window))
    ok = exact and worst <= 1e-12
    criterion("AC4", ok, f"B_n == A_n exactly for n < {window}: {exact}; "
                         f"max |f_n - g_n| on {len(grid)} points = {worst:.2e}")


def test_ac5_rescaled_spectrum_matches(ex42, criterion):
    lin = LinearCocycle.from_spec(ex42, 60_000)
    result = spectrum_of_rescaled(lin, ex42.rate, dtau=0.05)
    criterion("AC5", result.distance <= 0.1,
              f"hausdorff={result.distance:.4f} horizon={result.horizon} source_window={lin.window} "
              f"source={np.round(result.source.intervals, 4).tolist()} "
              f"rescaled={np.round(result.rescaled.intervals, 4).tolist()}")


@pytest.fixture(scope="module")
def field42(ex42):
    return field_from_spec(ex42, window=32, tail_eps=1e-12)


def test_ac6_conjugacy_residual(field42, criterion):
    start = time.perf_counter()
    table = residual_table(field42, samples=500, radius=0.5, seed=0)
    elapsed = time.perf_counter() - start
    criterion("AC6", table["max"] <= 1e-6 and elapsed < 60,
              f"max residual={table['max']:.3e} over 500 samples, time={elapsed:.2f}s")


def test_ac7_derivative_bounds_stable(field42, criterion):
    ks = range(0, 33)
    (coarse, _), (coarse_inv, _), n_coarse = derivative_bounds(field42, ks, radius=0.1, points_per_axis=11)
    (fine, _), (fine_inv, _), n_fine = derivative_bounds(field42, ks, radius=0.1, points_per_axis=21)
    change = abs(fine - coarse) / coarse
    change_inv = abs(fine_inv - coarse_inv) / coarse_inv
    criterion("AC7", change < 0.05 and change_inv < 0.05,
              f"max|Dpsi| {coarse:.6f} -> {fine:.6f} ({change:.2%}), "
              f"max|Dpsi^-1| {coarse_inv:.6f} -> {fine_inv:.6f} ({change_inv:.2%}), "
              f"grid {n_coarse} -> {n_fine} points")


def test_ac8_holder_on_band_only(band_only, criterion):
    lin = LinearCocycle.from_spec(band_only, 512)
    conditions = check_conditions(scan_spectrum(lin, band_only.rate))
    alpha1 = 0.9 * conditions.alpha1_sup
    report = regularity_report(field_from_spec(band_only, window=32))
    ok = report.holder_exponent >= alpha1 - 0.1
    criterion("AC8", ok, f"holder={report.holder_exponent:.4f} alpha1={alpha1:.4f} "
                         f"(alpha1_sup={conditions.alpha1_sup:.4f}, gap_ok={conditions.gap_ok}, "
                         f"bands_ok={conditions.bands_ok})")


def test_ac9_continuous_example(ex42, ex55, criterion):
    flow = Flow(ex55)
    grid = np.linspace(1.0, 16.0, 7)
    transfer_err = max(float(np.max(np.abs(flow.transfer(t, s) - np.diag([s / t, t / s]))))
                       for t in grid for s in grid)
    linear, _ = flow.discretize(64)
    disc_err = float(np.max(np.abs(linear.matrices - LinearCocycle.from_spec(ex42, 64).matrices)))
    est = continuous_spectrum(flow, ex55.rate)
    dist = hausdorff_distance(est.intervals, [[-1.0, -1.0], [1.0, 1.0]])
    field = field_from_spec(ex55, window=32)
    rng = np.random.default_rng(0)
    times = rng.uniform(flow.start, flow.start + 31.0, 200)
    X = sample_ball(rng, 200, 2, 0.3)
    hg = max(float(np.max(np.abs(continuous_conjugacy(flow, field, t, continuous_conjugacy(flow, field, t, x, "G"),
                                                      "H") - x)))
             for t, x in zip(times, X))
    ok = transfer_err <= 1e-8 and disc_err <= 1e-8 and dist <= 0.1 and hg <= 1e-8
    criterion("AC9", ok, f"transfer err={transfer_err:.2e} discretization err={disc_err:.2e} "
                         f"spectrum={np.round(est.intervals, 4).tolist()} (distance {dist:.4f}) "
                         f"H(G(t,x)) err={hg:.2e}")


def test_ac10_property_suites(criterion):
    targets = [str(TESTS / "test_properties.py"), f"{TESTS / 'test_expr.py'}::test_print_parse_round_trip",
               f"{TESTS / 'test_expr.py'}::test_compiled_matches_tree"]
    out = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *targets],
                         capture_output=True, text=True, cwd=TESTS.parent, env=dict(os.environ))
    summary = out.stdout.strip().splitlines()[-1] if out.stdout.strip() else out.stderr.strip()
    criterion("AC10", out.returncode == 0, f"{summary} (200 cases per property)")


def test_ac11_constant_diagonal_oracle(criterion):
    rng = np.random.default_rng(2024)
    worst, failures = 0.0, []
    sets = 0
    while sets < 20:
        d = int(rng.integers(1, 5))
        exps = np.sort(rng.uniform(-2.0, 2.0, d))
        if d > 1 and np.min(np.diff(exps)) < 0.3:
            continue
        sets += 1
        est = scan_spectrum(constant_diagonal(exps, 128), EXP, refined=1e-3)
        dist = hausdorff_distance(est.intervals, [[c, c] for c in exps])
        worst = max(worst, dist)
        if len(est.intervals) != d or dist > est.refined:
            failures.append({"exponents": exps.round(4).tolist(), "intervals": est.intervals})
    criterion("AC11", not failures, f"20 exponent sets, worst hausdorff={worst:.2e} (tolerance 1e-3), "
                                    f"failures={failures}")
