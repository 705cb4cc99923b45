"""Command-line entry point: ``mudicho <command> SYSTEM [options]``.

Reports are JSON (default) or CSV.  Exit status is 0 on success, 2 when the
input or a verified property is invalid and 3 on numerical failure; errors
are printed as a JSON object naming the violated condition.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .errors import MudichoError, ValidationFailure

SCHEMA = "mudicho.report/1"
COMMANDS = ("dichotomy", "spectrum", "rescale", "linearize", "verify", "flow")
CHECKS = ("rescale-identity", "equivalence", "conditions", "cocycle", "gronwall", "fn-series")


# --- output helpers ------------------------------------------------------------


def jsonable(obj):
    """Plain JSON types; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return jsonable(dataclasses.asdict(obj))
    return obj


def dump_json(doc):
    return json.dumps(jsonable(doc), indent=2, sort_keys=True) + "\n"


def dump_csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# --- configuration ----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="mudicho", description="Dichotomies, spectra and linearizing conjugacies "
                                                                 "of nonautonomous systems.")
    parser.add_argument("--version", action="version", version=f"mudicho {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("system", help="system file, or the name of a bundled system (example42, example55, ...)")
        p.add_argument("--window", type=int, default=256)
        p.add_argument("--tau-min", type=float, default=-3.0)
        p.add_argument("--tau-max", type=float, default=3.0)
        p.add_argument("--dtau", type=float, default=0.05)
        p.add_argument("--refined", type=float, default=1e-3)
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--radius", type=float, default=None)
        p.add_argument("--points-per-axis", type=int, default=11)
        p.add_argument("--samples", type=int, default=500)
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("--out", type=Path, default=None)
        p.add_argument("--parallel", type=int, default=None, metavar="N")
        p.add_argument("--rate", default=None, help="override the growth rate with a builtin one")
        p.add_argument("--c", type=float, default=None, help="override the nonlinearity constant")
        p.add_argument("--const", action="append", default=[], metavar="NAME=VALUE")
        p.add_argument("--qr-accumulate", action="store_true",
                       help="also keep the anchor products in rescaled form; norm tables and "
                            "projections always use QR renormalization")
        p.add_argument("--step", type=float, default=1e-3, help="RK4 step for continuous systems")
        if name in ("dichotomy", "linearize"):
            p.add_argument("--samples-out", action="store_true",
                           help="include the sampled pairs (dichotomy) or conjugacy values (linearize)")
        if name == "dichotomy":
            p.add_argument("--cut", type=float, default=0.0)
            p.add_argument("--projection", choices=("auto", "declared", "estimated"), default="auto")
        if name == "rescale":
            p.add_argument("--horizon", type=int, default=None)
        if name == "verify":
            p.add_argument("--check", action="append", choices=CHECKS, default=None)
        if name == "flow":
            p.add_argument("--t", type=float, default=None)
            p.add_argument("--s", type=float, default=None)
    return parser


def _config(args):
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}
    return cfg


def load_system(args):
    from .growth import builtin_rate
    from .sysdef.spec import load_spec

    spec = load_spec(args.system)
    overrides = {}
    for item in args.const:
        name, sep, value = item.partition("=")
        if not sep:
            raise ValidationFailure(f"--const expects NAME=VALUE, got {item!r}", condition="--const syntax")
        overrides[name.strip()] = float(value)
    if args.c is not None:
        key = "c" if "c" in spec.constants or "eta" not in spec.constants else "eta"
        overrides[key] = args.c
    if overrides:
        spec = spec.with_constants(**overrides)
    if args.rate is not None:
        kind = "discrete" if spec.kind == "discrete" else "differentiable"
        spec = dataclasses.replace(spec, rate=builtin_rate(args.rate, kind))
    return spec


def _linear(spec, args, window=None):
    from .evolution import Flow, LinearCocycle

    window = args.window if window is None else window
    if spec.kind == "discrete":
        lin = LinearCocycle.from_spec(spec, window, rescaled_anchors=args.qr_accumulate)
        return lin, spec.rate, None
    flow = Flow(spec, args.step)
    lin, _ = flow.discretize(window)
    if args.qr_accumulate:
        lin = type(lin)(lin.matrices, times=lin.times, rescaled_anchors=True, name=lin.name)
    return lin, spec.rate.discretized(flow.start), flow


# --- commands -----------------------------------------------------------------


def cmd_dichotomy(spec, args):
    from .dichotomy import analytic_projections, certify, certify_continuous

    lin, rate, flow = _linear(spec, args)
    use_declared = args.projection == "declared" or (args.projection == "auto" and spec.projection is not None
                                                     and args.rate is None and args.cut == 0.0)
    if flow is not None and not use_declared:
        cert = certify_continuous(flow, spec.rate, args.window, seed=args.seed, cut=args.cut)
    else:
        projections = analytic_projections(spec, args.window) if use_declared else None
        cert = certify(lin, rate, cut=args.cut, projections=projections)
    if cert is None:
        report = {"verdict": "none", "reason": "no resolved singular value gap at the cut", "cut": args.cut}
        return report, (["verdict"], [["none"]])
    report = cert.to_dict(include_samples=args.samples_out)
    report["projection_source"] = "declared" if use_declared else "estimated"
    s = cert.samples
    rows = zip(cert.pairs[0], cert.pairs[1], s["x"], s["y1"], s["y2"], s["y3"], s["y4"])
    return report, (["n", "m", "log_mu_ratio", "y1", "y2", "y3", "y4"], rows)


def cmd_spectrum(spec, args):
    from .errors import NotHyperbolicError
    from .spectrum import check_conditions, continuous_spectrum, scan_spectrum

    tau_range = (args.tau_min, args.tau_max)
    if spec.kind == "discrete":
        lin, rate, _ = _linear(spec, args)
        est = scan_spectrum(lin, rate, tau_range, args.dtau, None, args.refined, args.parallel)
    else:
        from .evolution import Flow

        est = continuous_spectrum(Flow(spec, args.step), spec.rate, tau_range, args.dtau, args.window,
                                  args.refined, args.parallel)
    report = est.to_dict()
    try:
        report["conditions"] = check_conditions(est).to_dict()
    except (NotHyperbolicError, MudichoError) as exc:
        report["conditions"] = {"error": exc.to_dict()}
    rows = [(e["tau"], e["verdict"], e["lambda"], e["a"]) for e in est.per_tau_log]
    return report, (["tau", "verdict", "lambda_fit", "a_fit"], rows)


def cmd_rescale(spec, args):
    from .evolution import NonlinearCocycle
    from .rescale import max_horizon, rescale

    lin, rate, _ = _linear(spec, args)
    horizon = args.horizon if args.horizon is not None else max_horizon(rate, lin.window)
    nonlinear = None
    if spec.kind == "discrete" and spec.nonlinear is not None:
        nonlinear = NonlinearCocycle.from_spec(spec, lin.window, linear=lin)
    rs = rescale(lin, rate, horizon, nonlinear)
    report = rs.to_dict()
    d = lin.dim
    header = ["n", "k_n", "k_next"] + [f"B_{i}{j}" for i in range(d) for j in range(d)]
    rows = [[n, int(rs.anchors[n]), int(rs.anchors[n + 1]), *rs.B[n].ravel()] for n in range(rs.horizon)]
    return report, (header, rows)


def cmd_linearize(spec, args):
    from .linearize import field_from_spec, regularity_report, residual_table

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        field = field_from_spec(spec, args.window, step=args.step)
        radius = 0.5 if args.radius is None else args.radius
        table = residual_table(field, samples=args.samples, radius=radius, seed=args.seed)
        ks = range(0, min(field.window, 32) + 1)
        reg = regularity_report(field, ks=ks, points_per_axis=args.points_per_axis, seed=args.seed)
    base = max((float(np.max(field.base_residual(n, np.zeros((1, field.dim)) + radius / 2)))
                for n in range(field.N)), default=0.0)
    report = {
        "residual": {k: v for k, v in table.items() if k != "rows"},
        "residual_ok": table["max"] <= args.tol,
        "base_residual_probe": base,
        "regularity": reg.to_dict(),
        "field": field.to_dict(),
        "warnings": [str(w.message) for w in caught],
    }
    if args.samples_out:
        report["conjugacy_samples"] = _conjugacy_samples(field, table["rows"])
    rows = [[r["k"], *r["x"], r["residual"]] for r in table["rows"]]
    header = ["k"] + [f"x{i + 1}" for i in range(field.dim)] + ["residual"]
    return report, (header, rows)


def _conjugacy_samples(field, rows):
    """ψ_k(x) at the residual sample points, grouped by k."""
    out = []
    ks = np.array([r["k"] for r in rows])
    X = np.array([r["x"] for r in rows])
    for k in np.unique(ks):
        sel = ks == k
        for x, y in zip(X[sel], field.psi(int(k), X[sel])):
            out.append({"k": int(k), "x": x, "psi": y})
    return out


def cmd_flow(spec, args):
    from .errors import ConfigurationError
    from .evolution import Flow

    if spec.kind != "continuous":
        raise ConfigurationError("the flow command needs a continuous system", condition="kind = continuous")
    flow = Flow(spec, args.step)
    s = flow.start if args.s is None else args.s
    t = s + 1.0 if args.t is None else args.t
    T = flow.transfer(t, s)
    mats = flow.unit_transfers(args.window)
    report = {"t": t, "s": s, "transfer": T, "step": flow.step, "window": args.window,
              "unit_transfers": mats}
    d = flow.dim
    header = ["i", "t"] + [f"A_{i}{j}" for i in range(d) for j in range(d)]
    rows = [[i, flow.start + i, *mats[i].ravel()] for i in range(args.window)]
    return report, (header, rows)


def cmd_verify(spec, args):
    from . import verify

    checks = args.check or list(CHECKS)
    results = [verify.run_check(name, spec, args) for name in checks]
    report = {"checks": results, "passed": all(r["passed"] is not False for r in results)}
    rows = [(r["check"], r["passed"], r.get("value"), r.get("threshold"), r.get("condition")) for r in results]
    return report, (["check", "passed", "value", "threshold", "condition"], rows)


HANDLERS = {
    "dichotomy": cmd_dichotomy,
    "spectrum": cmd_spectrum,
    "rescale": cmd_rescale,
    "linearize": cmd_linearize,
    "verify": cmd_verify,
    "flow": cmd_flow,
}


def provenance(spec, args):
    return {
        "schema": SCHEMA,
        "system_sha256": None if spec is None else spec.sha256,
        "system": None if spec is None else spec.metadata.get("name"),
        "config": _config(args),
        "versions": {
            "mudicho": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "backend": kernels.BACKEND,
        },
    }


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def run(argv=None):
    """Parse ``argv``, run the command, write the report; returns the exit status."""
    args = build_parser().parse_args(argv)
    spec = None
    started = time.time()
    try:
        spec = load_system(args)
        report, (header, rows) = HANDLERS[args.command](spec, args)
    except MudichoError as exc:
        doc = {"error": exc.to_dict(), "provenance": provenance(spec, args)}
        _emit(dump_json(doc), args.out)
        print(f"mudicho: {exc}", file=sys.stderr)
        return exc.exit_status
    except FileNotFoundError as exc:
        doc = {"error": {"error": "file_not_found", "message": str(exc), "condition": "readable system file"}, "provenance": provenance(None, args)}
        _emit(dump_json(doc), args.out)
        print(f"mudicho: {exc}", file=sys.stderr)
        return 2
    if args.format == "csv":
        _emit(dump_csv(header, rows), args.out)
    else:
        _emit(dump_json({"report": report, "provenance": provenance(spec, args)}), args.out)
    if args.out is not None:
        meta = {"started": started, "elapsed_seconds": time.time() - started}
        args.out.with_name(args.out.name + ".meta.json").write_text(json.dumps(meta) + "\n")
    if args.command == "verify" and not report["passed"]:
        failed = [r["check"] for r in report["checks"] if r["passed"] is False]
        print(f"mudicho: verification failed: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def main(argv=None):
    try:
        status = run(argv)
        sys.stdout.flush()
    except BrokenPipeError:
        # the reader closed the pipe (e.g. `| head`); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        status = 1
    sys.exit(status)
