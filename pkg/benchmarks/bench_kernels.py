"""Time the compiled and pure-Python kernel backends on the bundled systems.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import sys
import timeit

import numpy as np

from mudicho import kernels
from mudicho.evolution import LinearCocycle
from mudicho.sysdef.spec import load_spec


def cases():
    disc = load_spec("example42")
    cont = load_spec("example55")
    window = 512
    lin = LinearCocycle.from_spec(disc, window)
    times = disc.label(np.arange(window))
    rng = np.random.default_rng(0)
    X = rng.uniform(-0.5, 0.5, (256, 2))
    slots = np.column_stack([rng.uniform(1, 100, 10_000), rng.uniform(-1, 1, (10_000, 2))])
    Y = kernels.discrete_forward(disc.nonlinear_program(), lin.matrices[:64], times[:64], X)
    prog_a, prog_f = cont.linear_program(), cont.nonlinear_program()
    small = slots[:64]
    long_mats = np.random.default_rng(1).normal(size=(20_000, 3, 3)) + 2 * np.eye(3)
    idx = np.unique(np.geomspace(1, 20_000, 60).astype(np.int64))
    starts = np.broadcast_to(np.eye(3), (idx.size, 3, 3))
    return {
        "eval_programs (64 points)": lambda b: kernels.eval_programs(disc.nonlinear_program(), small, backend=b),
        "eval_programs (10k points)": lambda b: kernels.eval_programs(disc.nonlinear_program(), slots, backend=b),
        "discrete_forward (256 pts x 512 steps)": lambda b: kernels.discrete_forward(
            disc.nonlinear_program(), lin.matrices, times, X, backend=b),
        "discrete_backward (256 pts x 64 steps)": lambda b: kernels.discrete_backward(
            disc.nonlinear_program(), lin.inverses[:64], times[:64], Y, 1e-12, 200, backend=b),
        "rk4_flow transfer (10 time units, h=1e-3)": lambda b: kernels.rk4_flow(
            prog_a, None, 1.0, 11.0, 1e-3, np.eye(2), backend=b),
        "rk4_flow nonlinear (64 pts, 2 time units)": lambda b: kernels.rk4_flow(
            prog_a, prog_f, 1.0, 3.0, 1e-3, X[:64], backend=b),
        "qr_sweep (3x3, 20k steps)": lambda b: kernels.qr_sweep(long_mats, np.eye(3), backend=b),
        "propagate_log_norms (3x3, 20k steps, 60 starts)": lambda b: kernels.propagate_log_norms(
            long_mats, idx, starts, backend=b),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", default=None)
    args = parser.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only timing the pure-Python one", file=sys.stderr)
    rows = []
    for name, fn in cases().items():
        best = {}
        for b in backends:
            fn(b)  # warm up
            best[b] = min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat))
        speedup = best["python"] / best["cython"] if "cython" in best else None
        rows.append({"case": name, **{f"{b}_seconds": t for b, t in best.items()}, "speedup": speedup})
        cells = "  ".join(f"{b}={t * 1e3:9.2f} ms" for b, t in best.items())
        print(f"{name:45s} {cells}" + (f"  x{speedup:7.1f}" if speedup else ""))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
