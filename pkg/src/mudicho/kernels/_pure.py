"""Numpy implementation of the kernel interface.

Each program is interpreted once per call with whole point batches on the
stack, so the per-instruction overhead is amortized over the batch.
"""

import numpy as np

from ..sysdef.expr import OP_ADD, OP_CONST, OP_DIV, OP_MUL, OP_NEG, OP_POW, OP_SUB, OP_VAR

_FUNCS = (np.exp, np.log, np.sin, np.cos, np.sqrt, np.tanh, np.abs)

BACKEND = "python"


def _run(program, p, columns):
    code = program.code
    consts = program.consts
    stack = []
    for k in range(program.offsets[p], program.offsets[p + 1]):
        op, arg = code[k]
        if op == OP_CONST:
            stack.append(consts[arg])
        elif op == OP_VAR:
            stack.append(columns[arg])
        elif op == OP_NEG:
            stack.append(-stack.pop())
        elif op <= OP_POW:
            b = stack.pop()
            a = stack.pop()
            if op == OP_ADD:
                stack.append(a + b)
            elif op == OP_SUB:
                stack.append(a - b)
            elif op == OP_MUL:
                stack.append(a * b)
            elif op == OP_DIV:
                stack.append(a / b)
            else:
                stack.append(np.power(a, b))
        else:
            stack.append(_FUNCS[op - 8](stack.pop()))
    return stack[0]


def _eval_columns(program, columns, n_points):
    out = np.empty((n_points, program.count))
    with np.errstate(all="ignore"):
        for p in range(program.count):
            out[:, p] = _run(program, p, columns)
    return out


def eval_programs(program, variables):
    variables = np.asarray(variables, dtype=np.float64)
    columns = [variables[:, i] for i in range(variables.shape[1])]
    return _eval_columns(program, columns, variables.shape[0])


def _g(program, time, x):
    columns = [np.float64(time)] + [x[:, i] for i in range(x.shape[1])]
    return _eval_columns(program, columns, x.shape[0])


def discrete_forward(program, A, times, X, record=False):
    x = np.array(X, dtype=np.float64)
    orbit = [x.copy()] if record else None
    for j in range(A.shape[0]):
        nxt = x @ A[j].T
        if program is not None:
            nxt += _g(program, times[j], x)
        x = nxt
        if record:
            orbit.append(x.copy())
    return np.stack(orbit) if record else x


def discrete_backward(program, Ainv, times, Y, tol, max_iters):
    y = np.array(Y, dtype=np.float64)
    worst_iters = 0
    worst_delta = 0.0
    for j in range(Ainv.shape[0] - 1, -1, -1):
        base = y @ Ainv[j].T
        x = base.copy()
        if program is not None:
            for it in range(1, max_iters + 1):
                new = base - _g(program, times[j], x) @ Ainv[j].T
                delta = np.max(np.abs(new - x)) if x.size else 0.0
                x = new
                if delta <= tol:
                    break
            else:
                return x, j, it, delta
            worst_iters = max(worst_iters, it)
            worst_delta = max(worst_delta, delta)
        y = x
    return y, -1, worst_iters, worst_delta


def stage_times(t0, steps):
    steps = np.asarray(steps, dtype=np.float64)
    starts = np.cumsum(np.concatenate(([float(t0)], steps)))[:-1]
    return starts, starts + 0.5 * steps, starts + steps


def rk4_flow(program_a, program_f, t0, steps, X):
    """Integrate x' = A(t)x + f(t,x) for every row of ``X`` from ``t0`` over ``steps``."""
    x = np.array(X, dtype=np.float64)
    dim = x.shape[1]
    steps = np.asarray(steps, dtype=np.float64)
    if steps.size == 0:
        return x
    starts, mids, ends = stage_times(t0, steps)
    stacked = np.concatenate((starts, mids, ends))[:, None]
    mats = eval_programs(program_a, stacked).reshape(3, steps.size, dim, dim)

    def rhs(tt, a, y):
        out = y @ a.T
        if program_f is not None:
            out += _g(program_f, tt, y)
        return out

    for i, dt in enumerate(steps):
        k1 = rhs(starts[i], mats[0, i], x)
        k2 = rhs(mids[i], mats[1, i], x + 0.5 * dt * k1)
        k3 = rhs(mids[i], mats[1, i], x + 0.5 * dt * k2)
        k4 = rhs(ends[i], mats[2, i], x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def qr_sweep(mats, Q0):
    """Frames Q_{j+1} R_j = M_j Q_j with diag(R_j) ≥ 0, and the summed ln diag(R_j)."""
    steps, d = mats.shape[0], mats.shape[1]
    frames = np.empty((steps + 1, d, d))
    frames[0] = Q0
    growth = np.zeros(d)
    Q = frames[0]
    with np.errstate(divide="ignore"):
        for j in range(steps):
            Q, R = np.linalg.qr(mats[j] @ Q)
            diag = np.diag(R)
            Q = Q * np.where(diag < 0.0, -1.0, 1.0)
            growth += np.log(np.abs(diag))
            frames[j + 1] = Q
    return frames, growth


def propagate_log_norms(mats, idx, start, keep):
    """Push ``start[i]`` from index ``idx[i]`` through the steps, applying
    ``keep[j+1]`` after step j when given, and record the state at every later
    sample index as a unit Frobenius-norm matrix times exp(log scale)."""
    k, d = idx.size, mats.shape[1]
    records = np.zeros((k, k, d, d))
    scales = np.full((k, k), np.nan)
    X = np.array(start, dtype=np.float64)
    norms = np.sqrt(np.einsum("kij,kij->k", X, X))
    with np.errstate(divide="ignore", invalid="ignore"):
        X = np.where(norms[:, None, None] > 0, X / norms[:, None, None], 0.0)
        scale = np.log(norms)
        c = 0
        for j in range(int(idx[0]), int(idx[-1]) + 1):
            while c < k and idx[c] == j:
                records[: c + 1, c] = X[: c + 1]
                scales[: c + 1, c] = scale[: c + 1]
                c += 1
            if j == idx[-1]:
                break
            live = X[:c]
            live = mats[j] @ live
            if keep is not None:
                live = keep[j + 1] @ live
            s = np.sqrt(np.einsum("kij,kij->k", live, live))
            X[:c] = np.where(s[:, None, None] > 0, live / s[:, None, None], 0.0)
            scale[:c] += np.log(s)
    return records, scales
