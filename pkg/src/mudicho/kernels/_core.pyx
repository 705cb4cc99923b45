# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: a stack interpreter for expression programs plus the
orbit, inversion and RK4 loops built on it.  Signatures mirror ``_pure``."""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, NAN, cos, exp, fabs, log, pow, sin, sqrt, tanh
from libc.stdlib cimport free, malloc

cnp.import_array()

BACKEND = "cython"

# chunk of RK4 steps whose stage matrices are evaluated up front
cdef enum:
    STEP_CHUNK = 2048


cdef inline double run(const int[:, ::1] code, Py_ssize_t start, Py_ssize_t stop,
                       const double[::1] consts, const double* slots, double* stack) noexcept nogil:
    cdef Py_ssize_t k
    cdef Py_ssize_t sp = 0
    cdef int op
    cdef double b
    for k in range(start, stop):
        op = code[k, 0]
        if op == 0:
            stack[sp] = consts[code[k, 1]]
            sp += 1
        elif op == 1:
            stack[sp] = slots[code[k, 1]]
            sp += 1
        elif op == 2:
            stack[sp - 1] = -stack[sp - 1]
        elif op <= 7:
            sp -= 1
            b = stack[sp]
            if op == 3:
                stack[sp - 1] = stack[sp - 1] + b
            elif op == 4:
                stack[sp - 1] = stack[sp - 1] - b
            elif op == 5:
                stack[sp - 1] = stack[sp - 1] * b
            elif op == 6:
                stack[sp - 1] = stack[sp - 1] / b
            else:
                stack[sp - 1] = pow(stack[sp - 1], b)
        elif op == 8:
            stack[sp - 1] = exp(stack[sp - 1])
        elif op == 9:
            stack[sp - 1] = log(stack[sp - 1])
        elif op == 10:
            stack[sp - 1] = sin(stack[sp - 1])
        elif op == 11:
            stack[sp - 1] = cos(stack[sp - 1])
        elif op == 12:
            stack[sp - 1] = sqrt(stack[sp - 1])
        elif op == 13:
            stack[sp - 1] = tanh(stack[sp - 1])
        else:
            stack[sp - 1] = fabs(stack[sp - 1])
    return stack[0]


cdef class _Prog:
    """Typed view on a ``Program`` for nogil access."""
    cdef const int[:, ::1] code
    cdef const long long[::1] offsets
    cdef const double[::1] consts
    cdef Py_ssize_t count
    cdef Py_ssize_t max_stack

    def __init__(self, program):
        self.code = np.ascontiguousarray(program.code, dtype=np.int32)
        self.offsets = np.ascontiguousarray(program.offsets, dtype=np.int64)
        self.consts = np.ascontiguousarray(program.consts, dtype=np.float64)
        self.count = len(program.offsets) - 1
        self.max_stack = program.max_stack

    cdef inline void eval_all(self, const double* slots, double* stack, double* out) noexcept nogil:
        cdef Py_ssize_t p
        for p in range(self.count):
            out[p] = run(self.code, self.offsets[p], self.offsets[p + 1], self.consts, slots, stack)


def eval_programs(program, variables):
    cdef _Prog prog = _Prog(program)
    cdef const double[:, ::1] v = np.ascontiguousarray(variables, dtype=np.float64)
    cdef Py_ssize_t n_points = v.shape[0]
    out_arr = np.empty((n_points, prog.count))
    cdef double[:, ::1] out = out_arr
    cdef double* stack = <double*> malloc(prog.max_stack * sizeof(double))
    cdef Py_ssize_t i
    try:
        with nogil:
            for i in range(n_points):
                prog.eval_all(&v[i, 0], stack, &out[i, 0])
    finally:
        free(stack)
    return out_arr


def discrete_forward(program, A, times, X, bint record=False):
    cdef const double[:, :, ::1] a = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[::1] tt = np.ascontiguousarray(times, dtype=np.float64)
    cdef const double[:, ::1] x0 = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n_steps = a.shape[0]
    cdef Py_ssize_t n_points = x0.shape[0]
    cdef Py_ssize_t dim = x0.shape[1]
    cdef bint has_g = program is not None
    cdef _Prog prog = _Prog(program) if has_g else None
    if record:
        out_arr = np.empty((n_steps + 1, n_points, dim))
    else:
        out_arr = np.empty((n_points, dim))
    cdef double[:, :, ::1] orbit
    cdef double[:, ::1] final
    if record:
        orbit = out_arr
    else:
        final = out_arr
    cdef Py_ssize_t stack_size = prog.max_stack if has_g else 1
    cdef double* slots = <double*> malloc((dim + 1) * sizeof(double))
    cdef double* stack = <double*> malloc(stack_size * sizeof(double))
    cdef double* gval = <double*> malloc(dim * sizeof(double))
    cdef double* nxt = <double*> malloc(dim * sizeof(double))
    cdef Py_ssize_t i, j, r, c
    cdef double acc
    try:
        with nogil:
            for i in range(n_points):
                for c in range(dim):
                    slots[c + 1] = x0[i, c]
                    if record:
                        orbit[0, i, c] = x0[i, c]
                for j in range(n_steps):
                    if has_g:
                        slots[0] = tt[j]
                        prog.eval_all(slots, stack, gval)
                    for r in range(dim):
                        acc = 0.0
                        for c in range(dim):
                            acc = acc + a[j, r, c] * slots[c + 1]
                        nxt[r] = acc + gval[r] if has_g else acc
                    for r in range(dim):
                        slots[r + 1] = nxt[r]
                        if record:
                            orbit[j + 1, i, r] = nxt[r]
                if not record:
                    for c in range(dim):
                        final[i, c] = slots[c + 1]
    finally:
        free(slots)
        free(stack)
        free(gval)
        free(nxt)
    return out_arr


def discrete_backward(program, Ainv, times, Y, double tol, int max_iters):
    """Undo ``x -> A_j x + g_j(x)`` for j = J-1, ..., 0 by the fixed point
    ``x <- A_j^{-1}(y - g_j(x))``.  Returns ``(x, failed_step, iters, delta)``
    where ``failed_step`` is -1 on success."""
    cdef const double[:, :, ::1] ainv = np.ascontiguousarray(Ainv, dtype=np.float64)
    cdef const double[::1] tt = np.ascontiguousarray(times, dtype=np.float64)
    out_arr = np.array(Y, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] y = out_arr
    cdef Py_ssize_t n_steps = ainv.shape[0]
    cdef Py_ssize_t n_points = y.shape[0]
    cdef Py_ssize_t dim = y.shape[1]
    cdef bint has_g = program is not None
    cdef _Prog prog = _Prog(program) if has_g else None
    cdef Py_ssize_t stack_size = prog.max_stack if has_g else 1
    cdef double* slots = <double*> malloc((dim + 1) * sizeof(double))
    cdef double* stack = <double*> malloc(stack_size * sizeof(double))
    cdef double* gval = <double*> malloc(dim * sizeof(double))
    cdef double* base = <double*> malloc(dim * sizeof(double))
    cdef double* nxt = <double*> malloc(dim * sizeof(double))
    cdef Py_ssize_t i, j, r, c
    cdef int it
    cdef int worst_iters = 0
    cdef double worst_delta = 0.0
    cdef double delta = 0.0
    cdef double acc
    cdef Py_ssize_t failed = -1
    try:
        with nogil:
            for i in range(n_points):
                for j in range(n_steps - 1, -1, -1):
                    for r in range(dim):
                        acc = 0.0
                        for c in range(dim):
                            acc = acc + ainv[j, r, c] * y[i, c]
                        base[r] = acc
                        slots[r + 1] = acc
                    if has_g:
                        slots[0] = tt[j]
                        it = 0
                        while True:
                            it += 1
                            prog.eval_all(slots, stack, gval)
                            delta = 0.0
                            for r in range(dim):
                                acc = 0.0
                                for c in range(dim):
                                    acc = acc + ainv[j, r, c] * gval[c]
                                nxt[r] = base[r] - acc
                                if fabs(nxt[r] - slots[r + 1]) > delta:
                                    delta = fabs(nxt[r] - slots[r + 1])
                            for r in range(dim):
                                slots[r + 1] = nxt[r]
                            if delta <= tol:
                                break
                            if it >= max_iters:
                                failed = j
                                break
                        if it > worst_iters:
                            worst_iters = it
                        if delta > worst_delta:
                            worst_delta = delta
                        if failed >= 0:
                            break
                    for r in range(dim):
                        y[i, r] = slots[r + 1]
                if failed >= 0:
                    break
    finally:
        free(slots)
        free(stack)
        free(gval)
        free(base)
        free(nxt)
    return out_arr, int(failed), int(worst_iters), float(worst_delta)


cdef inline void rhs(double t, const double* amat, _Prog prog, bint has_f, Py_ssize_t dim,
                     double* slots, double* stack, const double* y, double* out) noexcept nogil:
    cdef Py_ssize_t r, c
    cdef double acc
    if has_f:
        slots[0] = t
        for c in range(dim):
            slots[c + 1] = y[c]
        prog.eval_all(slots, stack, out)
    for r in range(dim):
        acc = 0.0
        for c in range(dim):
            acc = acc + amat[r * dim + c] * y[c]
        if has_f:
            out[r] = out[r] + acc
        else:
            out[r] = acc


def rk4_flow(program_a, program_f, double t0, steps, X):
    """Integrate x' = A(t)x + f(t,x) for every row of ``X`` from ``t0`` over ``steps``."""
    cdef const double[::1] hs = np.ascontiguousarray(steps, dtype=np.float64)
    out_arr = np.array(X, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] x = out_arr
    cdef Py_ssize_t n_points = x.shape[0]
    cdef Py_ssize_t dim = x.shape[1]
    cdef Py_ssize_t n_steps = hs.shape[0]
    cdef _Prog pa = _Prog(program_a)
    cdef bint has_f = program_f is not None
    cdef _Prog pf = _Prog(program_f) if has_f else None
    cdef Py_ssize_t stack_size = max(pa.max_stack, pf.max_stack if has_f else 1)
    cdef Py_ssize_t dd = dim * dim
    cdef double* mats = <double*> malloc(3 * STEP_CHUNK * dd * sizeof(double))
    cdef double* times = <double*> malloc(3 * STEP_CHUNK * sizeof(double))
    cdef double* slots = <double*> malloc((dim + 1) * sizeof(double))
    cdef double* stack = <double*> malloc(stack_size * sizeof(double))
    cdef double* k1 = <double*> malloc(dim * sizeof(double))
    cdef double* k2 = <double*> malloc(dim * sizeof(double))
    cdef double* k3 = <double*> malloc(dim * sizeof(double))
    cdef double* k4 = <double*> malloc(dim * sizeof(double))
    cdef double* tmp = <double*> malloc(dim * sizeof(double))
    cdef double* cur = <double*> malloc(dim * sizeof(double))
    cdef Py_ssize_t chunk_start, chunk_len, s, i, r, q
    cdef double t = t0
    cdef double dt
    try:
        with nogil:
            chunk_start = 0
            while chunk_start < n_steps:
                chunk_len = min(<Py_ssize_t> STEP_CHUNK, n_steps - chunk_start)
                for s in range(chunk_len):
                    dt = hs[chunk_start + s]
                    times[3 * s] = t
                    times[3 * s + 1] = t + 0.5 * dt
                    times[3 * s + 2] = t + dt
                    t = t + dt
                    for q in range(3):
                        slots[0] = times[3 * s + q]
                        pa.eval_all(slots, stack, &mats[(3 * s + q) * dd])
                for i in range(n_points):
                    for r in range(dim):
                        cur[r] = x[i, r]
                    for s in range(chunk_len):
                        dt = hs[chunk_start + s]
                        rhs(times[3 * s], &mats[(3 * s) * dd], pf, has_f, dim, slots, stack, cur, k1)
                        for r in range(dim):
                            tmp[r] = cur[r] + 0.5 * dt * k1[r]
                        rhs(times[3 * s + 1], &mats[(3 * s + 1) * dd], pf, has_f, dim, slots, stack, tmp, k2)
                        for r in range(dim):
                            tmp[r] = cur[r] + 0.5 * dt * k2[r]
                        rhs(times[3 * s + 1], &mats[(3 * s + 1) * dd], pf, has_f, dim, slots, stack, tmp, k3)
                        for r in range(dim):
                            tmp[r] = cur[r] + dt * k3[r]
                        rhs(times[3 * s + 2], &mats[(3 * s + 2) * dd], pf, has_f, dim, slots, stack, tmp, k4)
                        for r in range(dim):
                            cur[r] = cur[r] + (dt / 6.0) * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r])
                    for r in range(dim):
                        x[i, r] = cur[r]
                chunk_start += chunk_len
    finally:
        free(mats)
        free(times)
        free(slots)
        free(stack)
        free(k1)
        free(k2)
        free(k3)
        free(k4)
        free(tmp)
        free(cur)
    return out_arr


cdef inline void mat_mul(const double* a, const double* b, double* out, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t r, c, q
    cdef double acc
    for r in range(d):
        for c in range(d):
            acc = 0.0
            for q in range(d):
                acc = acc + a[r * d + q] * b[q * d + c]
            out[r * d + c] = acc


def qr_sweep(mats, Q0):
    """Frames Q_{j+1} R_j = M_j Q_j by Gram-Schmidt with one reorthogonalization
    pass, so diag(R_j) > 0, and the summed ln diag(R_j)."""
    cdef const double[:, :, ::1] m = np.ascontiguousarray(mats, dtype=np.float64)
    cdef Py_ssize_t steps = m.shape[0], d = m.shape[1]
    frames_arr = np.empty((steps + 1, d, d))
    frames_arr[0] = Q0
    growth_arr = np.zeros(d)
    cdef double[:, :, ::1] f = frames_arr
    cdef double[::1] growth = growth_arr
    cdef double* work = <double*> malloc(d * d * sizeof(double))
    cdef Py_ssize_t j, r, c, q, sweep
    cdef double acc, norm
    try:
        with nogil:
            for j in range(steps):
                mat_mul(&m[j, 0, 0], &f[j, 0, 0], work, d)
                for c in range(d):
                    for sweep in range(2):
                        for q in range(c):
                            acc = 0.0
                            for r in range(d):
                                acc = acc + f[j + 1, r, q] * work[r * d + c]
                            for r in range(d):
                                work[r * d + c] = work[r * d + c] - acc * f[j + 1, r, q]
                    norm = 0.0
                    for r in range(d):
                        norm = norm + work[r * d + c] * work[r * d + c]
                    norm = sqrt(norm)
                    growth[c] = growth[c] + log(norm)
                    for r in range(d):
                        f[j + 1, r, c] = work[r * d + c] / norm
    finally:
        free(work)
    return frames_arr, growth_arr


def propagate_log_norms(mats, idx, start, keep):
    """Push ``start[i]`` from index ``idx[i]`` through the steps, applying
    ``keep[j+1]`` after step j when given, and record the state at every later
    sample index as a unit Frobenius-norm matrix times exp(log scale)."""
    cdef const double[:, :, ::1] m = np.ascontiguousarray(mats, dtype=np.float64)
    cdef const long[::1] ix = np.ascontiguousarray(idx, dtype=np.int64)
    cdef bint has_keep = keep is not None
    cdef const double[:, :, ::1] kp = np.ascontiguousarray(keep if has_keep else np.zeros((1, 1, 1)),
                                                           dtype=np.float64)
    cdef Py_ssize_t k = ix.shape[0], d = m.shape[1], dd = d * d
    state_arr = np.array(start, dtype=np.float64, order="C")
    records_arr = np.zeros((k, k, d, d))
    scales_arr = np.full((k, k), np.nan)
    cdef double[:, :, ::1] x = state_arr
    cdef double[:, :, :, ::1] rec = records_arr
    cdef double[:, ::1] sc = scales_arr
    cdef double* scale = <double*> malloc(k * sizeof(double))
    cdef double* tmp = <double*> malloc(dd * sizeof(double))
    cdef double* tmp2 = <double*> malloc(dd * sizeof(double))
    cdef Py_ssize_t i, c = 0, e, j, last
    cdef double s
    try:
        with nogil:
            for i in range(k):
                s = 0.0
                for e in range(dd):
                    s = s + (&x[i, 0, 0])[e] * (&x[i, 0, 0])[e]
                s = sqrt(s)
                if s > 0.0:
                    for e in range(dd):
                        (&x[i, 0, 0])[e] = (&x[i, 0, 0])[e] / s
                    scale[i] = log(s)
                else:
                    scale[i] = -INFINITY
            last = ix[k - 1]
            j = ix[0]
            while True:
                while c < k and ix[c] == j:
                    for i in range(c + 1):
                        for e in range(dd):
                            (&rec[i, c, 0, 0])[e] = (&x[i, 0, 0])[e]
                        sc[i, c] = scale[i]
                    c += 1
                if j == last:
                    break
                for i in range(c):
                    if scale[i] == -INFINITY:
                        continue
                    mat_mul(&m[j, 0, 0], &x[i, 0, 0], tmp, d)
                    if has_keep:
                        mat_mul(&kp[j + 1, 0, 0], tmp, tmp2, d)
                    else:
                        for e in range(dd):
                            tmp2[e] = tmp[e]
                    s = 0.0
                    for e in range(dd):
                        s = s + tmp2[e] * tmp2[e]
                    s = sqrt(s)
                    if s > 0.0:
                        for e in range(dd):
                            (&x[i, 0, 0])[e] = tmp2[e] / s
                        scale[i] = scale[i] + log(s)
                    else:
                        for e in range(dd):
                            (&x[i, 0, 0])[e] = 0.0
                        scale[i] = -INFINITY
                j += 1
    finally:
        free(scale)
        free(tmp)
        free(tmp2)
    return records_arr, scales_arr
