# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the loop-bound kernels (see ``_kernels_py`` for the reference)."""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def out_size(Py_ssize_t n, Py_ssize_t stride):
    return (n + stride - 1) // stride


def im2col3x3(real[:, :, :, ::1] x, int stride):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], F = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t To = (T + stride - 1) // stride, Fo = (F + stride - 1) // stride
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, To, Fo, 9 * C), dtype=dtype)
    cdef real[:, :, :, ::1] cols = out
    cdef Py_ssize_t b, c, t, f, ki, kj, ti, fj, base
    with nogil:
        for b in range(B):
            for t in range(To):
                for ki in range(3):
                    ti = t * stride + ki - 1
                    if ti < 0 or ti >= T:
                        continue
                    for f in range(Fo):
                        for kj in range(3):
                            fj = f * stride + kj - 1
                            if fj < 0 or fj >= F:
                                continue
                            base = (ki * 3 + kj) * C
                            for c in range(C):
                                cols[b, t, f, base + c] = x[b, ti, fj, c]
    return out


def col2im3x3(real[:, :, :, ::1] cols, shape, int stride):
    cdef Py_ssize_t B = shape[0], T = shape[1], F = shape[2], C = shape[3]
    cdef Py_ssize_t To = cols.shape[1], Fo = cols.shape[2]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, T, F, C), dtype=dtype)
    cdef real[:, :, :, ::1] x = out
    cdef Py_ssize_t b, c, t, f, ki, kj, ti, fj, base
    with nogil:
        for b in range(B):
            for t in range(To):
                for ki in range(3):
                    ti = t * stride + ki - 1
                    if ti < 0 or ti >= T:
                        continue
                    for f in range(Fo):
                        for kj in range(3):
                            fj = f * stride + kj - 1
                            if fj < 0 or fj >= F:
                                continue
                            base = (ki * 3 + kj) * C
                            for c in range(C):
                                x[b, ti, fj, c] += cols[b, t, f, base + c]
    return out


def levinson_batch(r_in, int order):
    cdef double[:, ::1] r = np.ascontiguousarray(r_in, dtype=np.float64)
    cdef Py_ssize_t n = r.shape[0]
    a_out = np.zeros((n, order + 1))
    refl_out = np.zeros((n, order))
    err_out = np.zeros(n)
    tmp_arr = np.zeros(order + 1)
    cdef double[:, ::1] a = a_out
    cdef double[:, ::1] refl = refl_out
    cdef double[::1] err = err_out
    cdef double[::1] tmp = tmp_arr
    cdef Py_ssize_t row, i, j
    cdef double e, acc, k
    with nogil:
        for row in range(n):
            a[row, 0] = 1.0
            e = r[row, 0]
            if e <= 0.0:
                continue
            for i in range(1, order + 1):
                acc = r[row, i]
                for j in range(1, i):
                    acc = acc + a[row, j] * r[row, i - j]
                if e > 0.0:
                    k = -acc / e
                else:
                    k = 0.0
                for j in range(1, i):
                    tmp[j] = a[row, j] + k * a[row, i - j]
                for j in range(1, i):
                    a[row, j] = tmp[j]
                a[row, i] = k
                refl[row, i - 1] = k
                e = e * (1.0 - k * k)
            err[row] = e
    return a_out, err_out, refl_out


def edit_counts(ref, hyp):
    """``ref``/``hyp`` are int64 id arrays (see ``kernels.edit_counts``)."""
    cdef cnp.int64_t[::1] rv = np.ascontiguousarray(ref, dtype=np.int64)
    cdef cnp.int64_t[::1] hv = np.ascontiguousarray(hyp, dtype=np.int64)
    cdef Py_ssize_t n = rv.shape[0], m = hv.shape[0], i, j
    pc = np.zeros(m + 1, dtype=np.int64)
    ps = np.zeros(m + 1, dtype=np.int64)
    cc = np.zeros(m + 1, dtype=np.int64)
    cs = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] prev_c = pc, prev_s = ps, cur_c = cc, cur_s = cs, sw
    cdef cnp.int64_t bc, bs, xc, xs
    for j in range(m + 1):
        prev_c[j] = j
        prev_s[j] = 0
    for i in range(1, n + 1):
        cur_c[0] = i
        cur_s[0] = 0
        for j in range(1, m + 1):
            if rv[i - 1] == hv[j - 1]:
                bc = prev_c[j - 1]
                bs = prev_s[j - 1]
            else:
                bc = prev_c[j - 1] + 1
                bs = prev_s[j - 1] - 1
            xc = cur_c[j - 1] + 1
            xs = cur_s[j - 1]
            if xc < bc or (xc == bc and xs < bs):
                bc = xc
                bs = xs
            xc = prev_c[j] + 1
            xs = prev_s[j]
            if xc < bc or (xc == bc and xs < bs):
                bc = xc
                bs = xs
            cur_c[j] = bc
            cur_s[j] = bs
        sw = prev_c; prev_c = cur_c; cur_c = sw
        sw = prev_s; prev_s = cur_s; cur_s = sw
    cdef cnp.int64_t cost = prev_c[m], subs = -prev_s[m]
    cdef cnp.int64_t rest = cost - subs
    cdef cnp.int64_t dels = (rest + n - m) // 2
    return int(subs), int(dels), int(rest - dels)
