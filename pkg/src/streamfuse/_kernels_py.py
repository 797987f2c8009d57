"""Pure numpy/Python versions of the loop-bound kernels.

Used when the compiled ``_kernels`` extension is unavailable (or when
``STREAMFUSE_PURE=1``). Signatures and results match the Cython module.
"""
import numpy as np


def out_size(n, stride):
    return (n + stride - 1) // stride


def im2col3x3(x, stride):
    """Channels-last patches for a 3x3 kernel with padding 1.

    [B, T, F, C] -> [B, T', F', 9*C], patch order (ki, kj, c).
    """
    B, T, F, C = x.shape
    To, Fo = out_size(T, stride), out_size(F, stride)
    xp = np.zeros((B, T + 2, F + 2, C), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((B, To, Fo, 9, C), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, ki * 3 + kj] = xp[:, ki:ki + stride * To:stride, kj:kj + stride * Fo:stride]
    return cols.reshape(B, To, Fo, 9 * C)


def col2im3x3(cols, shape, stride):
    """Adjoint of :func:`im2col3x3`: scatter-add patches back to [B, T, F, C]."""
    B, T, F, C = shape
    To, Fo = cols.shape[1], cols.shape[2]
    c5 = cols.reshape(B, To, Fo, 9, C)
    xp = np.zeros((B, T + 2, F + 2, C), dtype=cols.dtype)
    for ki in range(3):
        for kj in range(3):
            xp[:, ki:ki + stride * To:stride, kj:kj + stride * Fo:stride] += c5[:, :, :, ki * 3 + kj]
    return xp[:, 1:-1, 1:-1].copy()


def levinson_batch(r, order):
    """Levinson-Durbin recursion for every row of an autocorrelation matrix.

    Returns ``(a, err, refl)`` with ``a[:, 0] == 1``. Rows with zero energy
    come back as ``a = [1, 0, ...]``, ``err = 0``.
    """
    r = np.asarray(r, dtype=np.float64)
    n = r.shape[0]
    a = np.zeros((n, order + 1))
    a[:, 0] = 1.0
    refl = np.zeros((n, order))
    err = r[:, 0].copy()
    live = err > 0.0
    for i in range(1, order + 1):
        acc = r[:, i].copy()
        for j in range(1, i):
            acc += a[:, j] * r[:, i - j]
        k = np.zeros(n)
        np.divide(-acc, err, out=k, where=live)
        prev = a[:, 1:i].copy()
        a[:, 1:i] = prev + k[:, None] * prev[:, ::-1]
        a[:, i] = k
        refl[:, i - 1] = k
        err = err * (1.0 - k * k)
        live = live & (err > 0.0)
    err = np.where(r[:, 0] > 0.0, err, 0.0)
    return a, err, refl


def edit_counts(ref, hyp):
    """Levenshtein alignment counts ``(S, D, I)``.

    Minimises total edits; among minimal alignments the one with the most
    substitutions wins (hence fewest insertions and deletions).
    """
    n, m = len(ref), len(hyp)
    # cell = (cost, -subs); lexicographic min
    prev = [(j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0)] + [None] * m
        ri = ref[i - 1]
        for j in range(1, m + 1):
            dc, ds = prev[j - 1]
            if ri == hyp[j - 1]:
                best = (dc, ds)
            else:
                best = (dc + 1, ds - 1)
            ic, is_ = cur[j - 1]
            cand = (ic + 1, is_)
            if cand < best:
                best = cand
            uc, us = prev[j]
            cand = (uc + 1, us)
            if cand < best:
                best = cand
            cur[j] = best
        prev = cur
    cost, nsub = prev[m]
    subs = -nsub
    rest = cost - subs
    dels = (rest + n - m) // 2
    ins = rest - dels
    return subs, dels, ins
