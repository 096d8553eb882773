"""Compiled row kernels shared by every matmul and every dispatch strategy.

Each output element is accumulated as ``((0 + a0*b0) + a1*b1) + ...`` with k
ascending and no FMA contraction (numba does not enable fast-math unless asked),
so the value of ``out[i, j]`` depends only on row ``i`` of the left operand and
column ``j`` of the right one.  Row grouping, blocking and thread count never
change the bits.
"""

import math

import numpy as np
from numba import njit, prange

MR = 16
NR = 64
KC = 128
NC = 512
PAR_CHUNK = 128
MLP_CHUNK = 64


@njit(nogil=True, cache=True, boundscheck=False)
def mm_rows(a, a_rows, b, out, out_rows):
    """out[out_rows[r], :] = a[a_rows[r], :] @ b for every r.

    k-blocks are visited in ascending order and the running sum is parked in
    ``out`` between them, so blocking does not alter the summation sequence.
    """
    m = a_rows.shape[0]
    K = b.shape[0]
    N = b.shape[1]
    acc = np.zeros((MR, NR), dtype=out.dtype)
    for k0 in range(0, K, KC):
        k1 = min(k0 + KC, K)
        for j0 in range(0, N, NC):
            j1 = min(j0 + NC, N)
            for r0 in range(0, m, MR):
                rn = min(MR, m - r0)
                for jj in range(j0, j1, NR):
                    jn = min(NR, j1 - jj)
                    if k0 == 0:
                        for r in range(MR):
                            for j in range(NR):
                                acc[r, j] = 0.0
                    else:
                        for r in range(rn):
                            orow = out_rows[r0 + r]
                            for j in range(jn):
                                acc[r, j] = out[orow, jj + j]
                    if jn == NR:
                        # full-width tile, unrolled over rows so LLVM keeps the
                        # a-values in registers and vectorises along j.  A short
                        # tail repeats its last row; the spare rows are never stored.
                        last = rn - 1
                        i0 = a_rows[r0]
                        i1 = a_rows[r0 + min(1, last)]
                        i2 = a_rows[r0 + min(2, last)]
                        i3 = a_rows[r0 + min(3, last)]
                        i4 = a_rows[r0 + min(4, last)]
                        i5 = a_rows[r0 + min(5, last)]
                        i6 = a_rows[r0 + min(6, last)]
                        i7 = a_rows[r0 + min(7, last)]
                        i8 = a_rows[r0 + min(8, last)]
                        i9 = a_rows[r0 + min(9, last)]
                        i10 = a_rows[r0 + min(10, last)]
                        i11 = a_rows[r0 + min(11, last)]
                        i12 = a_rows[r0 + min(12, last)]
                        i13 = a_rows[r0 + min(13, last)]
                        i14 = a_rows[r0 + min(14, last)]
                        i15 = a_rows[r0 + min(15, last)]
                        for k in range(k0, k1):
                            a0 = a[i0, k]
                            a1 = a[i1, k]
                            a2 = a[i2, k]
                            a3 = a[i3, k]
                            a4 = a[i4, k]
                            a5 = a[i5, k]
                            a6 = a[i6, k]
                            a7 = a[i7, k]
                            a8 = a[i8, k]
                            a9 = a[i9, k]
                            a10 = a[i10, k]
                            a11 = a[i11, k]
                            a12 = a[i12, k]
                            a13 = a[i13, k]
                            a14 = a[i14, k]
                            a15 = a[i15, k]
                            for j in range(NR):
                                bv = b[k, jj + j]
                                acc[0, j] += a0 * bv
                                acc[1, j] += a1 * bv
                                acc[2, j] += a2 * bv
                                acc[3, j] += a3 * bv
                                acc[4, j] += a4 * bv
                                acc[5, j] += a5 * bv
                                acc[6, j] += a6 * bv
                                acc[7, j] += a7 * bv
                                acc[8, j] += a8 * bv
                                acc[9, j] += a9 * bv
                                acc[10, j] += a10 * bv
                                acc[11, j] += a11 * bv
                                acc[12, j] += a12 * bv
                                acc[13, j] += a13 * bv
                                acc[14, j] += a14 * bv
                                acc[15, j] += a15 * bv
                    else:
                        for k in range(k0, k1):
                            for r in range(rn):
                                av = a[a_rows[r0 + r], k]
                                for j in range(jn):
                                    acc[r, j] += av * b[k, jj + j]
                    for r in range(rn):
                        orow = out_rows[r0 + r]
                        for j in range(jn):
                            out[orow, jj + j] = acc[r, j]


@njit(parallel=True, cache=True, boundscheck=False)
def mm_dense(a, b, out):
    """Row-parallel dense product over all rows of ``a``."""
    m = a.shape[0]
    n_chunks = (m + PAR_CHUNK - 1) // PAR_CHUNK
    for c in prange(n_chunks):
        s = c * PAR_CHUNK
        e = min(s + PAR_CHUNK, m)
        rows = np.arange(s, e)
        mm_rows(a, rows, b, out, rows)


@njit(nogil=True, cache=True, boundscheck=False)
def mlp_rows(x, rows, wg, wu, wd, out):
    """Gated SiLU MLP ``down(silu(x@wg) * (x@wu))`` on the listed rows."""
    m = rows.shape[0]
    H = wg.shape[1]
    g = np.empty((MLP_CHUNK, H), dtype=out.dtype)
    u = np.empty((MLP_CHUNK, H), dtype=out.dtype)
    local = np.arange(MLP_CHUNK)
    for s in range(0, m, MLP_CHUNK):
        e = min(s + MLP_CHUNK, m)
        sub = rows[s:e]
        loc = local[: e - s]
        mm_rows(x, sub, wg, g, loc)
        mm_rows(x, sub, wu, u, loc)
        for i in range(e - s):
            for j in range(H):
                gv = g[i, j]
                g[i, j] = gv / (1.0 + math.exp(-gv)) * u[i, j]
        mm_rows(g, loc, wd, out, sub)


@njit(parallel=True, cache=True, boundscheck=False)
def mlp_dense(x, wg, wu, wd, out):
    m = x.shape[0]
    n_chunks = (m + MLP_CHUNK - 1) // MLP_CHUNK
    for c in prange(n_chunks):
        s = c * MLP_CHUNK
        e = min(s + MLP_CHUNK, m)
        mlp_rows(x, np.arange(s, e), wg, wu, wd, out)


@njit(parallel=True, cache=True, boundscheck=False)
def fused_linear(x, row_order, starts, split, ends, has_v, has_t, wv, wt, out, worked):
    """One task per (block, expert); task 2b is visual, 2b+1 textual.

    A task whose modality is absent from its block returns at once.
    """
    n_tasks = 2 * starts.shape[0]
    for t in prange(n_tasks):
        b = t // 2
        visual = t % 2 == 0
        present = has_v[b] if visual else has_t[b]
        if not present:
            worked[t] = 0
        else:
            worked[t] = 1
            if visual:
                rows = row_order[starts[b]:split[b]]
                mm_rows(x, rows, wv, out, rows)
            else:
                rows = row_order[split[b]:ends[b]]
                mm_rows(x, rows, wt, out, rows)


@njit(parallel=True, cache=True, boundscheck=False)
def fused_mlp(x, row_order, starts, split, ends, has_v, has_t,
              gv, uv, dv, gt, ut, dt, out, worked):
    n_tasks = 2 * starts.shape[0]
    for t in prange(n_tasks):
        b = t // 2
        visual = t % 2 == 0
        present = has_v[b] if visual else has_t[b]
        if not present:
            worked[t] = 0
        else:
            worked[t] = 1
            if visual:
                rows = row_order[starts[b]:split[b]]
                mlp_rows(x, rows, gv, uv, dv, out)
            else:
                rows = row_order[split[b]:ends[b]]
                mlp_rows(x, rows, gt, ut, dt, out)
