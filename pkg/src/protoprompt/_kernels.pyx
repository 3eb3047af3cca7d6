# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Loop order fixes the accumulation order of every output element."""

from cython cimport floating


DEF COL_BLOCK = 512


def matmul(const floating[:, :, ::1] a, const floating[:, :, ::1] b, floating[:, :, ::1] out):
    """out[s] = a[s] @ b[s]; a or b may carry a batch extent of 1 (broadcast).

    Columns are processed in blocks that stay in L1 and rows four at a time so
    each loaded row of ``b`` feeds four outputs. Every output element still
    accumulates over k in ascending order.
    """
    cdef Py_ssize_t nb = out.shape[0], m = a.shape[1], kk = a.shape[2], n = b.shape[2]
    cdef Py_ssize_t s, i, k, j, j0, j1, r
    cdef floating a0, a1, a2, a3
    cdef const floating* amat
    cdef const floating* bmat
    cdef const floating* brow
    cdef floating* o0
    cdef floating* o1
    cdef floating* o2
    cdef floating* o3
    cdef bint a_bcast = a.shape[0] == 1
    cdef bint b_bcast = b.shape[0] == 1
    if nb == 0 or m == 0 or n == 0:
        return
    with nogil:
        for s in range(nb):
            for i in range(m):
                for j in range(n):
                    out[s, i, j] = 0
            if kk == 0:
                continue
            amat = &a[0 if a_bcast else s, 0, 0]
            bmat = &b[0 if b_bcast else s, 0, 0]
            for j0 in range(0, n, COL_BLOCK):
                j1 = min(j0 + COL_BLOCK, n)
                i = 0
                while i + 4 <= m:
                    o0 = &out[s, i, 0]
                    o1 = o0 + n
                    o2 = o1 + n
                    o3 = o2 + n
                    for k in range(kk):
                        a0 = amat[i * kk + k]
                        a1 = amat[(i + 1) * kk + k]
                        a2 = amat[(i + 2) * kk + k]
                        a3 = amat[(i + 3) * kk + k]
                        brow = bmat + k * n
                        for j in range(j0, j1):
                            o0[j] += a0 * brow[j]
                            o1[j] += a1 * brow[j]
                            o2[j] += a2 * brow[j]
                            o3[j] += a3 * brow[j]
                    i += 4
                for r in range(i, m):
                    o0 = &out[s, r, 0]
                    for k in range(kk):
                        a0 = amat[r * kk + k]
                        brow = bmat + k * n
                        for j in range(j0, j1):
                            o0[j] += a0 * brow[j]


def matmul_tn(const floating[:, ::1] a, const floating[:, ::1] g, floating[:, ::1] out):
    """out = a.T @ g without materialising the transpose; sums over rows of ``a`` in order."""
    cdef Py_ssize_t rows = a.shape[0], kk = a.shape[1], n = g.shape[1]
    cdef Py_ssize_t p, k, j
    cdef floating apk
    cdef const floating* grow
    cdef floating* orow
    for k in range(kk):
        for j in range(n):
            out[k, j] = 0
    if rows == 0 or kk == 0 or n == 0:
        return
    with nogil:
        for p in range(rows):
            grow = &g[p, 0]
            for k in range(kk):
                apk = a[p, k]
                orow = &out[k, 0]
                for j in range(n):
                    orow[j] += apk * grow[j]


def upsample_bilinear(const floating[:, :, :, ::1] x,
                      const Py_ssize_t[::1] y0, const Py_ssize_t[::1] y1, const floating[::1] wy,
                      const Py_ssize_t[::1] x0, const Py_ssize_t[::1] x1, const floating[::1] wx,
                      floating[:, :, :, ::1] out):
    cdef Py_ssize_t nb = out.shape[0], hh = out.shape[1], ww = out.shape[2], nc = out.shape[3]
    cdef Py_ssize_t s, i, j, c
    cdef floating a00, a01, a10, a11
    with nogil:
        for s in range(nb):
            for i in range(hh):
                for j in range(ww):
                    a00 = (1 - wy[i]) * (1 - wx[j])
                    a01 = (1 - wy[i]) * wx[j]
                    a10 = wy[i] * (1 - wx[j])
                    a11 = wy[i] * wx[j]
                    for c in range(nc):
                        out[s, i, j, c] = (a00 * x[s, y0[i], x0[j], c] + a01 * x[s, y0[i], x1[j], c]
                                           + a10 * x[s, y1[i], x0[j], c] + a11 * x[s, y1[i], x1[j], c])


def upsample_bilinear_adjoint(const floating[:, :, :, ::1] g,
                              const Py_ssize_t[::1] y0, const Py_ssize_t[::1] y1, const floating[::1] wy,
                              const Py_ssize_t[::1] x0, const Py_ssize_t[::1] x1, const floating[::1] wx,
                              floating[:, :, :, ::1] out):
    """Scatter ``g`` back through the interpolation; ``out`` must arrive zeroed."""
    cdef Py_ssize_t nb = g.shape[0], hh = g.shape[1], ww = g.shape[2], nc = g.shape[3]
    cdef Py_ssize_t s, i, j, c
    cdef floating a00, a01, a10, a11, v
    with nogil:
        for s in range(nb):
            for i in range(hh):
                for j in range(ww):
                    a00 = (1 - wy[i]) * (1 - wx[j])
                    a01 = (1 - wy[i]) * wx[j]
                    a10 = wy[i] * (1 - wx[j])
                    a11 = wy[i] * wx[j]
                    for c in range(nc):
                        v = g[s, i, j, c]
                        out[s, y0[i], x0[j], c] += a00 * v
                        out[s, y0[i], x1[j], c] += a01 * v
                        out[s, y1[i], x0[j], c] += a10 * v
                        out[s, y1[i], x1[j], c] += a11 * v
