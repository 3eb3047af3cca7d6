"""Pure-numpy implementations of the compiled kernels (same signatures)."""

import numpy as np


def matmul(a, b, out):
    np.matmul(a, b, out=out)


def matmul_tn(a, g, out):
    np.matmul(a.T, g, out=out)


def _interp_matrix(lo, hi, weight, size_in, dtype):
    mat = np.zeros((len(lo), size_in), dtype=dtype)
    rows = np.arange(len(lo))
    np.add.at(mat, (rows, lo), 1 - weight)
    np.add.at(mat, (rows, hi), weight)
    return mat


def _apply_separable(x, ay, ax):
    # rows then columns, each as one matmul
    n, h, w, c = x.shape
    rows = np.matmul(ay, x.reshape(n, h, w * c))  # (n, H', w*c)
    hh = rows.shape[1]
    return np.matmul(ax, rows.reshape(n * hh, w, c)).reshape(n, hh, ax.shape[0], c)


def upsample_bilinear(x, y0, y1, wy, x0, x1, wx, out):
    ay = _interp_matrix(y0, y1, wy, x.shape[1], x.dtype)
    ax = _interp_matrix(x0, x1, wx, x.shape[2], x.dtype)
    out[...] = _apply_separable(x, ay, ax)


def upsample_bilinear_adjoint(g, y0, y1, wy, x0, x1, wx, out):
    ay = _interp_matrix(y0, y1, wy, out.shape[1], g.dtype)
    ax = _interp_matrix(x0, x1, wx, out.shape[2], g.dtype)
    out += _apply_separable(g, ay.T.copy(), ax.T.copy())
