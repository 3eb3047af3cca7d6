"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``PROTOPROMPT_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKENDS = {"python": _kernels_py}

try:
    from . import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None
else:
    BACKENDS["compiled"] = _kernels_c

if _kernels_c is not None and os.environ.get("PROTOPROMPT_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "compiled"
else:
    BACKEND = "python"

_impl = BACKENDS[BACKEND]

NARROW = 32


def set_backend(name):
    """Switch the active backend; returns the previous name."""
    global BACKEND, _impl
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}")
    prev, BACKEND, _impl = BACKEND, name, BACKENDS[name]
    return prev


def batched_matmul(a, b):
    """Batched ``a @ b`` for 3-D arrays whose batch extents match or equal 1."""
    dtype = np.result_type(a, b)
    a = np.ascontiguousarray(a, dtype=dtype)
    b = np.ascontiguousarray(b, dtype=dtype)
    nb, m, n = max(a.shape[0], b.shape[0]), a.shape[1], b.shape[2]
    if BACKEND == "compiled" and n < NARROW and m > n and a.shape[2] <= NARROW:
        # narrow outputs vectorise poorly; (a @ b)^T = b^T @ a^T keeps the
        # contiguous inner loop long and the per-element k order unchanged
        at = np.ascontiguousarray(a.transpose(0, 2, 1))
        bt = np.ascontiguousarray(b.transpose(0, 2, 1))
        out_t = np.empty((nb, n, m), dtype=dtype)
        _impl.matmul(bt, at, out_t)
        return np.ascontiguousarray(out_t.transpose(0, 2, 1))
    out = np.empty((nb, m, n), dtype=dtype)
    _impl.matmul(a, b, out)
    return out


def matmul_tn(a, g):
    """``a.T @ g`` for 2-D ``a`` (P, K) and ``g`` (P, N)."""
    dtype = np.result_type(a, g)
    a = np.ascontiguousarray(a, dtype=dtype)
    g = np.ascontiguousarray(g, dtype=dtype)
    out = np.empty((a.shape[1], g.shape[1]), dtype=dtype)
    _impl.matmul_tn(a, g, out)
    return out


def bilinear_coords(size_in, factor, dtype):
    """Half-pixel-centre source coordinates for upsampling one axis by ``factor``."""
    src = (np.arange(size_in * factor, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, size_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, size_in - 1)
    return lo, hi, (src - lo).astype(dtype)


def upsample_bilinear(x, factor):
    """(N, h, w, c) -> (N, h*factor, w*factor, c)."""
    x = np.ascontiguousarray(x)
    n, h, w, c = x.shape
    y0, y1, wy = bilinear_coords(h, factor, x.dtype)
    x0, x1, wx = bilinear_coords(w, factor, x.dtype)
    out = np.empty((n, h * factor, w * factor, c), dtype=x.dtype)
    _impl.upsample_bilinear(x, y0, y1, wy, x0, x1, wx, out)
    return out


def upsample_bilinear_adjoint(g, factor):
    """Transpose of :func:`upsample_bilinear` applied to ``g``."""
    g = np.ascontiguousarray(g)
    n, hh, ww, c = g.shape
    h, w = hh // factor, ww // factor
    y0, y1, wy = bilinear_coords(h, factor, g.dtype)
    x0, x1, wx = bilinear_coords(w, factor, g.dtype)
    out = np.zeros((n, h, w, c), dtype=g.dtype)
    _impl.upsample_bilinear_adjoint(g, y0, y1, wy, x0, x1, wx, out)
    return out
