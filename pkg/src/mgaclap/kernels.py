"""Vectorized numpy kernels behind the differentiable ops in ``numerics``.

Kernels keep float32 inputs in float32; anything else is computed in float64.
"""

import numpy as np

_GELU_K = 0.7978845608028654  # sqrt(2 / pi)
_GELU_C = 0.044715


def _float(x):
    x = np.asarray(x)
    return x if x.dtype in (np.float32, np.float64) else x.astype(np.float64)


def sparsemax_rows(x):
    """Project every row of a 2-D array onto the probability simplex.

    Sort-then-threshold: with ``z`` the row sorted descending, the support size
    is the largest ``k`` with ``1 + k z_k > sum_{j<=k} z_j`` and the threshold is
    ``(sum_{j<=k} z_j - 1) / k``.
    """
    x = _float(x)
    x64 = x.astype(np.float64)
    n = x.shape[1]
    z = -np.sort(-x64, axis=1)
    cssv = np.cumsum(z, axis=1) - 1.0
    ks = np.arange(1, n + 1, dtype=np.float64)
    cond = z - cssv / ks > 0
    k = n - np.argmax(cond[:, ::-1], axis=1)
    rows = np.arange(x.shape[0])
    tau = cssv[rows, k - 1] / k
    return np.maximum(x64 - tau[:, None], 0.0).astype(x.dtype, copy=False)


def sparsemax_vjp_rows(w, g):
    """Cotangent through sparsemax given its output ``w`` (support = w > 0)."""
    g = _float(g)
    supp = np.asarray(w) > 0
    count = supp.sum(axis=1, keepdims=True)
    mean = np.where(supp, g, 0.0).sum(axis=1, keepdims=True, dtype=np.float64) / count
    return np.where(supp, g - mean, 0.0).astype(g.dtype, copy=False)


def max_over_frames(s):
    """Max and first argmax over axis 1 of a (B, T, M) array."""
    s = _float(s)
    idx = np.argmax(s, axis=1)
    val = np.take_along_axis(s, idx[:, None, :], axis=1)[:, 0, :]
    return val, idx


def gelu_fwd(x):
    """tanh-form GELU. Returns (y, t) with t the tanh term, reused by the VJP."""
    x = _float(x)
    k, c = x.dtype.type(_GELU_K), x.dtype.type(_GELU_C)
    t = np.tanh(k * (x + c * x * x * x))
    return x.dtype.type(0.5) * x * (1 + t), t


def gelu_bwd(x, t, g):
    x = _float(x)
    k, c = x.dtype.type(_GELU_K), x.dtype.type(_GELU_C)
    half = x.dtype.type(0.5)
    return g * (half * (1 + t) + half * x * (1 - t * t) * (k * (1 + 3 * c * x * x)))
