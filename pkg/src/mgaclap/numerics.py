"""Dense differentiable primitives with hand-written vector-Jacobian products.

Tensors are plain ``numpy.ndarray`` objects, float64 unless the caller hands
in float32 (training may run in single precision). Every primitive comes
as a forward function plus a ``*_vjp`` that maps an output cotangent back to
input cotangents. Row-wise ops act on the last axis and accept any leading
batch dimensions.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import DegenerateInputError, DimensionError, NonFiniteError

NORM_EPS = 1e-12


def check_finite(*arrays, where="op"):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite value at entry of {where}")


def as_tensor(x, where="op"):
    a = np.asarray(x)
    if a.dtype != np.float32:
        a = a.astype(np.float64, copy=False)
    check_finite(a, where=where)
    return a


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a = as_tensor(a, "matmul")
    b = as_tensor(b, "matmul")
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_vjp(a, b, g):
    """Returns (da, db). Leading dims of ``a`` are summed out of ``db``."""
    da = g @ b.T
    a2 = a.reshape(-1, a.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    return da, a2.T @ g2


def add(a, b):
    return as_tensor(a, "add") + as_tensor(b, "add")


def add_vjp(a, b, g):
    return _unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))


def scale(x, c):
    return as_tensor(x, "scale") * float(c)


def scale_vjp(x, c, g):
    return g * float(c)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def embed_lookup(table, ids):
    table = as_tensor(table, "embed_lookup")
    return table[np.asarray(ids, dtype=np.int64)]


def embed_lookup_vjp(table, ids, g):
    out = np.zeros_like(table)
    np.add.at(out, np.asarray(ids, dtype=np.int64).reshape(-1), g.reshape(-1, table.shape[1]))
    return out


# ---------------------------------------------------------------------------
# normalizers


def softmax(x, scale=1.0):
    x = as_tensor(x, "softmax")
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    if scale <= 0:
        raise ValueError("softmax scale must be positive")
    z = x * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(y, g, scale=1.0):
    """Cotangent w.r.t. the softmax input, given the softmax output ``y``."""
    return scale * y * (g - (g * y).sum(axis=-1, keepdims=True))


def sparsemax(x):
    """Euclidean projection onto the probability simplex along the last axis."""
    x = as_tensor(x, "sparsemax")
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("sparsemax of an empty vector")
    flat = x.reshape(-1, x.shape[-1])
    return kernels.sparsemax_rows(flat).reshape(x.shape)


def sparsemax_threshold(x):
    """Threshold ``t`` with sparsemax(x) = max(x - t, 0), per row."""
    x = np.asarray(x, dtype=np.float64)
    w = sparsemax(x)
    supp = w > 0
    return ((np.where(supp, x, 0.0).sum(-1) - 1.0) / supp.sum(-1))


def sparsemax_vjp(x, g, out=None):
    """g_i - mean_{j in S} g_j on the support S of sparsemax(x), else 0.

    Pass ``out`` (the forward result) to skip recomputing the projection.
    """
    w = sparsemax(x) if out is None else out
    shape = w.shape
    res = kernels.sparsemax_vjp_rows(
        w.reshape(-1, shape[-1]), np.asarray(g, dtype=np.float64).reshape(-1, shape[-1])
    )
    return res.reshape(shape)


def max_over_rows(x):
    """(max value, lowest index attaining it) of a T or T x 1 column."""
    x = as_tensor(x, "max_over_rows").reshape(-1)
    if x.size == 0:
        raise DimensionError("max over an empty column")
    idx = int(np.argmax(x))
    return float(x[idx]), idx


def max_over_rows_vjp(x, g):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    out.reshape(-1)[int(np.argmax(x.reshape(-1)))] = g
    return out


def layernorm(x, gain, bias, eps=1e-5):
    """Standardize along the last axis then apply ``gain``/``bias``.

    Returns (y, cache); the cache feeds :func:`layernorm_vjp`.
    """
    x = as_tensor(x, "layernorm")
    if x.shape[-1] < 2:
        raise DimensionError("layernorm needs at least two features")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd, gain)


def layernorm_vjp(cache, g):
    """Returns (dx, dgain, dbias)."""
    xhat, rstd, gain = cache
    n = xhat.shape[-1]
    lead = tuple(range(g.ndim - 1))
    dgain = (g * xhat).sum(axis=lead)
    dbias = g.sum(axis=lead)
    gh = g * gain
    dx = rstd / n * (n * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
    return dx, dgain, dbias


def gelu(x, with_cache=False):
    """tanh-form GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).

    With ``with_cache`` returns (y, t); pass ``t`` to :func:`gelu_vjp`.
    """
    x = as_tensor(x, "gelu")
    y, t = kernels.gelu_fwd(x)
    return (y, t) if with_cache else y


def gelu_vjp(x, g, t=None):
    if t is None:
        t = kernels.gelu_fwd(x)[1]
    return kernels.gelu_bwd(x, t, g)


def l2_normalize(x):
    x = as_tensor(x, "l2_normalize")
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n < NORM_EPS):
        raise DegenerateInputError("l2_normalize of a (near) zero vector")
    return x / n


def l2_normalize_vjp(x, g, out=None):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    y = x / n if out is None else out
    return (g - y * (g * y).sum(-1, keepdims=True)) / n


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class DualOp:
    """Forward map paired with its VJP.

    ``forward(*inputs) -> array`` and ``vjp(inputs, cotangent) -> tuple`` of
    input cotangents. ``boundary_margin(*inputs)``, when given, returns the
    distance to the nearest nondifferentiable point.
    """

    name: str
    forward: Callable
    vjp: Callable
    boundary_margin: Optional[Callable] = None
    differentiable: Sequence[int] = field(default_factory=tuple)


@dataclass
class GradCheckResult:
    max_rel_error: float
    skipped: bool = False
    margin: float = float("inf")


BOUNDARY_RADIUS = 1e-4


def grad_check(op, inputs, step=1e-5, rng=None, radius=BOUNDARY_RADIUS):
    """Compare ``op.vjp`` against central differences of ``<forward, c>``.

    A random cotangent ``c`` scalarizes the output. The error for each input is
    ``max|vjp - fd| / max(max|vjp|, max|fd|)``; the worst over all
    differentiable inputs is returned. Points within ``radius`` of a
    nondifferentiable boundary are reported as skipped.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    if op.boundary_margin is not None:
        margin = float(op.boundary_margin(*inputs))
        if margin < radius:
            return GradCheckResult(float("nan"), skipped=True, margin=margin)
    else:
        margin = float("inf")
    out = np.asarray(op.forward(*inputs), dtype=np.float64)
    cot = rng.standard_normal(out.shape)
    grads = op.vjp(inputs, cot)
    which = op.differentiable or tuple(range(len(inputs)))
    worst = 0.0
    for i in which:
        x = inputs[i]
        fd = np.zeros_like(x)
        flat = x.reshape(-1)
        fdf = fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(np.sum(np.asarray(op.forward(*inputs)) * cot))
            flat[j] = orig - step
            fm = float(np.sum(np.asarray(op.forward(*inputs)) * cot))
            flat[j] = orig
            fdf[j] = (fp - fm) / (2 * step)
        an = np.asarray(grads[i], dtype=np.float64).reshape(fd.shape)
        denom = max(np.abs(an).max(), np.abs(fd).max(), 1e-300)
        worst = max(worst, float(np.abs(an - fd).max() / denom))
    return GradCheckResult(worst, margin=margin)


def sparsemax_margin(x):
    """Distance of every coordinate from the support threshold, minimized."""
    x = np.asarray(x, dtype=np.float64)
    t = sparsemax_threshold(x)
    return float(np.abs(x - np.expand_dims(t, -1)).min())


def max_margin(x, axis=0):
    """Gap between the top two values along ``axis`` (inf for a single row)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] < 2:
        return float("inf")
    part = -np.sort(-x, axis=axis)
    return float((np.take(part, 0, axis=axis) - np.take(part, 1, axis=axis)).min())


def primitive_ops():
    """DualOp wrappers for every primitive, keyed by name, with input samplers.

    Each entry is (DualOp, sampler(rng) -> list of inputs, linear: bool).
    """
    ops = {}

    ops["matmul"] = (
        DualOp("matmul", matmul, lambda xs, g: matmul_vjp(xs[0], xs[1], g)),
        lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))],
        False,
    )
    ops["add"] = (
        DualOp("add", add, lambda xs, g: add_vjp(xs[0], xs[1], g)),
        lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)],
        True,
    )
    ops["scale"] = (
        DualOp("scale", lambda x: scale(x, 2.5), lambda xs, g: (scale_vjp(xs[0], 2.5, g),)),
        lambda r: [r.standard_normal(5)],
        True,
    )
    ids = np.array([2, 0, 2, 4])
    ops["embed_lookup"] = (
        DualOp("embed_lookup", lambda t: embed_lookup(t, ids), lambda xs, g: (embed_lookup_vjp(xs[0], ids, g),)),
        lambda r: [r.standard_normal((5, 3))],
        True,
    )
    ops["softmax"] = (
        DualOp("softmax", lambda x: softmax(x, 1.7), lambda xs, g: (softmax_vjp(softmax(xs[0], 1.7), g, 1.7),)),
        lambda r: [r.standard_normal(6)],
        False,
    )
    ops["sparsemax"] = (
        DualOp(
            "sparsemax",
            sparsemax,
            lambda xs, g: (sparsemax_vjp(xs[0], g),),
            boundary_margin=sparsemax_margin,
        ),
        lambda r: [r.standard_normal(6) * 0.5],
        False,
    )
    ops["max_over_rows"] = (
        DualOp(
            "max_over_rows",
            lambda x: np.array(max_over_rows(x)[0]),
            lambda xs, g: (max_over_rows_vjp(xs[0], float(g)),),
            boundary_margin=max_margin,
        ),
        lambda r: [r.standard_normal((7, 1))],
        False,
    )
    ops["layernorm"] = (
        DualOp(
            "layernorm",
            lambda x, gn, b: layernorm(x, gn, b)[0],
            lambda xs, g: layernorm_vjp(layernorm(*xs)[1], g),
        ),
        lambda r: [r.standard_normal((2, 5)), 1.0 + 0.3 * r.standard_normal(5), r.standard_normal(5)],
        False,
    )
    ops["gelu"] = (
        DualOp("gelu", gelu, lambda xs, g: (gelu_vjp(xs[0], g),)),
        lambda r: [r.standard_normal(8)],
        False,
    )
    ops["l2_normalize"] = (
        DualOp("l2_normalize", l2_normalize, lambda xs, g: (l2_normalize_vjp(xs[0], g),)),
        lambda r: [r.standard_normal((3, 4))],
        False,
    )
    return ops
