"""Toy transformer encoders for frames and tokens.

Parameters live in a flat ``{name: ndarray}`` map so the optimizer and the
checkpoint writer can treat them uniformly. Block parameter names are
``<prefix>.block<i>.<field>``.

Block wiring is pre-norm::

    h1 = u + mix(LN1(u))          mix = softmax(q k^T / sqrt(d)) v   (vanilla)
    h2 = h1 + FFN(LN2(h1))        mix = v                             (locality)

There is no output projection after the mixing step and a single head.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DimensionError, LengthError, VocabularyError

BLOCK_FIELDS = ("wq", "wk", "wv", "ln1.g", "ln1.b", "ln2.g", "ln2.b", "ff1.w", "ff1.b", "ff2.w", "ff2.b")
PROJ_FIELDS = ("proj.w1", "proj.b1", "proj.w2", "proj.b2")


@dataclass(frozen=True)
class EncoderShape:
    n_blocks: int
    d: int = 64
    D: int = 64
    max_len: int = 32
    n_in: int = 16  # F_in for audio, vocabulary size for text

    def __post_init__(self):
        if self.n_blocks < 1 or self.d <= 0 or self.D <= 0:
            raise DimensionError("encoder needs >= 1 block and positive widths")


def init_block(rng, prefix, d):
    s = 1.0 / np.sqrt(d)
    return {
        f"{prefix}.wq": rng.standard_normal((d, d)) * s,
        f"{prefix}.wk": rng.standard_normal((d, d)) * s,
        f"{prefix}.wv": rng.standard_normal((d, d)) * s,
        f"{prefix}.ln1.g": np.ones(d),
        f"{prefix}.ln1.b": np.zeros(d),
        f"{prefix}.ln2.g": np.ones(d),
        f"{prefix}.ln2.b": np.zeros(d),
        f"{prefix}.ff1.w": rng.standard_normal((d, 4 * d)) * s,
        f"{prefix}.ff1.b": np.zeros(4 * d),
        f"{prefix}.ff2.w": rng.standard_normal((4 * d, d)) * (0.5 / np.sqrt(4 * d)),
        f"{prefix}.ff2.b": np.zeros(d),
    }


def init_encoder(rng, prefix, shape, modality):
    """Random parameters for one encoder. ``modality`` is 'audio' or 'text'."""
    d, D = shape.d, shape.D
    p = {}
    if modality == "audio":
        p[f"{prefix}.in"] = rng.standard_normal((shape.n_in, d)) / np.sqrt(shape.n_in)
    elif modality == "text":
        p[f"{prefix}.embed"] = rng.standard_normal((shape.n_in, d))
    else:
        raise ValueError(f"unknown modality {modality!r}")
    p[f"{prefix}.pos"] = rng.standard_normal((shape.max_len, d)) * 0.1
    for i in range(shape.n_blocks):
        p.update(init_block(rng, f"{prefix}.block{i}", d))
    p[f"{prefix}.proj.w1"] = rng.standard_normal((d, d)) / np.sqrt(d)
    p[f"{prefix}.proj.b1"] = np.zeros(d)
    p[f"{prefix}.proj.w2"] = rng.standard_normal((d, D)) / np.sqrt(d)
    p[f"{prefix}.proj.b2"] = np.zeros(D)
    return p


def block_params(params, prefix):
    return {f: params[f"{prefix}.{f}"] for f in BLOCK_FIELDS}


# ---------------------------------------------------------------------------
# blocks


def block_forward(u, bp, locality=False):
    """One encoder block over ``u`` of shape (..., T, d). Returns (out, cache)."""
    u = nm.as_tensor(u, "block")
    d = bp["wv"].shape[0]
    if u.shape[-1] != d:
        raise DimensionError(f"block expects width {d}, got {u.shape[-1]}")
    a, ln1 = nm.layernorm(u, bp["ln1.g"], bp["ln1.b"])
    v = a @ bp["wv"]
    if locality:
        mixed, att, q, k = v, None, None, None
    else:
        q = a @ bp["wq"]
        k = a @ bp["wk"]
        att = nm.softmax(q @ np.swapaxes(k, -1, -2), d ** -0.5)
        mixed = att @ v
    h1 = u + mixed
    c, ln2 = nm.layernorm(h1, bp["ln2.g"], bp["ln2.b"])
    pre = c @ bp["ff1.w"] + bp["ff1.b"]
    f, ft = nm.gelu(pre, with_cache=True)
    out = h1 + f @ bp["ff2.w"] + bp["ff2.b"]
    cache = (locality, a, ln1, v, q, k, att, c, ln2, pre, f, ft)
    return out, cache


def block_backward(cache, g, bp):
    """Returns (du, grads) where ``grads`` is keyed by block field."""
    locality, a, ln1, v, q, k, att, c, ln2, pre, f, ft = cache
    d = bp["wv"].shape[0]
    grads = {}
    _, grads["ff2.w"] = nm.matmul_vjp(f, bp["ff2.w"], g)
    grads["ff2.b"] = g.reshape(-1, g.shape[-1]).sum(0)
    df = g @ bp["ff2.w"].T
    dpre = nm.gelu_vjp(pre, df, ft)
    _, grads["ff1.w"] = nm.matmul_vjp(c, bp["ff1.w"], dpre)
    grads["ff1.b"] = dpre.reshape(-1, dpre.shape[-1]).sum(0)
    dc = dpre @ bp["ff1.w"].T
    dh1_ln, grads["ln2.g"], grads["ln2.b"] = nm.layernorm_vjp(ln2, dc)
    dh1 = g + dh1_ln
    dmixed = dh1
    if locality:
        dv = dmixed
        grads["wq"] = np.zeros_like(bp["wq"])
        grads["wk"] = np.zeros_like(bp["wk"])
        da = np.zeros_like(a)
    else:
        dv = np.swapaxes(att, -1, -2) @ dmixed
        datt = dmixed @ np.swapaxes(v, -1, -2)
        dscores = nm.softmax_vjp(att, datt, d ** -0.5)
        dq = dscores @ k
        dk = np.swapaxes(dscores, -1, -2) @ q
        da_q, grads["wq"] = nm.matmul_vjp(a, bp["wq"], dq)
        da_k, grads["wk"] = nm.matmul_vjp(a, bp["wk"], dk)
        da = da_q + da_k
    da_v, grads["wv"] = nm.matmul_vjp(a, bp["wv"], dv)
    da = da + da_v
    du_ln, grads["ln1.g"], grads["ln1.b"] = nm.layernorm_vjp(ln1, da)
    return dh1 + du_ln, grads


def vanilla_block(u, bp):
    return block_forward(u, bp, locality=False)[0]


def locality_block(u, bp):
    return block_forward(u, bp, locality=True)[0]


# ---------------------------------------------------------------------------
# full encoders


def _projector_forward(h, params, prefix):
    pre = h @ params[f"{prefix}.proj.w1"] + params[f"{prefix}.proj.b1"]
    act, at = nm.gelu(pre, with_cache=True)
    y = act @ params[f"{prefix}.proj.w2"] + params[f"{prefix}.proj.b2"]
    out = nm.l2_normalize(y)
    return out, (h, pre, act, at, y, out)


def _projector_backward(cache, g, params, prefix):
    h, pre, act, at, y, out = cache
    grads = {}
    dy = nm.l2_normalize_vjp(y, g, out)
    dact, grads[f"{prefix}.proj.w2"] = nm.matmul_vjp(act, params[f"{prefix}.proj.w2"], dy)
    grads[f"{prefix}.proj.b2"] = dy.reshape(-1, dy.shape[-1]).sum(0)
    dpre = nm.gelu_vjp(pre, dact, at)
    dh, grads[f"{prefix}.proj.w1"] = nm.matmul_vjp(h, params[f"{prefix}.proj.w1"], dpre)
    grads[f"{prefix}.proj.b1"] = dpre.reshape(-1, dpre.shape[-1]).sum(0)
    return dh, grads


def _count_blocks(params, prefix):
    n = 0
    while f"{prefix}.block{n}.wv" in params:
        n += 1
    return n


def _stack_forward(h, params, prefix, locality_last):
    n = _count_blocks(params, prefix)
    caches = []
    for i in range(n):
        loc = locality_last and i == n - 1
        h, c = block_forward(h, block_params(params, f"{prefix}.block{i}"), locality=loc)
        caches.append(c)
    out, pc = _projector_forward(h, params, prefix)
    return out, (caches, pc)


def _stack_backward(cache, g, params, prefix):
    caches, pc = cache
    dh, grads = _projector_backward(pc, g, params, prefix)
    for i in reversed(range(len(caches))):
        bprefix = f"{prefix}.block{i}"
        dh, bg = block_backward(caches[i], dh, block_params(params, bprefix))
        for f_, v in bg.items():
            grads[f"{bprefix}.{f_}"] = v
    return dh, grads


def audio_forward(frames, params, locality_last, prefix="audio"):
    """Batched audio encoder over (B, T, F_in). Returns (features, cache)."""
    frames = nm.as_tensor(frames, "encode_audio")
    T = frames.shape[-2]
    pos = params[f"{prefix}.pos"]
    if T > pos.shape[0]:
        raise LengthError(f"clip has {T} frames, encoder supports at most {pos.shape[0]}")
    if frames.shape[-1] != params[f"{prefix}.in"].shape[0]:
        raise DimensionError("frame feature width does not match the input projection")
    h = frames @ params[f"{prefix}.in"] + pos[:T]
    out, sc = _stack_forward(h, params, prefix, locality_last)
    return out, (frames, T, sc)


def audio_backward(cache, g, params, prefix="audio"):
    frames, T, sc = cache
    dh, grads = _stack_backward(sc, g, params, prefix)
    _, grads[f"{prefix}.in"] = nm.matmul_vjp(frames, params[f"{prefix}.in"], dh)
    dpos = np.zeros_like(params[f"{prefix}.pos"])
    dpos[:T] = dh.reshape(-1, T, dh.shape[-1]).sum(0)
    grads[f"{prefix}.pos"] = dpos
    return grads


def text_forward(tokens, params, prefix="text"):
    """Batched text encoder over equal-length token rows (B, N)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    table = params[f"{prefix}.embed"]
    pos = params[f"{prefix}.pos"]
    N = tokens.shape[-1]
    if N < 1:
        raise LengthError("caption has no tokens")
    if N > pos.shape[0]:
        raise LengthError(f"caption has {N} tokens, encoder supports at most {pos.shape[0]}")
    if tokens.min() < 0 or tokens.max() >= table.shape[0]:
        raise VocabularyError(f"token id outside vocabulary of size {table.shape[0]}")
    h = nm.embed_lookup(table, tokens) + pos[:N]
    out, sc = _stack_forward(h, params, prefix, False)
    return out, (tokens, N, sc)


def text_backward(cache, g, params, prefix="text"):
    tokens, N, sc = cache
    dh, grads = _stack_backward(sc, g, params, prefix)
    grads[f"{prefix}.embed"] = nm.embed_lookup_vjp(params[f"{prefix}.embed"], tokens, dh)
    dpos = np.zeros_like(params[f"{prefix}.pos"])
    dpos[:N] = dh.reshape(-1, N, dh.shape[-1]).sum(0)
    grads[f"{prefix}.pos"] = dpos
    return grads


def encode_audio(clip_frames, params, locality_last, prefix="audio"):
    """Frame features (T x D, unit rows) for a single clip."""
    return audio_forward(clip_frames, params, locality_last, prefix)[0]


def encode_text(tokens, params, prefix="text"):
    """Word features (N x D, unit rows) for a single caption."""
    return text_forward(np.asarray(tokens)[None, :], params, prefix)[0][0]
