"""Symmetric contrastive losses over an audio x text similarity matrix.

``S[i, j] = <audio_i, text_j>`` with both globals unit-normalized; the diagonal
holds the positive pairs. Logits are ``S / tau`` with ``tau = exp(log_tau)``.
The hard-negative loss multiplies each negative term of the softmax
denominator by a difficulty score::

    alpha[i, j] = B * softmax_j(gamma * S[i, :] / tau)       audio -> text
    beta[i, j]  = B * softmax_j(gamma * S[:, i] / tau)       text -> audio

Each direction is summed over the batch, or averaged when
``reduction == "mean"``.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DimensionError, ParameterError

TAU_MIN = 0.005
TAU_MAX = 1.0


@dataclass
class LossConfig:
    gamma: float = 0.15
    log_tau: float = float(np.log(0.07))
    stop_grad_weights: bool = True
    reduction: str = "mean"

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ParameterError("gamma must be finite and >= 0")
        if self.reduction not in ("mean", "sum"):
            raise ParameterError("reduction must be 'mean' or 'sum'")

    @property
    def tau(self):
        return float(np.exp(self.log_tau))


def clamp_log_tau(log_tau):
    return float(np.clip(log_tau, np.log(TAU_MIN), np.log(TAU_MAX)))


def similarity_matrix(audio_globals, text_globals):
    """Normalize both sides and return their cosine matrix with the cache for backward."""
    a = nm.l2_normalize(audio_globals)
    t = nm.l2_normalize(text_globals)
    return a @ t.T, (audio_globals, text_globals, a, t)


def similarity_matrix_vjp(cache, dS):
    ra, rt, a, t = cache
    da = nm.l2_normalize_vjp(ra, dS @ t, a)
    dt = nm.l2_normalize_vjp(rt, dS.T @ a, t)
    return da, dt


def _check(S):
    S = nm.as_tensor(S, "loss")
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] == 0:
        raise DimensionError(f"similarity matrix must be square and non-empty, got {S.shape}")
    return S


def _logsumexp(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def difficulty_scores(S, cfg):
    """(alpha, beta): row- and column-wise difficulty weights, each summing to B."""
    S = _check(S)
    B = S.shape[0]
    z = cfg.gamma * S / cfg.tau
    alpha = B * nm.softmax(z)
    beta = B * nm.softmax(z.T)
    return alpha, beta


def _direction(logits, gamma, stop_grad, weights=None):
    """One direction (rows = anchors). Returns per-row loss and d(loss)/d(logits)."""
    B = logits.shape[0]
    eye = np.eye(B, dtype=bool)
    if weights is not None:
        logc = np.log(weights)
        logc[eye] = 0.0
    elif gamma == 0.0:
        logc = np.zeros_like(logits)
    else:
        z = gamma * logits
        logc = np.log(B) + z - _logsumexp(z, 1)[:, None]
        logc[eye] = 0.0
    shifted = logits + logc
    lse = _logsumexp(shifted, 1)
    per_row = lse - np.diag(logits)
    p = np.exp(shifted - lse[:, None])
    dlogits = p - np.eye(B)
    if gamma != 0.0 and not stop_grad and weights is None:
        a = nm.softmax(gamma * logits)
        pn = np.where(eye, 0.0, p)
        dlogits = dlogits + gamma * (pn - a * pn.sum(1, keepdims=True))
    return per_row, dlogits


def loss_and_grad(S, cfg, hard_negative=False, weights=None):
    """Loss value with cotangents w.r.t. ``S`` and ``log_tau``.

    With ``hard_negative`` false (or gamma == 0) this is the plain symmetric
    InfoNCE loss. ``weights=(alpha, beta)`` pins the difficulty scores to
    given constants instead of computing them from ``S``.
    """
    S = _check(S)
    B = S.shape[0]
    tau = cfg.tau
    logits = S / tau
    gamma = cfg.gamma if hard_negative else 0.0
    wa, wt = (None, None) if weights is None else (weights[0], weights[1])
    la, ga = _direction(logits, gamma, cfg.stop_grad_weights, wa)
    lt, gt = _direction(logits.T, gamma, cfg.stop_grad_weights, wt)
    norm = 1.0 / B if cfg.reduction == "mean" else 1.0
    loss = norm * (la.sum() + lt.sum())
    dlogits = norm * (ga + gt.T)
    dS = dlogits / tau
    dlog_tau = -float((dlogits * logits).sum())
    return float(loss), dS, dlog_tau


def clap_loss(S, cfg):
    return loss_and_grad(S, cfg, hard_negative=False)[0]


def hn_clap_loss(S, cfg):
    return loss_and_grad(S, cfg, hard_negative=True)[0]
