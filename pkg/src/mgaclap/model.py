"""Dual-encoder model: encoders -> aggregator -> contrastive loss.

The three ablation switches map onto code paths as follows:

* ``use_codebook``: codebook aggregation (else L2-normalized mean pooling)
* ``locality_last``: last audio block is the locality-aware block
* ``use_hard_negative``: difficulty-weighted negatives in the loss

With all three off the model is the plain CLAP baseline.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import codebook as cbk
from . import encoders as enc
from . import losses
from . import numerics as nm
from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    use_codebook: bool = True
    locality_last: bool = True
    use_hard_negative: bool = True
    pooling: str = "max"
    norm: str = "sparsemax"
    d: int = 64
    D: int = 64
    audio_blocks: int = 3
    text_blocks: int = 2
    M: int = 256
    eta: float = cbk.DEFAULT_ETA
    gamma: float = 0.15
    tau_init: float = 0.07
    stop_grad_weights: bool = True
    reduction: str = "mean"

    def validate(self):
        if self.pooling not in cbk.POOLINGS:
            raise ConfigError(f"model.pooling must be one of {cbk.POOLINGS}")
        if self.norm not in cbk.NORMS:
            raise ConfigError(f"model.norm must be one of {cbk.NORMS}")
        if not self.use_codebook and (self.pooling, self.norm) != ("max", "sparsemax"):
            raise ConfigError("pooling/norm variants require model.use_codebook=true")
        if self.audio_blocks < 1 or self.text_blocks < 1:
            raise ConfigError("encoders need at least one block")
        if self.M < 1 or self.eta <= 0 or self.tau_init <= 0 or self.gamma < 0:
            raise ConfigError("need M >= 1, eta > 0, tau_init > 0, gamma >= 0")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError("loss reduction must be 'mean' or 'sum'")
        return self

    @property
    def is_baseline(self):
        return not (self.use_codebook or self.locality_last or self.use_hard_negative)


def init_params(cfg, n_tokens, F_in, max_frames, max_tokens, seed, dtype=np.float64):
    """Fresh parameter map. Drawn in float64, then cast to ``dtype``."""
    cfg.validate()
    rng = np.random.default_rng([seed, 0x6D6F64])
    p = {}
    p.update(enc.init_encoder(rng, "audio", enc.EncoderShape(cfg.audio_blocks, cfg.d, cfg.D, max_frames, F_in), "audio"))
    p.update(enc.init_encoder(rng, "text", enc.EncoderShape(cfg.text_blocks, cfg.d, cfg.D, max_tokens, n_tokens), "text"))
    if cfg.use_codebook:
        p["codebook.z"] = cbk.Codebook.random(rng, cfg.M, cfg.D, cfg.eta).Z
    p["loss.log_tau"] = np.array(np.log(cfg.tau_init))
    return {k: v.astype(dtype) for k, v in p.items()}


def loss_config(cfg, params):
    return losses.LossConfig(
        gamma=cfg.gamma,
        log_tau=float(params["loss.log_tau"]),
        stop_grad_weights=cfg.stop_grad_weights,
        reduction=cfg.reduction,
    )


def _aggregate(cfg, params, local):
    """(globals, weights-or-None, cache) for a (B, L, D) batch."""
    if cfg.use_codebook:
        g, w, _, _, cache = cbk.aggregate_forward(local, params["codebook.z"], cfg.eta, cfg.pooling, cfg.norm)
        return g, w, ("cb", cache)
    g, cache = cbk.mean_pool_forward(local)
    return g, None, ("mean", cache)


def _aggregate_backward(cache, dg):
    kind, c = cache
    if kind == "cb":
        return cbk.aggregate_backward(c, dg)
    return cbk.mean_pool_backward(c, dg), None


def _group_by_length(captions):
    groups = {}
    for i, cap in enumerate(captions):
        groups.setdefault(len(cap), []).append(i)
    return sorted(groups.items())


def embed_audio(cfg, params, frames):
    """Frame features, global embeddings (unit rows) and codeword weights for (B, T, F_in)."""
    P, _ = enc.audio_forward(np.asarray(frames, dtype=params["audio.in"].dtype), params, cfg.locality_last)
    g, w, _ = _aggregate(cfg, params, P)
    return P, nm.l2_normalize(g), w


def embed_text(cfg, params, captions):
    """Word features (list), global embeddings (unit rows) and weights for token lists."""
    B = len(captions)
    feats = [None] * B
    dtype = params["audio.in"].dtype
    globs = np.zeros((B, cfg.D), dtype=dtype)
    weights = np.zeros((B, cfg.M), dtype=dtype) if cfg.use_codebook else None
    for _, idx in _group_by_length(captions):
        toks = np.array([captions[i] for i in idx])
        Q, _ = enc.text_forward(toks, params)
        g, w, _ = _aggregate(cfg, params, Q)
        for r, i in enumerate(idx):
            feats[i] = Q[r]
        globs[idx] = g
        if weights is not None:
            weights[idx] = w
    return feats, nm.l2_normalize(globs), weights


def batch_loss(cfg, params, frames, captions, with_grad=True, weights=None):
    """Loss over a batch of paired clips/captions and its parameter gradients.

    Returns ``(loss, grads, info)``; ``grads`` is keyed like ``params``.
    """
    B = len(captions)
    dtype = params["audio.in"].dtype
    P, acache = enc.audio_forward(np.asarray(frames, dtype=dtype), params, cfg.locality_last)
    ga, wa, agg_a = _aggregate(cfg, params, P)

    gt = np.zeros((B, cfg.D), dtype=dtype)
    text_parts = []
    for _, idx in _group_by_length(captions):
        toks = np.array([captions[i] for i in idx])
        Q, tcache = enc.text_forward(toks, params)
        g, _, agg_t = _aggregate(cfg, params, Q)
        gt[idx] = g
        text_parts.append((idx, tcache, agg_t))

    S, scache = losses.similarity_matrix(ga, gt)
    lcfg = loss_config(cfg, params)
    loss, dS, dlog_tau = losses.loss_and_grad(S, lcfg, cfg.use_hard_negative, weights)
    info = {"S": S, "audio_weights": wa}
    if not with_grad:
        return loss, None, info

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grads["loss.log_tau"] = np.array(dlog_tau, dtype=params["loss.log_tau"].dtype)
    dga, dgt = losses.similarity_matrix_vjp(scache, dS.astype(dtype, copy=False))

    dP, dZ = _aggregate_backward(agg_a, dga)
    if dZ is not None:
        grads["codebook.z"] += dZ
    for k, v in enc.audio_backward(acache, dP, params).items():
        grads[k] += v
    for idx, tcache, agg_t in text_parts:
        dQ, dZ = _aggregate_backward(agg_t, dgt[idx])
        if dZ is not None:
            grads["codebook.z"] += dZ
        for k, v in enc.text_backward(tcache, dQ, params).items():
            grads[k] += v
    return loss, grads, info


def config_dict(cfg):
    return asdict(cfg)


@dataclass
class Model:
    """Configuration plus parameters; the unit the evaluation harness consumes."""

    cfg: ModelConfig
    params: dict

    def embed_audio(self, frames, batch_size=256):
        frames = np.asarray(frames)
        parts = [embed_audio(self.cfg, self.params, frames[i:i + batch_size])
                 for i in range(0, len(frames), batch_size)]
        P = np.concatenate([p[0] for p in parts])
        G = np.concatenate([p[1] for p in parts])
        W = None if parts[0][2] is None else np.concatenate([p[2] for p in parts])
        return P, G, W

    def embed_text(self, captions):
        return embed_text(self.cfg, self.params, captions)

    def class_embeddings(self, vocab):
        """Global text embedding of each event-class name used as a one-word query."""
        return self.embed_text([[c.name_token] for c in vocab.classes])[1]
