"""Modality-shared codebook aggregation and the mean-pool baseline.

Local features (frames or words) are scored against every codeword, pooled
over time, normalized into simplex weights and used to mix the codewords into
one global vector. Batched entry points take local features shaped
(B, T, D); the single-item helpers accept (T, D).
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import numerics as nm
from .errors import DimensionError, ParameterError

POOLINGS = ("max", "mean")
NORMS = ("sparsemax", "softmax")
# affinity scale; smaller values leave most codewords outside every support at init
DEFAULT_ETA = 2.0


@dataclass
class Codebook:
    Z: np.ndarray
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        self.Z = nm.as_tensor(self.Z, "codebook")
        if self.Z.ndim != 2 or self.Z.shape[0] < 1:
            raise DimensionError("codebook needs shape (M, D) with M >= 1")
        if not self.eta > 0:
            raise ParameterError("eta must be positive")

    @property
    def M(self):
        return self.Z.shape[0]

    @classmethod
    def random(cls, rng, M, D, eta=DEFAULT_ETA):
        return cls(nm.l2_normalize(rng.standard_normal((M, D))), eta)

    def renormalize(self):
        self.Z = nm.l2_normalize(self.Z)


@dataclass
class AggregationResult:
    global_: np.ndarray
    weights: np.ndarray
    affinities: np.ndarray
    argmax_frame: np.ndarray

    @property
    def support(self):
        return np.flatnonzero(self.weights > 0)


def _check_variant(pooling, norm):
    if pooling not in POOLINGS:
        raise ParameterError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
    if norm not in NORMS:
        raise ParameterError(f"norm must be one of {NORMS}, got {norm!r}")


def aggregate_forward(local, Z, eta, pooling="max", norm="sparsemax"):
    """Batched aggregation. ``local`` is (B, T, D). Returns (globals, weights, s, argmax, cache)."""
    _check_variant(pooling, norm)
    local = nm.as_tensor(local, "aggregate")
    if local.ndim != 3 or local.shape[1] < 1:
        raise DimensionError("aggregate needs at least one local feature row")
    if local.shape[2] != Z.shape[1]:
        raise DimensionError(f"feature width {local.shape[2]} != codeword width {Z.shape[1]}")
    scores = local @ Z.T / eta
    if pooling == "max":
        s, arg = kernels.max_over_frames(scores)
    else:
        s, arg = scores.mean(axis=1), np.full(scores.shape[::2], -1, dtype=np.int64)
    w = nm.sparsemax(s) if norm == "sparsemax" else nm.softmax(s)
    g = w @ Z
    return g, w, s, arg, (local, Z, eta, pooling, norm, arg, w)


def aggregate_backward(cache, dglobal):
    """Returns (dlocal, dZ) for a cotangent on the (B, D) globals."""
    local, Z, eta, pooling, norm, arg, w = cache
    B, T, _ = local.shape
    dw = dglobal @ Z.T
    dZ = w.T @ dglobal
    if norm == "sparsemax":
        ds = nm.sparsemax_vjp(None, dw, out=w)
    else:
        ds = nm.softmax_vjp(w, dw)
    if pooling == "max":
        dscores = np.zeros((B, T, Z.shape[0]), dtype=dw.dtype)
        np.put_along_axis(dscores, arg[:, None, :], ds[:, None, :], axis=1)
    else:
        dscores = np.broadcast_to(ds[:, None, :] / T, (B, T, Z.shape[0]))
    dscores = dscores / eta
    dlocal = dscores @ Z
    dZ = dZ + dscores.reshape(-1, Z.shape[0]).T @ local.reshape(-1, local.shape[2])
    return dlocal, dZ


def mean_pool_forward(local):
    """Batched baseline: L2-normalized mean of the rows. Returns (globals, cache)."""
    local = nm.as_tensor(local, "mean_pool")
    if local.ndim != 3 or local.shape[1] < 1:
        raise DimensionError("mean pooling needs at least one row")
    m = local.mean(axis=1)
    out = nm.l2_normalize(m)
    return out, (local.shape[1], m, out)


def mean_pool_backward(cache, dglobal):
    T, m, out = cache
    dm = nm.l2_normalize_vjp(m, dglobal, out)
    return np.repeat(dm[:, None, :] / T, T, axis=1)


# ---------------------------------------------------------------------------
# single-item API


def _as_rows(local):
    local = nm.as_tensor(local, "codebook")
    if local.ndim != 2 or local.shape[0] < 1:
        raise DimensionError("expected a non-empty (T, D) feature matrix")
    return local


def affinity(local, cb):
    """Per-codeword affinity ``max_j <local_j, z_k> / eta`` and the winning row."""
    local = _as_rows(local)
    _, _, s, arg, _ = aggregate_forward(local[None], cb.Z, cb.eta)
    return s[0], arg[0]


def aggregate_variant(local, cb, pooling="max", norm="sparsemax"):
    local = _as_rows(local)
    g, w, s, arg, _ = aggregate_forward(local[None], cb.Z, cb.eta, pooling, norm)
    return AggregationResult(g[0], w[0], s[0], arg[0])


def aggregate(local, cb):
    """Max-pooled affinities, sparsemax weights, codeword mixture."""
    return aggregate_variant(local, cb, "max", "sparsemax")


def mean_pool_aggregate(local):
    local = _as_rows(local)
    return mean_pool_forward(local[None])[0][0]


def frame_similarity_map(frames, query_global):
    """Cosine between every frame feature and a unit-norm query."""
    frames = nm.as_tensor(frames, "frame_similarity_map")
    q = nm.as_tensor(query_global, "frame_similarity_map")
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise ParameterError("query must be unit-norm")
    return frames @ q


# ---------------------------------------------------------------------------
# diagnostics


def support_stats(weights):
    """Support statistics over a (n_items, M) weight matrix."""
    weights = np.asarray(weights)
    active = weights > 0
    sizes = active.sum(axis=1)
    used = active.any(axis=0)
    return {
        "items": int(weights.shape[0]),
        "M": int(weights.shape[1]),
        "mean_support": float(sizes.mean()) if sizes.size else 0.0,
        "max_support": int(sizes.max()) if sizes.size else 0,
        "min_support": int(sizes.min()) if sizes.size else 0,
        "dead_codewords": int((~used).sum()),
        "dead_ids": np.flatnonzero(~used).tolist(),
    }


def probe_codewords(Z, class_features, class_names, top_k=3, codewords=None):
    """Rank event classes for each codeword by cosine similarity.

    ``class_features`` holds one unit row per class (e.g. the encoded class
    name). Returns rows of (codeword_id, rank, class_name, similarity).
    """
    sims = np.asarray(Z) @ np.asarray(class_features).T
    ids = range(Z.shape[0]) if codewords is None else codewords
    rows = []
    for k in ids:
        order = np.argsort(-sims[k], kind="stable")[:top_k]
        for r, c in enumerate(order):
            rows.append((int(k), r + 1, class_names[c], float(sims[k, c])))
    return rows


def write_probe_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["codeword_id", "rank", "class_name", "similarity"])
        for k, r, name, sim in rows:
            w.writerow([k, r, name, repr(sim)])


def codeword_timelines(frames, Z, weights):
    """Per-clip ``<P_t, z_k>`` timelines for the codewords in each clip's support.

    ``frames`` is (n_clips, T, D), ``weights`` (n_clips, M). Returns one
    ``{codeword_id: [similarity per frame]}`` dict per clip.
    """
    sims = np.einsum("ntd,md->nmt", np.asarray(frames), np.asarray(Z))
    return [{int(k): sims[i, k].tolist() for k in np.flatnonzero(weights[i] > 0)} for i in range(len(weights))]


def probe_agreement(weights, Z, class_features, clip_classes):
    """Share of clips whose most-activated codeword ranks the clip's class first.

    ``clip_classes`` holds one class id per clip (single-event clips).
    """
    if len(clip_classes) == 0:
        return float("nan")
    top_class = np.argmax(np.asarray(Z) @ np.asarray(class_features).T, axis=1)
    top_codeword = np.argmax(np.asarray(weights), axis=1)
    return float(np.mean(top_class[top_codeword] == np.asarray(clip_classes)))
