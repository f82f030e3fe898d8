"""Independent reference implementations used as test oracles."""

import functools
import itertools
import math

import numpy as np


@functools.lru_cache(maxsize=None)
def _supports(n):
    """Every non-empty subset of range(n) as a boolean row."""
    return np.array(list(itertools.product([False, True], repeat=n))[1:])


def qp_sparsemax(x):
    """Simplex projection by enumerating every support.

    On a fixed support S the projection is ``x_S - (sum(x_S) - 1) / |S|``;
    the answer is the feasible (non-negative) candidate closest to x.
    """
    x = np.asarray(x, dtype=np.float64)
    masks = _supports(x.size)
    k = masks.sum(1)
    shift = (masks @ x - 1.0) / k
    cand = np.where(masks, x - shift[:, None], 0.0)
    feasible = ~((cand < 0) & masks).any(1)
    dist = ((cand - x) ** 2).sum(1)
    best = np.flatnonzero(feasible)[np.argmin(dist[feasible])]
    return cand[best]


def symmetric_infonce(audio, text, tau):
    """Plain symmetric InfoNCE on raw global vectors, averaged over the batch.

    Normalizes the rows, forms cosine similarities and evaluates both
    retrieval directions term by term with the math module.
    """
    a = [np.asarray(v, dtype=np.float64) / math.sqrt(float(np.dot(v, v))) for v in audio]
    t = [np.asarray(v, dtype=np.float64) / math.sqrt(float(np.dot(v, v))) for v in text]
    B = len(a)
    sim = [[float(np.dot(a[i], t[j])) for j in range(B)] for i in range(B)]
    total = 0.0
    for i in range(B):
        total -= sim[i][i] / tau - math.log(sum(math.exp(sim[i][j] / tau) for j in range(B)))
        total -= sim[i][i] / tau - math.log(sum(math.exp(sim[j][i] / tau) for j in range(B)))
    return total / B
