"""Finite-difference gradient suite over every differentiable op and the
composite training paths. Used by ``mgaclap grad-check`` and the tests.

Tolerances: relative error below 1e-6 for linear ops and 1e-4 otherwise.
Points within ``numerics.BOUNDARY_RADIUS`` of a nondifferentiable boundary
(sparsemax support changes, ties in a max) are skipped and counted.
"""

from dataclasses import dataclass

import numpy as np

from . import codebook as cbk
from . import encoders as enc
from . import losses
from . import model as mdl
from . import numerics as nm

LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-4


@dataclass
class SuiteRow:
    name: str
    tol: float
    points: int
    skipped: int
    max_rel_error: float

    @property
    def ok(self):
        return self.points > 0 and self.max_rel_error < self.tol


def _block_op(locality):
    d = 4
    bp_rng = np.random.default_rng([7, int(locality)])
    bp = enc.init_block(bp_rng, "b", d)
    names = [f"b.{f}" for f in enc.BLOCK_FIELDS]

    def unpack(xs):
        return xs[0], {f: xs[i + 1] for i, f in enumerate(enc.BLOCK_FIELDS)}

    def fwd(*xs):
        u, p = unpack(xs)
        return enc.block_forward(u, p, locality)[0]

    def vjp(xs, g):
        u, p = unpack(xs)
        _, cache = enc.block_forward(u, p, locality)
        du, grads = enc.block_backward(cache, g, p)
        return (du,) + tuple(grads[f] for f in enc.BLOCK_FIELDS)

    def sample(r):
        base = [r.standard_normal((2, 3, d))]
        for n in names:
            v = bp[n]
            base.append(v + 0.1 * r.standard_normal(v.shape))
        return base

    diff = (0,) + tuple(i + 1 for i, f in enumerate(enc.BLOCK_FIELDS) if not (locality and f in ("wq", "wk")))
    name = "locality_block" if locality else "vanilla_block"
    return nm.DualOp(name, fwd, vjp, differentiable=diff), sample


def _aggregate_op(pooling, norm):
    eta = 0.5

    def fwd(local, Z):
        return cbk.aggregate_forward(local, Z, eta, pooling, norm)[0]

    def vjp(xs, g):
        cache = cbk.aggregate_forward(xs[0], xs[1], eta, pooling, norm)[4]
        return cbk.aggregate_backward(cache, g)

    def margin(local, Z):
        scores = local @ Z.T / eta
        m = float("inf")
        if pooling == "max":
            m = min(nm.max_margin(scores[b], axis=0) for b in range(scores.shape[0]))
        if norm == "sparsemax":
            s = scores.max(axis=1) if pooling == "max" else scores.mean(axis=1)
            m = min(m, nm.sparsemax_margin(s))
        return m

    def sample(r):
        return [r.standard_normal((2, 3, 4)), r.standard_normal((5, 4)) * 0.6]

    return nm.DualOp(f"aggregate[{pooling},{norm}]", fwd, vjp, boundary_margin=margin), sample


def _mean_pool_op():
    op = nm.DualOp(
        "mean_pool",
        lambda x: cbk.mean_pool_forward(x)[0],
        lambda xs, g: (cbk.mean_pool_backward(cbk.mean_pool_forward(xs[0])[1], g),),
    )
    return op, lambda r: [r.standard_normal((2, 3, 4))]


def _similarity_op():
    def vjp(xs, g):
        _, cache = losses.similarity_matrix(xs[0], xs[1])
        return losses.similarity_matrix_vjp(cache, g)

    op = nm.DualOp("similarity_matrix", lambda a, t: losses.similarity_matrix(a, t)[0], vjp)
    return op, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]


def _loss_op(hard_negative, stop_grad, reduction="mean"):
    """Loss as a function of (S, log_tau). With stop-grad the difficulty
    weights are pinned at the evaluation point so the oracle differentiates
    the same function the optimizer sees."""

    def cfg_of(log_tau):
        return losses.LossConfig(gamma=0.7, log_tau=float(log_tau), stop_grad_weights=stop_grad, reduction=reduction)

    pinned = {}

    def fwd(S, log_tau):
        return np.array(losses.loss_and_grad(S, cfg_of(log_tau), hard_negative, pinned.get("w"))[0])

    def vjp(xs, g):
        S, log_tau = xs
        cfg = cfg_of(log_tau)
        pinned["w"] = losses.difficulty_scores(S, cfg) if (hard_negative and stop_grad) else None
        _, dS, dlt = losses.loss_and_grad(S, cfg, hard_negative, pinned["w"])
        return dS * float(g), np.array(dlt * float(g))

    def sample(r):
        pinned.clear()
        return [np.tanh(r.standard_normal((4, 4))), np.array(np.log(0.1) + 0.3 * r.standard_normal())]

    if not hard_negative:
        name = "clap_loss"
    else:
        name = "hn_clap_loss[stop_grad]" if stop_grad else "hn_clap_loss[full]"
    # grad_check calls the VJP before any perturbed forward, which fills ``pinned``
    return nm.DualOp(name, fwd, vjp), sample


def _end_to_end(points, rng, coords=24, step=1e-5, radius=nm.BOUNDARY_RADIUS):
    """encode -> aggregate -> hard-negative loss on a tiny float64 model.

    Each point perturbs the parameters, pins the difficulty weights, and
    compares ``coords`` randomly chosen parameter coordinates against central
    differences. Returns (max error, checked points, skipped points).
    """
    from . import data

    manifest, clips = data.gen_corpus(12, E=3, F_in=5, T=5, sigma=0.1, seed=11)
    cfg = mdl.ModelConfig(d=6, D=5, M=6, audio_blocks=2, text_blocks=1, eta=0.5, gamma=0.5)
    base = mdl.init_params(cfg, manifest.vocab.size, 5, 5, 8, seed=3)
    batch = clips[:4]
    frames = np.stack([data.clip_frames(manifest.vocab, c) for c in batch])
    caps = [c.caption for c in batch]
    names = sorted(base)
    sizes = [base[n].size for n in names]
    offsets = np.cumsum([0] + sizes)

    def margin(p):
        m = float("inf")
        P, _ = enc.audio_forward(frames, p, cfg.locality_last)
        locals_ = [P] + [enc.text_forward(np.array([c]), p)[0] for c in caps]
        for L in locals_:
            sc = L @ p["codebook.z"].T / cfg.eta
            for b in range(sc.shape[0]):
                m = min(m, nm.max_margin(sc[b], axis=0), nm.sparsemax_margin(sc[b].max(axis=0)))
        return m

    worst, checked, skipped = 0.0, 0, 0
    while checked < points and skipped < 10 * points:
        p = {k: np.array(v + 0.05 * rng.standard_normal(v.shape)) for k, v in base.items()}
        p["codebook.z"] = nm.l2_normalize(p["codebook.z"])
        if margin(p) < radius:
            skipped += 1
            continue
        _, grads, info = mdl.batch_loss(cfg, p, frames, caps)
        w = losses.difficulty_scores(info["S"], mdl.loss_config(cfg, p))
        flat_ids = rng.choice(offsets[-1], size=coords, replace=False)
        an, fd = [], []
        for fid in flat_ids:
            k = int(np.searchsorted(offsets, fid, side="right") - 1)
            name, j = names[k], int(fid - offsets[k])
            x = p[name].reshape(-1)
            orig = x[j]
            x[j] = orig + step
            lp = mdl.batch_loss(cfg, p, frames, caps, False, w)[0]
            x[j] = orig - step
            lm = mdl.batch_loss(cfg, p, frames, caps, False, w)[0]
            x[j] = orig
            fd.append((lp - lm) / (2 * step))
            an.append(grads[name].reshape(-1)[j])
        an, fd = np.array(an), np.array(fd)
        denom = max(np.abs(an).max(), np.abs(fd).max(), 1e-300)
        worst = max(worst, float(np.abs(an - fd).max() / denom))
        checked += 1
    return worst, checked, skipped


def suite_ops():
    """name -> (DualOp, sampler, linear) for every op the suite covers."""
    ops = dict(nm.primitive_ops())
    for loc in (False, True):
        op, s = _block_op(loc)
        ops[op.name] = (op, s, False)
    for pooling in cbk.POOLINGS:
        for norm in cbk.NORMS:
            op, s = _aggregate_op(pooling, norm)
            ops[op.name] = (op, s, False)
    for op, s in (_mean_pool_op(), _similarity_op(), _loss_op(False, True),
                  _loss_op(True, True), _loss_op(True, False), _loss_op(True, True, "sum")):
        name = op.name if op.name not in ops else op.name + "[sum]"
        ops[name] = (op, s, False)
    return ops


def run_suite(points=100, seed=0, e2e_points=None, only=None):
    """Run every check. Returns a list of :class:`SuiteRow`."""
    rng = np.random.default_rng(seed)
    rows = []
    for name, (op, sampler, linear) in suite_ops().items():
        if only and name not in only:
            continue
        worst, checked, skipped = 0.0, 0, 0
        while checked < points and skipped < 10 * points:
            res = nm.grad_check(op, sampler(rng), rng=rng)
            if res.skipped:
                skipped += 1
                continue
            worst = max(worst, res.max_rel_error)
            checked += 1
        rows.append(SuiteRow(name, LINEAR_TOL if linear else NONLINEAR_TOL, checked, skipped, worst))
    if not only or "end_to_end" in only:
        worst, checked, skipped = _end_to_end(points if e2e_points is None else e2e_points, rng)
        rows.append(SuiteRow("end_to_end", NONLINEAR_TOL, checked, skipped, worst))
    return rows


def format_rows(rows):
    lines = [f"{'check':<30}{'points':>7}{'skipped':>8}{'max rel err':>13}{'tol':>9}  status"]
    for r in rows:
        lines.append(f"{r.name:<30}{r.points:>7}{r.skipped:>8}{r.max_rel_error:>13.2e}{r.tol:>9.0e}  {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
