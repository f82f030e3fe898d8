"""Zero-shot evaluation: retrieval, tagging, frame-level event detection.

Detection follows the usual post-processing chain: per-class cosine timeline
between frame features and the class-name text embedding, median filter,
threshold, contiguous segments, then one-to-one matching against the ground
truth with an onset/offset collar (in frames).
"""

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import median_filter

from .codebook import frame_similarity_map
from .errors import ParameterError

THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))
DEFAULT_COLLAR = 2
DEFAULT_MEDIAN = 3


@dataclass
class RetrievalResult:
    t2a_r1: float
    t2a_r5: float
    a2t_r1: float
    a2t_r5: float


@dataclass
class TaggingResult:
    accuracy: float
    mAP: float
    per_class_ap: dict
    n_single: int


@dataclass
class DetectionResult:
    micro_f1: float
    per_class_f1: dict
    segment_f1: float
    threshold: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    collar: int = DEFAULT_COLLAR
    median_w: int = DEFAULT_MEDIAN


@dataclass
class EvalReport:
    retrieval: RetrievalResult
    tagging: TaggingResult
    detection: DetectionResult
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# retrieval


def ranks_of_positives(sim, groups=None):
    """Rank (0-based) of the best-ranked positive for every query row.

    Candidates are ordered by descending similarity, ties broken by lower
    candidate index. Query ``i`` and candidate ``j`` are a positive pair when
    ``groups[i] == groups[j]`` (default: ``i == j``). The rank counts
    distinct candidate groups ahead of the first positive, so duplicated
    pairs do not inflate it.
    """
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    groups = np.arange(n) if groups is None else np.asarray(groups)
    ranks = np.empty(n, dtype=np.int64)
    idx = np.arange(sim.shape[1])
    for i in range(n):
        order = np.lexsort((idx, -sim[i]))
        g = groups[order]
        first = np.flatnonzero(g == groups[i])[0]
        ranks[i] = np.unique(g[:first]).size
    return ranks


def recall_at_k(ranks, k):
    return 100.0 * float(np.mean(np.asarray(ranks) < k))


def retrieval_from_embeddings(audio_g, text_g, groups=None):
    sim = text_g @ audio_g.T
    rt = ranks_of_positives(sim, groups)
    ra = ranks_of_positives(sim.T, groups)
    return RetrievalResult(recall_at_k(rt, 1), recall_at_k(rt, 5), recall_at_k(ra, 1), recall_at_k(ra, 5))


def _require(clips):
    if len(clips) == 0:
        raise ParameterError("evaluation split is empty")


def eval_retrieval(model, corpus, clips):
    _require(clips)
    _, ga, _ = model.embed_audio(corpus.frames_batch(clips))
    _, gt, _ = model.embed_text([c.caption for c in clips])
    return retrieval_from_embeddings(ga, gt)


# ---------------------------------------------------------------------------
# tagging


def average_precision(scores, labels):
    """Mean of precision at each positive, items sorted by descending score (stable)."""
    labels = np.asarray(labels, dtype=bool)
    if not labels.any():
        return float("nan")
    order = np.argsort(-np.asarray(scores), kind="stable")
    hits = labels[order]
    prec = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(prec[hits].mean())


def tagging_from_embeddings(audio_g, class_g, clips, n_classes):
    scores = audio_g @ class_g.T
    single = [i for i, c in enumerate(clips) if len(c.events) == 1]
    if single:
        pred = np.argmax(scores[single], axis=1)
        truth = np.array([clips[i].events[0][0] for i in single])
        acc = 100.0 * float(np.mean(pred == truth))
    else:
        acc = float("nan")
    labels = np.zeros((len(clips), n_classes), dtype=bool)
    for i, c in enumerate(clips):
        for cls, _, _ in c.events:
            labels[i, cls] = True
    per_class = {}
    for k in range(n_classes):
        if not labels[:, k].any():
            warnings.warn(f"class {k} has no positive clips; AP excluded from mAP")
            continue
        per_class[k] = average_precision(scores[:, k], labels[:, k])
    mAP = 100.0 * float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return TaggingResult(acc, mAP, per_class, len(single))


def eval_tagging(model, corpus, clips, class_g=None):
    _require(clips)
    if class_g is None:
        class_g = model.class_embeddings(corpus.vocab)
    _, ga, _ = model.embed_audio(corpus.frames_batch(clips))
    return tagging_from_embeddings(ga, class_g, clips, len(corpus.vocab.classes))


# ---------------------------------------------------------------------------
# detection


def segments_from_mask(mask):
    """Contiguous True runs as [(onset, offset)], offset exclusive."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    d = np.diff(m.astype(np.int8))
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def match_events(pred, truth, collar):
    """One-to-one greedy matching by onset distance.

    A pair is eligible when both onset and offset differ by at most
    ``collar`` frames. Returns the list of (pred_index, truth_index) pairs.
    """
    cand = []
    for i, (po, pf) in enumerate(pred):
        for j, (to, tf) in enumerate(truth):
            don, doff = abs(po - to), abs(pf - tf)
            if don <= collar and doff <= collar:
                cand.append((don, doff, i, j))
    cand.sort()
    used_p, used_t, pairs = set(), set(), []
    for _, _, i, j in cand:
        if i not in used_p and j not in used_t:
            used_p.add(i)
            used_t.add(j)
            pairs.append((i, j))
    return pairs


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def postprocess(sim, threshold, median_w):
    s = median_filter(np.asarray(sim, dtype=np.float64), size=median_w, mode="nearest") if median_w > 1 else sim
    return segments_from_mask(s > threshold), s > threshold


def detection_from_maps(maps, clips, n_classes, threshold, median_w=DEFAULT_MEDIAN, collar=DEFAULT_COLLAR):
    """Score similarity maps shaped (n_clips, n_classes, T) against ground truth."""
    tp = np.zeros(n_classes, dtype=np.int64)
    fp = np.zeros(n_classes, dtype=np.int64)
    fn = np.zeros(n_classes, dtype=np.int64)
    seg = np.zeros(3, dtype=np.int64)  # frame-level tp, fp, fn
    for ci, clip in enumerate(clips):
        T = maps.shape[2]
        for k in range(n_classes):
            truth = [(on, off) for c, on, off in clip.events if c == k]
            pred, mask = postprocess(maps[ci, k], threshold, median_w)
            pairs = match_events(pred, truth, collar)
            tp[k] += len(pairs)
            fp[k] += len(pred) - len(pairs)
            fn[k] += len(truth) - len(pairs)
            gt_mask = np.zeros(T, dtype=bool)
            for on, off in truth:
                gt_mask[on:off] = True
            seg += [int((mask & gt_mask).sum()), int((mask & ~gt_mask).sum()), int((~mask & gt_mask).sum())]
    per_class = {k: _f1(tp[k], fp[k], fn[k]) for k in range(n_classes)}
    T_, F_, N_ = int(tp.sum()), int(fp.sum()), int(fn.sum())
    return DetectionResult(_f1(T_, F_, N_), per_class, _f1(*seg), float(threshold), T_, F_, N_, collar, median_w)


def similarity_maps(model, corpus, clips, class_g=None):
    """(n_clips, n_classes, T) cosine timelines."""
    if class_g is None:
        class_g = model.class_embeddings(corpus.vocab)
    P, _, _ = model.embed_audio(corpus.frames_batch(clips))
    return np.einsum("ntd,kd->nkt", P, class_g)


def eval_detection(model, corpus, clips, threshold, median_w=DEFAULT_MEDIAN, collar=DEFAULT_COLLAR, class_g=None, maps=None):
    _require(clips)
    if maps is None:
        maps = similarity_maps(model, corpus, clips, class_g)
    return detection_from_maps(maps, clips, len(corpus.vocab.classes), threshold, median_w, collar)


def best_threshold(maps, clips, n_classes, thresholds=THRESHOLDS, median_w=DEFAULT_MEDIAN, collar=DEFAULT_COLLAR):
    """Threshold with the highest micro event-F1 (first one wins ties)."""
    best_t, best_f = thresholds[0], -1.0
    for t in thresholds:
        f = detection_from_maps(maps, clips, n_classes, t, median_w, collar).micro_f1
        if f > best_f:
            best_t, best_f = t, f
    return best_t


def evaluate(model, corpus, split="test", tune_split="val", median_w=DEFAULT_MEDIAN, collar=DEFAULT_COLLAR):
    """Full report on ``split``; the detection threshold is tuned on ``tune_split``."""
    clips = corpus.split(split)
    _require(clips)
    E = len(corpus.vocab.classes)
    class_g = model.class_embeddings(corpus.vocab)
    P, ga, _ = model.embed_audio(corpus.frames_batch(clips))
    _, gt, _ = model.embed_text([c.caption for c in clips])
    maps = np.einsum("ntd,kd->nkt", P, class_g)
    if tune_split:
        tclips = corpus.split(tune_split)
        thr = best_threshold(similarity_maps(model, corpus, tclips, class_g), tclips, E, median_w=median_w, collar=collar)
    else:
        thr = best_threshold(maps, clips, E, median_w=median_w, collar=collar)
    return EvalReport(
        retrieval_from_embeddings(ga, gt),
        tagging_from_embeddings(ga, class_g, clips, E),
        detection_from_maps(maps, clips, E, thr, median_w, collar),
        {"split": split, "tune_split": tune_split, "n_clips": len(clips)},
    )


# ---------------------------------------------------------------------------
# exports


def export_similarity_heatmap(model, corpus, clip, path, class_g=None, extra=None):
    """Write a classes x frames cosine CSV plus a ``.json`` ground-truth sidecar.

    ``extra`` is merged into the sidecar (the CLI records its config there).
    """
    if class_g is None:
        class_g = model.class_embeddings(corpus.vocab)
    P, _, _ = model.embed_audio(corpus.frames(clip)[None])
    names = corpus.vocab.class_names
    heat = np.stack([frame_similarity_map(P[0], q) for q in class_g])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class"] + [f"f{t}" for t in range(heat.shape[1])])
        for name, row in zip(names, heat):
            w.writerow([name] + [repr(float(v)) for v in row])
    sidecar = {
        "clip_id": clip.id,
        "T": clip.T,
        "events": [{"class": names[c], "class_id": c, "onset": on, "offset": off} for c, on, off in clip.events],
        "caption": [corpus.vocab.tokens[t] for t in clip.caption],
        **(extra or {}),
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)
    return heat


def sidecar_path(path):
    return str(path).rsplit(".", 1)[0] + ".json" if str(path).endswith(".csv") else str(path) + ".json"


def read_heatmap_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names = [r[0] for r in rows[1:]]
    return names, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def format_report(report):
    """Aligned plain-text table of an :class:`EvalReport`."""
    r, t, d = report.retrieval, report.tagging, report.detection
    lines = [
        f"{'metric':<28}{'value':>10}",
        f"{'T2A R@1':<28}{r.t2a_r1:>10.2f}",
        f"{'T2A R@5':<28}{r.t2a_r5:>10.2f}",
        f"{'A2T R@1':<28}{r.a2t_r1:>10.2f}",
        f"{'A2T R@5':<28}{r.a2t_r5:>10.2f}",
        f"{'tagging acc (single-event)':<28}{t.accuracy:>10.2f}",
        f"{'tagging mAP':<28}{t.mAP:>10.2f}",
        f"{'event F1 (collar)':<28}{d.micro_f1:>10.4f}",
        f"{'segment F1':<28}{d.segment_f1:>10.4f}",
        f"{'detection threshold':<28}{d.threshold:>10.2f}",
    ]
    return "\n".join(lines)
