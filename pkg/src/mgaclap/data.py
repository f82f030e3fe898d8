"""Synthetic paired corpus: frame sequences with known event intervals.

A clip's frame ``t`` is the sum of the prototypes of the events active at ``t``
plus isotropic Gaussian noise. Captions come from a three-template grammar
over event names and a handful of filler words. Only the clip spec and its
seed are stored on disk; frames are regenerated on load.

On-disk layout of a corpus directory::

    manifest.json   format version, sizes, vocabulary, prototypes, splits
    clips.jsonl     one clip per line: id, seed, T, events, caption, sigma
    splits/<name>.txt  one clip id per line (convenience copy of the splits)
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, GenerationError, ParameterError

FORMAT_VERSION = "mga-corpus/1"
FILLERS = ("a", "sound", "then", "and", "with", "of")
CLASS_NAMES = (
    "alarm", "dog", "speech", "engine", "rain",
    "bell", "water", "music", "bird", "door",
)
DEFAULT_T = 32
DEFAULT_F_IN = 16
DEFAULT_E = 10
DEFAULT_SIGMA = 0.1
SPLIT_FRACTIONS = (("train", 0.8), ("val", 0.1), ("test", 0.1))


@dataclass
class EventClass:
    id: int
    name: str
    name_token: int
    prototype: np.ndarray
    min_dur: int = 3
    max_dur: int = 12


@dataclass
class Vocabulary:
    tokens: list
    classes: list
    seed: int = 0

    @property
    def size(self):
        return len(self.tokens)

    @property
    def F_in(self):
        return self.classes[0].prototype.shape[0]

    def token_id(self, word):
        return self.tokens.index(word)

    @property
    def class_names(self):
        return [c.name for c in self.classes]

    @property
    def prototypes(self):
        return np.stack([c.prototype for c in self.classes])


@dataclass
class SyntheticClip:
    id: int
    seed: int
    T: int
    events: list  # [(class_id, onset, offset)], offset exclusive
    caption: list  # token ids
    sigma: float

    def to_json(self):
        return {
            "id": self.id,
            "seed": self.seed,
            "T": self.T,
            "events": [list(e) for e in self.events],
            "caption": list(self.caption),
            "sigma": self.sigma,
        }


@dataclass
class CorpusManifest:
    vocab: Vocabulary
    T: int
    splits: dict
    seed: int
    max_events: int = 3
    version: str = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    @property
    def F_in(self):
        return self.vocab.F_in


def class_name(i):
    return CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"class{i}"


def gen_vocabulary(E=DEFAULT_E, F_in=DEFAULT_F_IN, seed=0, max_cos=0.5, max_tries=10000):
    """Event classes with unit prototypes, pairwise cosine < ``max_cos``."""
    if E < 2:
        raise ParameterError("need at least two event classes")
    if F_in < 1:
        raise ParameterError("F_in must be positive")
    rng = np.random.default_rng([seed, 0x766F63])
    protos = []
    tries = 0
    while len(protos) < E:
        tries += 1
        if tries > max_tries:
            raise GenerationError(f"could not place {E} prototypes in {F_in} dims with cosine < {max_cos}")
        v = rng.standard_normal(F_in)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ p)) < max_cos for p in protos):
            protos.append(v)
    tokens = list(FILLERS)
    classes = []
    for i, p in enumerate(protos):
        lo = int(rng.integers(2, 6))
        hi = int(rng.integers(lo + 3, lo + 10))
        classes.append(EventClass(i, class_name(i), len(tokens), p, lo, hi))
        tokens.append(class_name(i))
    return Vocabulary(tokens, classes, seed)


def build_caption(vocab, events):
    """Template caption for events ordered by onset."""
    names = [vocab.classes[c].name_token for c, _, _ in sorted(events, key=lambda e: (e[1], e[0]))]
    t = vocab.token_id
    if len(names) == 1:
        return [t("a"), names[0], t("sound")]
    if len(names) == 2:
        return [names[0], t("then"), names[1]]
    if len(names) == 3:
        return [names[0], t("and"), names[1], t("with"), names[2]]
    raise GenerationError("captions support 1-3 events")


def render_frames(vocab, T, events, sigma, seed):
    """Frames for a clip spec; bit-exact for a given (spec, seed)."""
    frames = np.zeros((T, vocab.F_in))
    for c, on, off in events:
        frames[on:off] += vocab.classes[c].prototype
    if sigma > 0:
        frames += sigma * np.random.default_rng([seed, 1]).standard_normal((T, vocab.F_in))
    return frames


def gen_clip(vocab, T=DEFAULT_T, max_events=3, noise_sigma=DEFAULT_SIGMA, seed=0, clip_id=0):
    """Sample one clip. Returns (SyntheticClip, frames)."""
    if T < 4:
        raise ParameterError("clips need at least 4 frames")
    if not 1 <= max_events <= 3:
        raise ParameterError("max_events must be in 1..3")
    rng = np.random.default_rng([seed, 0])
    n = int(rng.integers(1, min(max_events, len(vocab.classes)) + 1))
    cls = rng.choice(len(vocab.classes), size=n, replace=False)
    events = []
    for c in cls:
        ec = vocab.classes[int(c)]
        dur = int(rng.integers(ec.min_dur, ec.max_dur + 1))
        dur = max(1, min(dur, T))
        on = int(rng.integers(0, T - dur + 1))
        events.append((int(c), on, on + dur))
    events.sort(key=lambda e: (e[1], e[0]))
    clip = SyntheticClip(clip_id, int(seed), T, events, build_caption(vocab, events), float(noise_sigma))
    return clip, render_frames(vocab, T, events, noise_sigma, seed)


def clip_frames(vocab, clip):
    return render_frames(vocab, clip.T, clip.events, clip.sigma, clip.seed)


def check_clip(vocab, clip):
    """Generator postconditions; raises FormatError on violation."""
    if not 1 <= len(clip.events) <= 3:
        raise FormatError(f"clip {clip.id}: {len(clip.events)} events")
    for c, on, off in clip.events:
        if not (0 <= c < len(vocab.classes) and 0 <= on < off <= clip.T):
            raise FormatError(f"clip {clip.id}: bad event {(c, on, off)}")
    named = sorted(t for t in clip.caption if t >= len(FILLERS))
    expect = sorted(vocab.classes[c].name_token for c, _, _ in clip.events)
    if named != expect:
        raise FormatError(f"clip {clip.id}: caption does not name exactly its events")


def gen_corpus(n_clips, E=DEFAULT_E, F_in=DEFAULT_F_IN, T=DEFAULT_T, sigma=DEFAULT_SIGMA, seed=0, max_events=3):
    """Manifest plus clips with an 80/10/10 train/val/test split."""
    if n_clips < 3:
        raise ParameterError("need at least 3 clips to populate every split")
    vocab = gen_vocabulary(E, F_in, seed)
    seeds = np.random.SeedSequence(seed).generate_state(n_clips, dtype=np.uint32)
    clips = [gen_clip(vocab, T, max_events, sigma, int(s), i)[0] for i, s in enumerate(seeds)]
    order = np.random.default_rng([seed, 2]).permutation(n_clips)
    n_train = int(round(n_clips * SPLIT_FRACTIONS[0][1]))
    n_val = max(1, int(round(n_clips * SPLIT_FRACTIONS[1][1])))
    n_train = min(n_train, n_clips - n_val - 1)
    splits = {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val:]),
    }
    return CorpusManifest(vocab, T, splits, seed, max_events), clips


# ---------------------------------------------------------------------------
# serialization


def _manifest_json(m):
    return {
        "version": m.version,
        "F_in": m.F_in,
        "T": m.T,
        "seed": m.seed,
        "max_events": m.max_events,
        "vocabulary": {
            "seed": m.vocab.seed,
            "tokens": m.vocab.tokens,
            "classes": [
                {
                    "id": c.id,
                    "name": c.name,
                    "token": c.name_token,
                    "min_dur": c.min_dur,
                    "max_dur": c.max_dur,
                    # float.hex keeps prototypes bit-exact through JSON
                    "prototype": [float(x).hex() for x in c.prototype],
                }
                for c in m.vocab.classes
            ],
        },
        "splits": m.splits,
        **({"extra": m.extra} if m.extra else {}),
    }


def write_corpus(manifest, clips, path):
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(_manifest_json(manifest), fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(path, "clips.jsonl"), "w", encoding="utf-8") as fh:
        for c in clips:
            fh.write(json.dumps(c.to_json(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")
    os.makedirs(os.path.join(path, "splits"), exist_ok=True)
    for name, ids in manifest.splits.items():
        with open(os.path.join(path, "splits", f"{name}.txt"), "w", encoding="utf-8") as fh:
            fh.writelines(f"{i}\n" for i in ids)


def _parse_manifest(obj):
    if obj.get("version") != FORMAT_VERSION:
        raise FormatError(f"manifest version {obj.get('version')!r}, expected {FORMAT_VERSION!r}")
    try:
        v = obj["vocabulary"]
        classes = [
            EventClass(
                int(c["id"]), c["name"], int(c["token"]),
                np.array([float.fromhex(x) for x in c["prototype"]]),
                int(c["min_dur"]), int(c["max_dur"]),
            )
            for c in v["classes"]
        ]
        vocab = Vocabulary(list(v["tokens"]), classes, int(v["seed"]))
        splits = {k: [int(i) for i in ids] for k, ids in obj["splits"].items()}
        return CorpusManifest(vocab, int(obj["T"]), splits, int(obj["seed"]),
                              int(obj.get("max_events", 3)), obj["version"], obj.get("extra", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed manifest: {exc}") from exc


def read_corpus(path):
    """Inverse of :func:`write_corpus`. Returns (manifest, clips)."""
    try:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
            mobj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json: {exc}") from exc
    manifest = _parse_manifest(mobj)
    clips = []
    with open(os.path.join(path, "clips.jsonl"), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                raise FormatError(f"clips.jsonl line {lineno}: truncated record")
            try:
                o = json.loads(line)
                clip = SyntheticClip(
                    int(o["id"]), int(o["seed"]), int(o["T"]),
                    [tuple(int(x) for x in e) for e in o["events"]],
                    [int(t) for t in o["caption"]], float(o["sigma"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"clips.jsonl line {lineno}: {exc}") from exc
            try:
                check_clip(manifest.vocab, clip)
            except FormatError as exc:
                raise FormatError(f"clips.jsonl line {lineno}: {exc}") from exc
            clips.append(clip)
    ids = {c.id for c in clips}
    seen = set()
    for name, split in manifest.splits.items():
        s = set(split)
        if s & seen:
            raise FormatError(f"split {name!r} overlaps another split")
        if not s <= ids:
            raise FormatError(f"split {name!r} references unknown clip ids")
        seen |= s
    return manifest, clips


class Corpus:
    """Loaded corpus with frames materialized per split on demand."""

    def __init__(self, manifest, clips):
        self.manifest = manifest
        self.clips = {c.id: c for c in clips}
        self._frames = {}

    @classmethod
    def load(cls, path):
        return cls(*read_corpus(path))

    @property
    def vocab(self):
        return self.manifest.vocab

    def split(self, name):
        if name not in self.manifest.splits:
            raise ParameterError(f"unknown split {name!r}; have {sorted(self.manifest.splits)}")
        return [self.clips[i] for i in self.manifest.splits[name]]

    def frames(self, clip):
        f = self._frames.get(clip.id)
        if f is None:
            f = clip_frames(self.vocab, clip)
            self._frames[clip.id] = f
        return f

    def frames_batch(self, clips):
        return np.stack([self.frames(c) for c in clips])
