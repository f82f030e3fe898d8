"""Training loop, Adam, flat key=value configs and the binary checkpoint format.

Checkpoint layout (little-endian)::

    b"MGAC"  u32 version=1  u32 n_entries
    per entry: u16 name_len, name (utf-8), u8 dtype (0=f32, 1=f64), u8 ndim,
               u32 dims[ndim], raw payload
    u64 config_hash

Entries are written in sorted name order: model parameters under their own
names, Adam moments as ``adam.m/<name>`` and ``adam.v/<name>``, counters as
``state.step`` and ``state.epoch``.
"""

import copy
import csv
import hashlib
import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import evaluation
from .data import Corpus
from .errors import ConfigError, FormatError, NumericAbort, WiringError
from .losses import clamp_log_tau
from .model import Model, ModelConfig, batch_loss, init_params

log = logging.getLogger(__name__)

MAGIC = b"MGAC"
CKPT_VERSION = 1
MAX_TOKENS = 8

# key -> (attribute, type, default, help). Model keys map onto ModelConfig.
_MODEL_KEYS = {
    "model.use_codebook": ("use_codebook", bool, "shared codebook aggregator (else mean pooling)"),
    "model.locality_last": ("locality_last", bool, "locality-aware last audio block"),
    "model.use_hard_negative": ("use_hard_negative", bool, "difficulty-weighted negatives"),
    "model.pooling": ("pooling", str, "frame pooling inside the affinity: max|mean"),
    "model.norm": ("norm", str, "affinity normalizer: sparsemax|softmax"),
    "model.d": ("d", int, "encoder width"),
    "model.D": ("D", int, "joint embedding width"),
    "model.audio_blocks": ("audio_blocks", int, "audio encoder depth"),
    "model.text_blocks": ("text_blocks", int, "text encoder depth"),
    "model.M": ("M", int, "number of codewords"),
    "model.eta": ("eta", float, "affinity scaling term"),
    "loss.gamma": ("gamma", float, "hardness ratio of the difficulty scores"),
    "loss.tau_init": ("tau_init", float, "initial temperature"),
    "loss.stop_grad_weights": ("stop_grad_weights", bool, "treat difficulty scores as constants"),
    "loss.reduction": ("reduction", str, "mean|sum over the batch"),
}
_TRAIN_KEYS = {
    "optimizer.lr": ("lr", float, 1e-3, "Adam learning rate"),
    "optimizer.beta1": ("beta1", float, 0.9, "Adam first-moment decay"),
    "optimizer.beta2": ("beta2", float, 0.999, "Adam second-moment decay"),
    "optimizer.eps": ("eps", float, 1e-8, "Adam epsilon"),
    "optimizer.clip_norm": ("clip_norm", float, 1.0, "global gradient-norm clip (0 disables)"),
    "train.batch_size": ("batch_size", int, 32, "pairs per batch"),
    "train.epochs": ("epochs", int, 30, "passes over the training split"),
    "train.seed": ("seed", int, 1, "initialization and shuffling seed"),
    "train.dtype": ("dtype", str, "float32", "parameter precision: float32|float64"),
    "paths.corpus": ("corpus", str, "", "corpus directory"),
    "paths.out": ("out", str, "", "output directory (checkpoints, metrics.csv)"),
    "paths.resume": ("resume", str, "", "checkpoint to resume from"),
}
# excluded from the config hash: they do not change the trajectory's identity
_UNHASHED = {"train.epochs", "paths.corpus", "paths.out", "paths.resume"}


def _parse_bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _convert(key, typ, raw):
    try:
        if typ is bool:
            return raw if isinstance(raw, bool) else _parse_bool(raw)
        return typ(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 32
    epochs: int = 30
    seed: int = 1
    dtype: str = "float32"
    corpus: str = ""
    out: str = ""
    resume: str = ""

    @staticmethod
    def valid_keys():
        return sorted(list(_MODEL_KEYS) + list(_TRAIN_KEYS))

    @classmethod
    def from_flat(cls, flat):
        unknown = sorted(set(flat) - set(cls.valid_keys()))
        if unknown:
            raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {', '.join(cls.valid_keys())}")
        mkw = {}
        for key, (attr, typ, _) in _MODEL_KEYS.items():
            if key in flat:
                mkw[attr] = _convert(key, typ, flat[key])
        tkw = {}
        for key, (attr, typ, _, _) in _TRAIN_KEYS.items():
            if key in flat:
                tkw[attr] = _convert(key, typ, flat[key])
        cfg = cls(model=ModelConfig(**mkw), **tkw)
        return cfg.validate()

    def validate(self):
        self.model.validate()
        if self.lr < 0 or self.batch_size < 2 or self.epochs < 0 or self.clip_norm < 0:
            raise ConfigError("need lr >= 0, batch_size >= 2, epochs >= 0, clip_norm >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("need 0 <= beta1, beta2 < 1 and eps > 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")
        return self

    def to_flat(self):
        out = {}
        for key, (attr, _, _) in _MODEL_KEYS.items():
            out[key] = getattr(self.model, attr)
        for key, (attr, _, _, _) in _TRAIN_KEYS.items():
            out[key] = getattr(self, attr)
        return out

    def with_overrides(self, **flat):
        merged = self.to_flat()
        merged.update(flat)
        return TrainConfig.from_flat(merged)

    def hash(self):
        """64-bit digest of every trajectory-relevant setting."""
        text = "\n".join(f"{k}={_fmt(v)}" for k, v in sorted(self.to_flat().items()) if k not in _UNHASHED)
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg, with_help=False):
    lines = []
    helps = {k: h for k, (_, _, h) in _MODEL_KEYS.items()}
    helps.update({k: h for k, (_, _, _, h) in _TRAIN_KEYS.items()})
    for k, v in sorted(cfg.to_flat().items()):
        if with_help:
            lines.append(f"# {helps[k]}")
        lines.append(f"{k}={_fmt(v)}")
    return "\n".join(lines) + "\n"


def parse_config_text(text):
    """Flat ``key=value`` lines; '#' starts a comment."""
    flat = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        flat[k.strip()] = v.strip()
    return flat


def load_config(path=None, overrides=()):
    """File values, then ``key=value`` overrides on top."""
    flat = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            flat.update(parse_config_text(fh.read()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        flat[k.strip()] = v.strip()
    return TrainConfig.from_flat(flat)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int = 0
    epoch: int = 0
    config_hash: int = 0

    @classmethod
    def fresh(cls, params, config_hash=0):
        return cls(
            params,
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
            0, 0, config_hash,
        )


def adam_step(state, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update of ``state.params``."""
    missing = set(state.params) ^ set(grads)
    if missing:
        raise WiringError(f"gradient keys do not match parameters: {sorted(missing)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k in sorted(state.params):
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        state.params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_global_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        for g in grads.values():
            g *= s
    return total


def renormalize_codewords(params, tol=1e-6):
    """Rescale codewords whose norm drifted from 1 by more than ``tol``."""
    Z = params.get("codebook.z")
    if Z is None:
        return
    n = np.linalg.norm(Z, axis=1)
    off = np.abs(n - 1.0) > tol
    if off.any():
        Z[off] /= n[off, None]


# ---------------------------------------------------------------------------
# checkpoints


def _state_entries(state):
    entries = {}
    for k, p in state.params.items():
        entries[k] = p
        entries[f"adam.m/{k}"] = state.m[k]
        entries[f"adam.v/{k}"] = state.v[k]
    entries["state.step"] = np.array(float(state.step))
    entries["state.epoch"] = np.array(float(state.epoch))
    return entries


def checkpoint_bytes(state):
    entries = _state_entries(state)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(entries)))
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        if arr.dtype == np.float32:
            code = 0
        else:
            arr = arr.astype(np.float64, copy=False)
            code = 1
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    buf.write(struct.pack("<Q", state.config_hash))
    return buf.getvalue()


def save_checkpoint(state, path):
    data = checkpoint_bytes(state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def parse_checkpoint(data):
    mv = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(mv):
            raise FormatError(f"checkpoint truncated at byte {pos}")
        out = mv[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in (0, 1):
            raise FormatError(f"entry {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = np.dtype("<f4" if code == 0 else "<f8")
        n = int(np.prod(dims)) if ndim else 1
        entries[name] = np.frombuffer(bytes(take(n * dt.itemsize)), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    (chash,) = struct.unpack("<Q", take(8))
    if pos != len(mv):
        raise FormatError("trailing bytes after checkpoint")
    return entries, chash


def load_checkpoint(path, expect_hash=None):
    with open(path, "rb") as fh:
        entries, chash = parse_checkpoint(fh.read())
    if expect_hash is not None and chash != expect_hash:
        raise ConfigError(f"checkpoint config hash {chash:#018x} does not match config {expect_hash:#018x}")
    params = {k: v for k, v in entries.items() if not k.startswith(("adam.", "state."))}
    try:
        m = {k: entries[f"adam.m/{k}"] for k in params}
        v = {k: entries[f"adam.v/{k}"] for k in params}
        step = int(entries["state.step"])
        epoch = int(entries["state.epoch"])
    except KeyError as exc:
        raise FormatError(f"checkpoint missing entry {exc}") from exc
    return TrainState(params, m, v, step, epoch, chash)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    state: TrainState
    best_params: dict
    best_epoch: int
    metrics: list  # (epoch, split, metric, value)

    def model(self, cfg, best=True):
        return Model(cfg.model, self.best_params if best else self.state.params)


def write_metrics_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "metric", "value"])
        for e, s, m, v in rows:
            w.writerow([e, s, m, repr(float(v))])


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["epoch", "split", "metric", "value"]:
        raise FormatError(f"{path}: not a metrics file")
    return [(int(e), s, m, float(v)) for e, s, m, v in rows[1:]]


def _val_score(rows, epoch):
    vals = {m: v for e, s, m, v in rows if e == epoch and s == "val"}
    return 0.5 * (vals.get("t2a_r1", 0.0) + vals.get("a2t_r1", 0.0))


def _batches(ids, batch_size, rng):
    order = rng.permutation(len(ids))
    for i in range(0, len(order), batch_size):
        chunk = order[i:i + batch_size]
        if len(chunk) >= 2:
            yield [ids[j] for j in chunk]


def _nan_dump(out_dir, epoch, batch_no, clip_ids, params, loss):
    info = {
        "epoch": epoch,
        "batch": batch_no,
        "clip_ids": clip_ids,
        "loss": repr(loss),
        "param_norms": {k: repr(float(np.linalg.norm(v))) for k, v in sorted(params.items())},
    }
    path = os.path.join(out_dir or ".", "nan_dump.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=1)
    return path


def init_state(cfg, corpus):
    m = corpus.manifest
    params = init_params(cfg.model, m.vocab.size, m.F_in, m.T, MAX_TOKENS, cfg.seed, np.dtype(cfg.dtype))
    return TrainState.fresh(params, cfg.hash())


def train(cfg, corpus=None, on_epoch=None):
    """Train per ``cfg``. Writes checkpoints and metrics.csv when ``cfg.out`` is set."""
    cfg.validate()
    if corpus is None:
        corpus = Corpus.load(cfg.corpus)
    if cfg.resume:
        state = load_checkpoint(cfg.resume, expect_hash=cfg.hash())
    else:
        state = init_state(cfg, corpus)
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        with open(os.path.join(cfg.out, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_config(cfg))

    train_clips = corpus.split("train")
    val_clips = corpus.split("val")
    by_id = {c.id: c for c in train_clips}
    ids = [c.id for c in train_clips]
    metrics = []
    best_score, best_epoch = -1.0, state.epoch
    best_params = copy.deepcopy(state.params)
    if cfg.resume and cfg.out:
        # carry the history of the run being continued
        prev = os.path.join(cfg.out, "metrics.csv")
        if os.path.exists(prev):
            metrics = [r for r in read_metrics_csv(prev) if r[0] <= state.epoch]
        for e in sorted({r[0] for r in metrics}):
            if _val_score(metrics, e) > best_score:
                best_score, best_epoch = _val_score(metrics, e), e
        best_path = os.path.join(cfg.out, "best.ckpt")
        if best_score >= 0 and os.path.exists(best_path):
            best_params = load_checkpoint(best_path, expect_hash=cfg.hash()).params

    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch, 0x747261])
        losses_ = []
        for bno, batch_ids in enumerate(_batches(ids, cfg.batch_size, rng)):
            clips = [by_id[i] for i in batch_ids]
            loss, grads, _ = batch_loss(cfg.model, state.params, corpus.frames_batch(clips), [c.caption for c in clips])
            if not np.isfinite(loss):
                path = _nan_dump(cfg.out, epoch, bno, batch_ids, state.params, loss)
                raise NumericAbort(f"non-finite loss at epoch {epoch}, batch {bno}; diagnostics in {path}", path)
            clip_global_norm(grads, cfg.clip_norm)
            adam_step(state, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            renormalize_codewords(state.params)
            state.params["loss.log_tau"][...] = clamp_log_tau(float(state.params["loss.log_tau"]))
            losses_.append(loss)
        state.epoch = epoch

        model = Model(cfg.model, state.params)
        ret = evaluation.eval_retrieval(model, corpus, val_clips)
        rows = [
            (epoch, "train", "loss", float(np.mean(losses_)) if losses_ else float("nan")),
            (epoch, "train", "tau", float(np.exp(state.params["loss.log_tau"]))),
            (epoch, "val", "t2a_r1", ret.t2a_r1),
            (epoch, "val", "t2a_r5", ret.t2a_r5),
            (epoch, "val", "a2t_r1", ret.a2t_r1),
            (epoch, "val", "a2t_r5", ret.a2t_r5),
        ]
        metrics.extend(rows)
        score = 0.5 * (ret.t2a_r1 + ret.a2t_r1)
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_params = copy.deepcopy(state.params)
            if cfg.out:
                save_checkpoint(state, os.path.join(cfg.out, "best.ckpt"))
        log.info("epoch %d loss %.4f val R@1 t2a %.1f a2t %.1f", epoch, rows[0][3], ret.t2a_r1, ret.a2t_r1)
        if on_epoch is not None:
            on_epoch(epoch, rows)
        if cfg.out:
            save_checkpoint(state, os.path.join(cfg.out, "last.ckpt"))
            write_metrics_csv(metrics, os.path.join(cfg.out, "metrics.csv"))
    return TrainResult(state, best_params, best_epoch, metrics)


def load_model(checkpoint, config_path=None):
    """Model from a checkpoint; config defaults to ``config.txt`` next to it."""
    if config_path is None:
        config_path = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "config.txt")
    cfg = load_config(config_path)
    state = load_checkpoint(checkpoint, expect_hash=cfg.hash())
    return Model(cfg.model, state.params), cfg, state


