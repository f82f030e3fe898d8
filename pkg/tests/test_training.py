import json
import math
import os

import numpy as np
import pytest

from mgaclap import losses, model as mdl, training as T
from mgaclap.errors import ConfigError, FormatError, NumericAbort, WiringError

TINY = {
    "model.d": 8,
    "model.D": 8,
    "model.M": 16,
    "model.audio_blocks": 2,
    "model.text_blocks": 1,
    "train.batch_size": 8,
    "train.epochs": 2,
}

TOGGLES = {
    "baseline": {"model.use_codebook": False, "model.locality_last": False, "model.use_hard_negative": False},
    "mc": {"model.use_codebook": True, "model.locality_last": False, "model.use_hard_negative": False},
    "lb": {"model.use_codebook": False, "model.locality_last": True, "model.use_hard_negative": False},
    "mc_lb": {"model.use_codebook": True, "model.locality_last": True, "model.use_hard_negative": False},
    "full": {"model.use_codebook": True, "model.locality_last": True, "model.use_hard_negative": True},
}


def _cfg(**kw):
    return T.TrainConfig.from_flat({**TINY, **kw})


# optimizer

def _state(rng):
    p = {"a": rng.standard_normal(4), "b": rng.standard_normal((2, 3))}
    return T.TrainState.fresh({k: v.copy() for k, v in p.items()}), p


def test_adam_zero_gradient_keeps_params(rng):
    st, p0 = _state(rng)
    T.adam_step(st, {k: np.zeros_like(v) for k, v in p0.items()}, 0.1)
    for k in p0:
        np.testing.assert_array_equal(st.params[k], p0[k])


def test_adam_first_step_is_signed_lr(rng):
    st, p0 = _state(rng)
    g = {k: rng.standard_normal(v.shape) for k, v in p0.items()}
    T.adam_step(st, g, 0.01)
    for k in p0:
        # |g| / (|g| + eps) is 1 up to eps / |g|
        np.testing.assert_allclose(st.params[k] - p0[k], -0.01 * np.sign(g[k]), atol=1e-8)


def test_adam_two_step_moments():
    st = T.TrainState.fresh({"x": np.array([1.0])})
    T.adam_step(st, {"x": np.array([2.0])}, 0.1)
    T.adam_step(st, {"x": np.array([-1.0])}, 0.1)
    m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0  # 0.08
    v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0  # 0.004996
    assert st.m["x"][0] == pytest.approx(m, abs=1e-15)
    assert st.v["x"][0] == pytest.approx(v, abs=1e-15)
    step2 = 0.1 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    step1 = 0.1 * 2.0 / (2.0 + 1e-8)
    assert st.params["x"][0] == pytest.approx(1.0 - step1 - step2, abs=1e-14)
    assert st.step == 2


def test_adam_rejects_mismatched_keys(rng):
    st, _ = _state(rng)
    with pytest.raises(WiringError):
        T.adam_step(st, {"a": np.zeros(4)}, 0.1)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert T.clip_global_norm(g, 1.0) == 5.0
    np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])


def test_renormalize_codewords():
    p = {"codebook.z": np.array([[2.0, 0.0], [0.0, 1.0]])}
    T.renormalize_codewords(p)
    np.testing.assert_array_equal(p["codebook.z"], [[1.0, 0.0], [0.0, 1.0]])


# config

def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError, match="model.eta"):
        T.TrainConfig.from_flat({"model.etaa": 1})


def test_variant_pooling_without_codebook_rejected():
    with pytest.raises(ConfigError):
        _cfg(**{"model.use_codebook": False, "model.pooling": "mean"})


def test_config_text_round_trip_and_precedence(tmp_path):
    cfg = _cfg(**{"model.eta": 0.3})
    path = tmp_path / "c.txt"
    path.write_text(T.format_config(cfg, with_help=True))
    again = T.load_config(path)
    assert again.to_flat() == cfg.to_flat() and again.hash() == cfg.hash()
    assert T.load_config(path, ["model.eta=0.9"]).model.eta == 0.9


def test_hash_ignores_epochs_and_paths():
    a = _cfg()
    assert a.hash() == _cfg(**{"train.epochs": 9, "paths.out": "x"}).hash()
    assert a.hash() != _cfg(**{"train.seed": 2}).hash()


# checkpoints

def test_checkpoint_round_trip_bytes_and_forward(small_corpus, tmp_path):
    cfg = _cfg(**{"train.epochs": 1})
    res = T.train(cfg, small_corpus)
    p1 = tmp_path / "a.ckpt"
    T.save_checkpoint(res.state, p1)
    st = T.load_checkpoint(p1, expect_hash=cfg.hash())
    T.save_checkpoint(st, tmp_path / "b.ckpt")
    assert p1.read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert sorted(st.params) == sorted(res.state.params)
    frames = small_corpus.frames_batch(small_corpus.split("val")[:4])
    a = mdl.Model(cfg.model, res.state.params).embed_audio(frames)[1]
    b = mdl.Model(cfg.model, st.params).embed_audio(frames)[1]
    np.testing.assert_array_equal(a, b)


def test_checkpoint_hash_mismatch(small_corpus, tmp_path):
    st = T.init_state(_cfg(), small_corpus)
    T.save_checkpoint(st, tmp_path / "c.ckpt")
    with pytest.raises(ConfigError, match="hash"):
        T.load_checkpoint(tmp_path / "c.ckpt", expect_hash=_cfg(**{"train.seed": 7}).hash())


def test_checkpoint_format_errors(small_corpus, tmp_path):
    data = T.checkpoint_bytes(T.init_state(_cfg(), small_corpus))
    with pytest.raises(FormatError, match="magic"):
        T.parse_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="version"):
        T.parse_checkpoint(data[:4] + (2).to_bytes(4, "little") + data[8:])
    with pytest.raises(FormatError, match="truncated"):
        T.parse_checkpoint(data[:-20])
    with pytest.raises(FormatError, match="trailing"):
        T.parse_checkpoint(data + b"\0")


# training loop

def test_zero_lr_leaves_params_and_metrics_fixed(small_corpus):
    cfg = _cfg(**{"optimizer.lr": 0})
    before = T.init_state(cfg, small_corpus).params
    res = T.train(cfg, small_corpus)
    for k in before:
        assert res.state.params[k].tobytes() == before[k].tobytes()
    by_epoch = {}
    for e, s, m, v in res.metrics:
        if m != "loss":
            by_epoch.setdefault(m, set()).add(v)
    assert all(len(v) == 1 for v in by_epoch.values())


def test_same_seed_same_metrics(small_corpus):
    a = T.train(_cfg(), small_corpus).metrics
    b = T.train(_cfg(), small_corpus).metrics
    assert a == b


def test_resume_continues_step_and_history(small_corpus, tmp_path):
    out = str(tmp_path / "run")
    full = T.train(_cfg(**{"train.epochs": 2}), small_corpus)
    T.train(_cfg(**{"train.epochs": 1, "paths.out": out}), small_corpus)
    first = T.load_checkpoint(os.path.join(out, "last.ckpt"))
    res = T.train(_cfg(**{"train.epochs": 2, "paths.out": out, "paths.resume": os.path.join(out, "last.ckpt")}), small_corpus)
    assert res.state.step == 2 * first.step and res.state.epoch == 2
    for k in full.state.params:
        np.testing.assert_array_equal(res.state.params[k], full.state.params[k])
    assert res.metrics == full.metrics
    assert T.read_metrics_csv(os.path.join(out, "metrics.csv")) == full.metrics


def test_nan_loss_aborts_with_dump(small_corpus, tmp_path, monkeypatch):
    def bad(*args, **kw):
        return float("nan"), {}, None

    monkeypatch.setattr(T, "batch_loss", bad)
    with pytest.raises(NumericAbort) as info:
        T.train(_cfg(**{"paths.out": str(tmp_path)}), small_corpus)
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["epoch"] == 1 and dump["batch"] == 0 and len(dump["clip_ids"]) == 8
    assert "codebook.z" in dump["param_norms"]
    assert str(tmp_path) in str(info.value)


def test_outputs_written(small_corpus, tmp_path):
    cfg = _cfg(**{"paths.out": str(tmp_path)})
    T.train(cfg, small_corpus)
    for name in ("config.txt", "best.ckpt", "last.ckpt", "metrics.csv"):
        assert (tmp_path / name).exists()
    m, cfg2, st = T.load_model(str(tmp_path / "last.ckpt"))
    assert cfg2.hash() == cfg.hash() and st.epoch == 2


def test_baseline_is_mean_pool_plus_plain_loss(small_corpus, rng):
    cfg = _cfg(**TOGGLES["baseline"], **{"train.dtype": "float64"})
    params = T.init_state(cfg, small_corpus).params
    clips = small_corpus.split("train")[:6]
    frames = small_corpus.frames_batch(clips)
    caps = [c.caption for c in clips]
    loss, _, _ = mdl.batch_loss(cfg.model, params, frames, caps)
    m = mdl.Model(cfg.model, params)
    _, ga, wa = m.embed_audio(frames)
    _, gt, _ = m.embed_text(caps)
    assert wa is None
    S = losses.similarity_matrix(ga, gt)[0]
    lc = losses.LossConfig(log_tau=float(params["loss.log_tau"]))
    assert loss == pytest.approx(losses.clap_loss(S, lc), abs=1e-12)


@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(TOGGLES))
def test_training_loss_decreases_on_default_toy(name, default_corpus):
    cfg = T.TrainConfig.from_flat({**TOGGLES[name], "train.epochs": 5})
    res = T.train(cfg, default_corpus)
    loss = [v for e, s, m, v in res.metrics if m == "loss"]
    assert loss[-1] < loss[0], loss
