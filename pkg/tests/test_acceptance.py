"""Acceptance criteria 1-9. Each test carries ``acceptance(n, title)``; the
terminal summary prints one PASS/FAIL line per criterion."""

import os
import shutil
import time

import numpy as np
import pytest

from mgaclap import codebook as cbk
from mgaclap import cli, data, encoders as enc, gradsuite, losses, model as mdl, numerics as nm, training as T
from mgaclap.evaluation import export_similarity_heatmap, read_heatmap_csv
from oracles import qp_sparsemax, symmetric_infonce

SEEDS = (1, 2, 3)


def _detail(request, text):
    request.node.user_properties.append(("detail", text))
    print(text)


def _files(path):
    out = {}
    for root, _, names in os.walk(path):
        for n in names:
            p = os.path.join(root, n)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, path)] = fh.read()
    return out


# 1

@pytest.mark.acceptance(1, "sparsemax matches the QP oracle")
def test_sparsemax_oracle(request):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, worst_shift = 0.0, 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 13))
        x = rng.standard_normal(n) * rng.choice([0.1, 1.0, 5.0])
        p = nm.sparsemax(x)
        worst = max(worst, float(np.abs(p - qp_sparsemax(x)).max()))
        c = float(rng.integers(-8, 9))
        worst_shift = max(worst_shift, float(np.abs(nm.sparsemax(x + c) - p).max()))
    elapsed = time.perf_counter() - t0
    _detail(request, f"max |diff| {worst:.1e}, shift {worst_shift:.1e}, {elapsed:.1f}s")
    assert worst < 1e-10
    assert worst_shift < 1e-10
    assert elapsed < 10


# 2

@pytest.mark.acceptance(2, "gradient suite")
def test_gradient_suite(request):
    t0 = time.perf_counter()
    rows = gradsuite.run_suite(points=100, seed=0)
    elapsed = time.perf_counter() - t0
    print(gradsuite.format_rows(rows))
    names = {r.name for r in rows}
    assert {"clap_loss", "hn_clap_loss[stop_grad]", "end_to_end"} <= names
    bad = [r.name for r in rows if not r.ok or r.points < 100]
    worst = max(r.max_rel_error for r in rows)
    _detail(request, f"{len(rows)} checks, worst {worst:.1e}, {elapsed:.0f}s")
    assert not bad, bad
    for r in rows:
        assert r.max_rel_error < (gradsuite.LINEAR_TOL if r.tol == gradsuite.LINEAR_TOL else gradsuite.NONLINEAR_TOL)
    assert elapsed < 120


# 3

@pytest.mark.acceptance(3, "hard-negative loss at gamma=0 equals the plain loss")
def test_gamma_zero_identity(request):
    rng = np.random.default_rng(303)
    worst, worst_sum = 0.0, 0.0
    for B in (2, 8, 32):
        for _ in range(100):
            a, t = rng.standard_normal((B, 6)), rng.standard_normal((B, 6))
            S = losses.similarity_matrix(a, t)[0]
            log_tau = float(rng.uniform(np.log(0.02), np.log(0.5)))
            c0 = losses.LossConfig(gamma=0.0, log_tau=log_tau)
            worst = max(worst, abs(losses.hn_clap_loss(S, c0) - losses.clap_loss(S, c0)))
            alpha, beta = losses.difficulty_scores(S, losses.LossConfig(gamma=float(rng.uniform(0, 1)), log_tau=log_tau))
            worst_sum = max(worst_sum, float(np.abs(alpha.sum(1) - B).max()), float(np.abs(beta.sum(1) - B).max()))
    _detail(request, f"max |diff| {worst:.1e}, row-sum err {worst_sum:.1e}")
    assert worst <= 1e-12
    assert worst_sum <= 1e-9


# 4

@pytest.mark.acceptance(4, "locality block is position-wise")
def test_locality_contract(request):
    rng = np.random.default_rng(404)
    exact, vanilla_moved = 0, 0
    for trial in range(100):
        d, T_ = 8, int(rng.integers(2, 12))
        bp = enc.block_params(enc.init_block(rng, "b", d), "b")
        u = rng.standard_normal((T_, d))
        target = int(rng.integers(T_))
        other = int(rng.choice([i for i in range(T_) if i != target]))
        v = u.copy()
        v[other] += rng.standard_normal(d)
        exact += np.array_equal(enc.locality_block(u, bp)[target], enc.locality_block(v, bp)[target])
        vanilla_moved += not np.array_equal(enc.vanilla_block(u, bp)[target], enc.vanilla_block(v, bp)[target])
    _detail(request, f"locality unchanged {exact}/100, vanilla changed {vanilla_moved}/100")
    assert exact == 100
    assert vanilla_moved >= 99


# 5

@pytest.mark.acceptance(5, "baseline equals the plain contrastive pipeline")
def test_baseline_equivalence(request):
    corpus = data.Corpus(*data.gen_corpus(40, seed=11))
    cfg = T.TrainConfig.from_flat({
        "model.use_codebook": False, "model.locality_last": False, "model.use_hard_negative": False,
        "train.dtype": "float64",
    })
    assert cfg.model.is_baseline
    params = T.init_state(cfg, corpus).params
    assert "codebook.z" not in params
    clips = corpus.split("train")[:16]
    frames = corpus.frames_batch(clips)
    caps = [c.caption for c in clips]
    loss, _, info = mdl.batch_loss(cfg.model, params, frames, caps)
    assert info["audio_weights"] is None
    # hand-coded reference: mean of encoder outputs, then the symmetric loss
    P, _ = enc.audio_forward(frames, params, locality_last=False)
    audio = [P[i].mean(axis=0) for i in range(len(clips))]
    text = [enc.text_forward(np.array([c]), params)[0][0].mean(axis=0) for c in caps]
    ref = symmetric_infonce(audio, text, float(np.exp(params["loss.log_tau"])))
    _detail(request, f"|loss - reference| {abs(loss - ref):.1e}")
    assert abs(loss - ref) <= 1e-12


# 6 and 7 share one ablation run on the default corpus


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    corpus = data.Corpus(*data.gen_corpus(1250, seed=0))
    work = tmp_path_factory.mktemp("ablation")
    timings = []
    t0 = time.perf_counter()
    rows = cli.run_ablation(corpus, SEEDS, T.TrainConfig().to_flat(), str(work), timings=timings)
    elapsed = time.perf_counter() - t0
    for r in rows:
        print(r["row"], {x["seed"]: x.get("metrics", {}).get("event_f1") for x in r["runs"]})
    return {"rows": rows, "by": {r["row"]: {x["seed"]: x.get("metrics") for x in r["runs"]} for r in rows},
            "elapsed": elapsed, "timings": timings, "work": str(work), "corpus": corpus}


@pytest.mark.slow
@pytest.mark.acceptance(6, "full model beats the baseline on detection, keeps retrieval")
def test_trend_full_vs_baseline(request, ablation):
    full, base = ablation["by"]["+MC+LB+HN"], ablation["by"]["baseline"]
    assert all(full[s] and base[s] for s in SEEDS), "a run failed"
    wins = [s for s in SEEDS if full[s]["event_f1"] > base[s]["event_f1"]]
    r1_ok = [s for s in SEEDS if all(full[s][k] >= base[s][k] - 1.0 for k in ("t2a_r1", "a2t_r1"))]
    per_seed = "; ".join(
        f"s{s} F1 {full[s]['event_f1']:.3f}/{base[s]['event_f1']:.3f} "
        f"R1 {full[s]['t2a_r1']:.1f},{full[s]['a2t_r1']:.1f}/{base[s]['t2a_r1']:.1f},{base[s]['a2t_r1']:.1f}"
        for s in SEEDS
    )
    minutes = ablation["elapsed"] / 60
    _detail(request, f"F1 wins {len(wins)}/3, R@1 ok {len(r1_ok)}/3, {minutes:.1f} min; {per_seed}")
    assert len(wins) >= 2
    assert len(r1_ok) == 3
    assert minutes < 45


@pytest.mark.slow
@pytest.mark.acceptance(7, "softmax does not beat sparsemax on detection")
def test_trend_softmax_vs_sparsemax(request, ablation):
    full, soft = ablation["by"]["+MC+LB+HN"], ablation["by"]["softmax"]
    assert all(full[s] and soft[s] for s in SEEDS), "a run failed"
    ok = [s for s in SEEDS if soft[s]["event_f1"] <= full[s]["event_f1"]]
    per_seed = "; ".join(f"s{s} {soft[s]['event_f1']:.3f}/{full[s]['event_f1']:.3f}" for s in SEEDS)
    _detail(request, f"softmax <= sparsemax in {len(ok)}/3; softmax/sparsemax F1 {per_seed}")
    assert len(ok) >= 2


@pytest.mark.slow
def test_single_toy_run_under_ten_minutes(ablation):
    assert max(t for _, _, t in ablation["timings"]) < 600


@pytest.mark.slow
def test_trained_heatmap_peaks_inside_clean_event(ablation):
    corpus = ablation["corpus"]
    ckpt = os.path.join(ablation["work"], "mc_lb_hn", "seed1", "best.ckpt")
    model, _, _ = T.load_model(ckpt)
    vocab = corpus.vocab
    class_g = model.class_embeddings(vocab)
    inside = 0
    for k in range(len(vocab.classes)):
        frames = data.render_frames(vocab, corpus.manifest.T, [(k, 10, 20)], 0.0, seed=k)
        P, _, _ = model.embed_audio(frames[None])
        inside += 10 <= int(np.argmax(P[0] @ class_g[k])) < 20
    print(f"peak inside the event for {inside}/{len(vocab.classes)} classes")
    assert inside == len(vocab.classes)


@pytest.mark.slow
def test_trained_codeword_probe_matches_event(ablation):
    corpus = ablation["corpus"]
    clips = [c for c in corpus.split("test") if len(c.events) == 1]
    rates = []
    for seed in SEEDS:
        model, _, _ = T.load_model(os.path.join(ablation["work"], "mc_lb_hn", f"seed{seed}", "best.ckpt"))
        _, _, w = model.embed_audio(corpus.frames_batch(clips))
        feats, _, _ = model.embed_text([[c.name_token] for c in corpus.vocab.classes])
        probes = np.stack([f[0] for f in feats])
        rates.append(cbk.probe_agreement(w, model.params["codebook.z"], probes, [c.events[0][0] for c in clips]))
    print("probe agreement per seed", [round(r, 3) for r in rates])
    assert min(rates) >= 0.6


# 8

@pytest.mark.acceptance(8, "identical runs give identical bytes")
def test_determinism(request, tmp_path):
    corpus = data.Corpus(*data.gen_corpus(1250, seed=0))
    out = str(tmp_path / "run")
    outs = []
    for _ in range(2):
        T.train(T.TrainConfig.from_flat({"train.epochs": 2, "paths.out": out}), corpus)
        outs.append(_files(out))
        shutil.rmtree(out)
    names = sorted(outs[0])
    _detail(request, f"compared {', '.join(names)}")
    assert {"best.ckpt", "last.ckpt", "metrics.csv"} <= set(names)
    assert outs[0] == outs[1]


# 9

@pytest.mark.acceptance(9, "format round trips")
def test_format_round_trips(request, tmp_path):
    m, clips = data.gen_corpus(1250, seed=0)
    data.write_corpus(m, clips, tmp_path / "c1")
    m2, clips2 = data.read_corpus(tmp_path / "c1")
    data.write_corpus(m2, clips2, tmp_path / "c2")
    assert _files(tmp_path / "c1") == _files(tmp_path / "c2")

    corpus = data.Corpus(m2, clips2)
    cfg = T.TrainConfig.from_flat({"train.epochs": 1})
    res = T.train(cfg, corpus)
    T.save_checkpoint(res.state, tmp_path / "a.ckpt")
    T.save_checkpoint(T.load_checkpoint(tmp_path / "a.ckpt", cfg.hash()), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    clip = corpus.split("test")[0]
    heat = export_similarity_heatmap(res.model(cfg), corpus, clip, tmp_path / "h.csv")
    names, parsed = read_heatmap_csv(tmp_path / "h.csv")
    E = len(corpus.vocab.classes)
    _detail(request, f"corpus, checkpoint bytes equal; heatmap {parsed.shape[0]}x{parsed.shape[1]} "
                     f"in [{parsed.min():.2f}, {parsed.max():.2f}]")
    assert parsed.shape == (E, clip.T) and names == corpus.vocab.class_names
    assert np.array_equal(parsed, heat)
    assert parsed.min() >= -1 - 1e-6 and parsed.max() <= 1 + 1e-6
