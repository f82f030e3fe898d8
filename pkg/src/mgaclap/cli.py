"""Command-line entry point: ``mgaclap <subcommand> ...``.

Exit codes: 0 ok, 1 failed check, 2 usage or configuration error,
3 I/O or file-format error, 4 numeric abort.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import codebook as cbk
from . import data, evaluation, gradsuite, training
from .errors import FormatError, MgaClapError, NumericAbort

log = logging.getLogger("mgaclap")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

# ablation rows: label -> overrides on top of the base config
ABLATION_ROWS = (
    ("baseline", {"model.use_codebook": False, "model.locality_last": False, "model.use_hard_negative": False}),
    ("+MC", {"model.use_codebook": True, "model.locality_last": False, "model.use_hard_negative": False}),
    ("+LB", {"model.use_codebook": False, "model.locality_last": True, "model.use_hard_negative": False}),
    ("+MC+LB", {"model.use_codebook": True, "model.locality_last": True, "model.use_hard_negative": False}),
    ("+MC+LB+HN", {"model.use_codebook": True, "model.locality_last": True, "model.use_hard_negative": True}),
    ("mean pooling", {"model.use_codebook": True, "model.locality_last": True, "model.use_hard_negative": True,
                      "model.pooling": "mean"}),
    ("softmax", {"model.use_codebook": True, "model.locality_last": True, "model.use_hard_negative": True,
                 "model.norm": "softmax"}),
)
REPORT_METRICS = ("t2a_r1", "t2a_r5", "a2t_r1", "a2t_r5", "tag_acc", "tag_map", "event_f1", "segment_f1")


class UsageError(MgaClapError):
    pass


def _flat_metrics(report):
    r, t, d = report.retrieval, report.tagging, report.detection
    return {
        "t2a_r1": r.t2a_r1, "t2a_r5": r.t2a_r5, "a2t_r1": r.a2t_r1, "a2t_r5": r.a2t_r5,
        "tag_acc": t.accuracy, "tag_map": t.mAP,
        "event_f1": d.micro_f1, "segment_f1": d.segment_f1, "threshold": d.threshold,
    }


def _config_dict(cfg):
    return {k: v for k, v in sorted(cfg.to_flat().items())}


def _write_json(obj, path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_trained(args):
    model, cfg, state = training.load_model(args.checkpoint, args.config)
    corpus_path = args.corpus or cfg.corpus
    if not corpus_path:
        raise UsageError("no corpus given (pass --corpus or set paths.corpus in the config)")
    return model, cfg, state, data.Corpus.load(corpus_path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    if args.events < 2:
        raise UsageError(f"--events must be >= 2, got {args.events}")
    manifest, clips = data.gen_corpus(args.clips, E=args.events, F_in=args.features, T=args.frames,
                                      sigma=args.sigma, seed=args.seed, max_events=args.max_events)
    manifest.extra = {"generator": {
        "clips": args.clips, "events": args.events, "features": args.features, "frames": args.frames,
        "sigma": args.sigma, "seed": args.seed, "max_events": args.max_events,
    }}
    data.write_corpus(manifest, clips, args.out)
    sizes = ", ".join(f"{k} {len(v)}" for k, v in manifest.splits.items())
    print(f"wrote {len(clips)} clips to {args.out} ({sizes}); vocabulary {manifest.vocab.size} tokens, "
          f"{len(manifest.vocab.classes)} event classes")
    return EXIT_OK


def cmd_train(args):
    if args.dump_defaults:
        sys.stdout.write(training.format_config(training.TrainConfig(), with_help=True))
        return EXIT_OK
    cfg = training.load_config(args.config, args.set)
    if not cfg.corpus:
        raise UsageError("paths.corpus is not set")
    corpus = data.Corpus.load(cfg.corpus)

    def report(epoch, rows):
        vals = {m: v for _, _, m, v in rows}
        print(f"epoch {epoch:3d}  loss {vals['loss']:.4f}  tau {vals['tau']:.4f}  "
              f"val R@1 t2a {vals['t2a_r1']:.1f} a2t {vals['a2t_r1']:.1f}  "
              f"R@5 t2a {vals['t2a_r5']:.1f} a2t {vals['a2t_r5']:.1f}", flush=True)

    res = training.train(cfg, corpus, on_epoch=report)
    print(f"best epoch {res.best_epoch}; step {res.state.step}" + (f"; outputs in {cfg.out}" if cfg.out else ""))
    return EXIT_OK


def cmd_eval(args):
    model, cfg, _, corpus = _load_trained(args)
    rep = evaluation.evaluate(model, corpus, args.split, args.tune_split or None)
    print(evaluation.format_report(rep))
    if args.out:
        _write_json({"config": _config_dict(cfg), "checkpoint": args.checkpoint,
                     "metrics": _flat_metrics(rep), "report": rep.to_dict()}, args.out)
    return EXIT_OK


def _mean_sd(values):
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return None, None
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def run_ablation(corpus, seeds, base_flat, work_dir=None, rows=ABLATION_ROWS, echo=print, timings=None):
    """Train and evaluate every ablation row for every seed.

    A failing run is recorded with its error and the others proceed.
    Wall-clock seconds per run go to ``timings`` (kept out of the report so
    it stays deterministic).
    """
    out = []
    for label, overrides in rows:
        flat = {**base_flat, **overrides}
        runs = []
        for seed in seeds:
            run_flat = {**flat, "train.seed": seed, "paths.corpus": "", "paths.resume": ""}
            run_flat["paths.out"] = os.path.join(work_dir, _slug(label), f"seed{seed}") if work_dir else ""
            entry = {"seed": seed}
            t0 = time.perf_counter()
            try:
                cfg = training.TrainConfig.from_flat(run_flat)
                res = training.train(cfg, corpus)
                rep = evaluation.evaluate(res.model(cfg), corpus, "test", "val")
                entry.update(status="ok", best_epoch=res.best_epoch, metrics=_flat_metrics(rep))
            except (MgaClapError, FloatingPointError, ValueError) as exc:
                entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            if timings is not None:
                timings.append((label, seed, time.perf_counter() - t0))
            runs.append(entry)
            m = entry.get("metrics")
            echo(f"{label:<14} seed {seed}: " + (
                f"event F1 {m['event_f1']:.4f}  T2A R@1 {m['t2a_r1']:.1f}  A2T R@1 {m['a2t_r1']:.1f}"
                if m else entry["error"]))
        ok = [r["metrics"] for r in runs if r["status"] == "ok"]
        summary = {}
        for k in REPORT_METRICS:
            mu, sd = _mean_sd([m[k] for m in ok])
            summary[k] = {"mean": mu, "sd": sd}
        out.append({"row": label, "overrides": overrides, "runs": runs, "summary": summary})
    return out


def trend_checks(rows):
    """Per-seed comparisons mirroring the ablation's expected directions."""
    by = {r["row"]: {x["seed"]: x.get("metrics") for x in r["runs"]} for r in rows}
    checks = {}
    full, base, soft = by.get("+MC+LB+HN"), by.get("baseline"), by.get("softmax")
    if full and base:
        seeds = sorted(s for s in full if full[s] and base.get(s))
        f1_wins = sum(full[s]["event_f1"] > base[s]["event_f1"] for s in seeds)
        r1_ok = all(
            full[s][k] >= base[s][k] - 1.0 for s in seeds for k in ("t2a_r1", "a2t_r1")
        )
        checks["full_beats_baseline_event_f1"] = {"wins": f1_wins, "seeds": len(seeds)}
        checks["full_retrieval_within_1pt"] = {"ok": bool(r1_ok and seeds), "seeds": len(seeds)}
    if full and soft:
        seeds = sorted(s for s in full if full[s] and soft.get(s))
        n = sum(soft[s]["event_f1"] <= full[s]["event_f1"] for s in seeds)
        checks["softmax_not_above_sparsemax_event_f1"] = {"count": n, "seeds": len(seeds)}
    return checks


def _slug(label):
    return "".join(ch if ch.isalnum() else "_" for ch in label).strip("_").lower() or "row"


def write_ablation_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row"] + [f"{k}_{s}" for k in REPORT_METRICS for s in ("mean", "sd")] + ["failed_seeds"])
        for r in rows:
            cells = []
            for k in REPORT_METRICS:
                s = r["summary"][k]
                cells += ["" if s["mean"] is None else repr(s["mean"]), "" if s["sd"] is None else repr(s["sd"])]
            failed = [str(x["seed"]) for x in r["runs"] if x["status"] != "ok"]
            w.writerow([r["row"]] + cells + [" ".join(failed)])


def cmd_ablate(args):
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--seeds must be comma-separated integers: {exc}") from exc
    if not seeds:
        raise UsageError("--seeds is empty")
    base = training.load_config(args.config, args.set)
    corpus = data.Corpus.load(args.corpus)
    base_flat = base.to_flat()
    rows = run_ablation(corpus, seeds, base_flat, args.work_dir)
    report = {
        "corpus": args.corpus,
        "seeds": seeds,
        "config": _config_dict(base),
        "rows": rows,
        "trends": trend_checks(rows),
    }
    _write_json(report, args.out)
    csv_path = os.path.splitext(args.out)[0] + ".csv"
    write_ablation_csv(rows, csv_path)
    print(f"{'row':<14}" + "".join(f"{k:>18}" for k in ("event_f1", "t2a_r1", "a2t_r1")))
    for r in rows:
        cells = []
        for k in ("event_f1", "t2a_r1", "a2t_r1"):
            s = r["summary"][k]
            cells.append("failed" if s["mean"] is None else f"{s['mean']:.3f}±{s['sd']:.3f}")
        print(f"{r['row']:<14}" + "".join(f"{c:>18}" for c in cells))
    print(f"wrote {args.out} and {csv_path}")
    return EXIT_OK


def cmd_inspect_codebook(args):
    model, cfg, _, corpus = _load_trained(args)
    if not cfg.model.use_codebook:
        raise UsageError("checkpoint has no codebook (model.use_codebook=false)")
    clips = corpus.split(args.split)
    P, _, wa = model.embed_audio(corpus.frames_batch(clips))
    _, _, wt = model.embed_text([c.caption for c in clips])
    stats = {"audio": cbk.support_stats(wa), "text": cbk.support_stats(wt)}
    # class-name word features as probes for what each codeword encodes
    names = corpus.vocab.class_names
    feats, _, _ = model.embed_text([[c.name_token] for c in corpus.vocab.classes])
    probes = np.stack([f[0] for f in feats])
    Z = model.params["codebook.z"]
    used = np.flatnonzero((wa > 0).any(0) | (wt > 0).any(0)).tolist()
    rows = cbk.probe_codewords(Z, probes, names, args.top_k, used)
    single = [i for i, c in enumerate(clips) if len(c.events) == 1]
    agree = cbk.probe_agreement(wa[single], Z, probes, [clips[i].events[0][0] for i in single])
    for mod, s in stats.items():
        print(f"{mod:<6} items {s['items']}  mean support {s['mean_support']:.2f}  "
              f"range [{s['min_support']}, {s['max_support']}]  dead codewords {s['dead_codewords']}/{s['M']}")
    print(f"top codeword's top class matches the event in {100 * agree:.1f}% of {len(single)} single-event clips")
    if args.out:
        cbk.write_probe_csv(rows, args.out)
        timelines = cbk.codeword_timelines(P, Z, wa)
        _write_json({
            "config": _config_dict(cfg), "checkpoint": args.checkpoint, "split": args.split,
            "support": stats, "probe_agreement": agree, "single_event_clips": len(single),
            "timelines": [{"clip_id": c.id, "events": c.events, "codewords": {str(k): v for k, v in tl.items()}}
                          for c, tl in zip(clips, timelines)],
        }, evaluation.sidecar_path(args.out))
        print(f"wrote {args.out} and {evaluation.sidecar_path(args.out)}")
    else:
        for k, r, name, sim in rows[: 3 * args.top_k]:
            print(f"codeword {k:4d}  #{r} {name:<8} {sim:+.3f}")
    return EXIT_OK


def cmd_export_heatmap(args):
    model, cfg, _, corpus = _load_trained(args)
    if args.clip is None:
        clip = corpus.split("test")[0]
    elif args.clip in corpus.clips:
        clip = corpus.clips[args.clip]
    else:
        raise UsageError(f"no clip with id {args.clip}")
    heat = evaluation.export_similarity_heatmap(
        model, corpus, clip, args.out,
        extra={"config": _config_dict(cfg), "checkpoint": args.checkpoint},
    )
    print(f"wrote {args.out} ({heat.shape[0]} classes x {heat.shape[1]} frames) "
          f"and {evaluation.sidecar_path(args.out)}")
    return EXIT_OK


def cmd_grad_check(args):
    rows = gradsuite.run_suite(args.points, args.seed)
    print(gradsuite.format_rows(rows))
    bad = [r.name for r in rows if not r.ok]
    if bad:
        print(f"FAILED: {', '.join(bad)}")
        return EXIT_FAIL
    print("all gradient checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_trained(p):
    p.add_argument("--checkpoint", required=True, help="checkpoint written by `train`")
    p.add_argument("--config", help="config file (default: config.txt next to the checkpoint)")
    p.add_argument("--corpus", help="corpus directory (default: paths.corpus from the config)")


def build_parser():
    ap = argparse.ArgumentParser(prog="mgaclap", description="Toy multi-grained audio-text contrastive model.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--events", type=int, default=data.DEFAULT_E, help="number of event classes (>= 2)")
    p.add_argument("--clips", type=int, default=1250)
    p.add_argument("--frames", type=int, default=data.DEFAULT_T)
    p.add_argument("--features", type=int, default=data.DEFAULT_F_IN)
    p.add_argument("--sigma", type=float, default=data.DEFAULT_SIGMA, help="frame noise std")
    p.add_argument("--max-events", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--dump-defaults", action="store_true", help="print every key with its default and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_trained(p)
    p.add_argument("--split", default="test")
    p.add_argument("--tune-split", default="val", help="split used to pick the detection threshold ('' for none)")
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the seven ablation configurations")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--out", required=True, help="report JSON path; a CSV is written alongside")
    p.add_argument("--config", help="base config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--work-dir", help="keep per-run checkpoints and metrics here")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-codebook", help="codebook support statistics and codeword probes")
    _add_trained(p)
    p.add_argument("--split", default="test")
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--out", help="probe CSV path (a .json sidecar holds the statistics)")
    p.set_defaults(func=cmd_inspect_codebook)

    p = sub.add_parser("export-heatmap", help="frame-by-class similarity CSV for one clip")
    _add_trained(p)
    p.add_argument("--clip", type=int, help="clip id (default: first test clip)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_heatmap)

    p = sub.add_parser("grad-check", help="run the finite-difference gradient suite")
    p.add_argument("--points", type=int, default=100, help="random points per check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MgaClapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
