"""Operator entry points.

Subcommands: gen (synthetic dataset), train, infer, eval, gradcheck, bench.
Every command is reproducible from (config, seed); configs are echoed into
every output directory. Exit codes: 0 success, 1 validation error,
2 acceptance failure (gradcheck failures or eval below a required threshold).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import (ExperimentConfig, InferenceConfig, config_from_dict,
                     load_config)
from .data import (DataGenConfig, generate_dataset, load_dataset,
                   read_annotations, read_predictions, save_predictions)
from .errors import ConfigurationError, GeometryError, SchemaError, ShapeError
from .gradsuite import run_gradient_suite
from .inference import run_video
from .metrics import EvalPair, evaluate
from .model import QueryLocalizer
from .nn import load_checkpoint
from .trainer import train

_VALIDATION_ERRORS = (ConfigurationError, SchemaError, ShapeError,
                      GeometryError, FileNotFoundError)


def _echo_config(out_dir: Path, payload: dict, name: str = "config.json") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(payload, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = DataGenConfig(
        canvas_side=args.side, n_frames=args.frames, fps=args.fps,
        n_distractors=args.distractors,
        distractor_similarity=args.similarity,
        match_query_shape=args.match_shape,
        n_occluders=args.occluders, occlusion=args.occluders > 0,
        visibility_intervals=args.intervals,
        track_len_range=(args.track_min, args.track_max))
    cfg.validate()
    out = Path(args.out)
    generate_dataset(args.seed, args.n_videos, cfg, out_dir=out)
    echo = {"seed": args.seed, "n_videos": args.n_videos,
            "generator": cfg.__dict__ | {
                "query_size_range": list(cfg.query_size_range),
                "track_len_range": list(cfg.track_len_range),
                "early_len_range": list(cfg.early_len_range)}}
    _echo_config(out, echo, "gen_config.json")
    print(f"wrote {args.n_videos} videos to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "iterations", None) is not None:
        cfg.train.iterations = args.iterations
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "batch_size", None) is not None:
        cfg.train.batch_size = args.batch_size
    if getattr(args, "loss_mode", None) is not None:
        cfg.loss.mode = args.loss_mode
    if getattr(args, "global_window", False):
        cfg.model.global_window = True
    if getattr(args, "no_augment", False):
        cfg.train.augment = False
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    samples = load_dataset(args.data)
    start = time.perf_counter()

    def progress(rec):
        if args.verbose:
            print(f"iter {rec['iter']:6d} lr {rec['lr']:.2e} "
                  f"total {rec['total']:.4f} (bbox {rec['l_bbox']:.4f} "
                  f"prob {rec['l_prob']:.4f}) pos {rec['n_pos']}")

    train(cfg, samples, out_dir=args.out, progress=progress)
    print(f"trained {cfg.train.iterations} iterations in "
          f"{time.perf_counter() - start:.1f}s; checkpoints in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def load_model_from_checkpoint(ckpt_dir) -> tuple[QueryLocalizer, ExperimentConfig]:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "checkpoint.json").read_text())
    extra = manifest.get("extra", {})
    if "config" not in extra:
        raise SchemaError(f"checkpoint {ckpt_dir} carries no config echo")
    cfg = config_from_dict(extra["config"])
    model = QueryLocalizer(cfg.model, np.random.default_rng(0))
    model.load_state_dict(load_checkpoint(ckpt_dir))
    return model, cfg


_WORKER = {}


def _infer_worker_init(ckpt_dir, inf_cfg_dict):
    model, cfg = load_model_from_checkpoint(ckpt_dir)
    _WORKER["model"] = model
    _WORKER["inf"] = InferenceConfig(**inf_cfg_dict)


def _infer_worker_run(task):
    video, query, query_id = task
    track, _ = run_video(video, query, _WORKER["model"], _WORKER["inf"])
    return query_id, track


def cmd_infer(args) -> int:
    model, cfg = load_model_from_checkpoint(args.checkpoint)
    inf = cfg.inference
    if args.phi is not None:
        inf.phi = args.phi
    if args.window is not None:
        inf.median_window = args.window
    if args.peak_ratio is not None:
        inf.peak_ratio = args.peak_ratio
    if args.extent_ratio is not None:
        inf.extent_ratio = args.extent_ratio
    inf.validate()
    samples = load_dataset(args.data)
    out = Path(args.out)
    predictions = {}
    if args.workers <= 1:
        for s in samples:
            track, _ = run_video(s.frames, s.query, model, inf)
            predictions[s.video_id] = track
    else:
        from concurrent.futures import ProcessPoolExecutor
        tasks = [(s.frames, s.query, s.video_id) for s in samples]
        with ProcessPoolExecutor(max_workers=args.workers,
                                 initializer=_infer_worker_init,
                                 initargs=(args.checkpoint, inf.__dict__)) as pool:
            for query_id, track in pool.map(_infer_worker_run, tasks):
                predictions[query_id] = track
    out.mkdir(parents=True, exist_ok=True)
    save_predictions(out / "predictions.json", predictions)
    _echo_config(out, cfg.to_dict())
    found = sum(1 for t in predictions.values() if t is not None)
    print(f"wrote {out / 'predictions.json'} ({found}/{len(predictions)} found)")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    annotations = read_annotations(args.annotations)
    predictions = read_predictions(args.predictions)
    pairs = []
    for rec in annotations:
        qid = rec["video_id"]
        pairs.append(EvalPair(query_id=qid,
                              prediction=predictions.get(qid),
                              ground_truth=rec["track"]))
    report = evaluate(pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json", out / "per_query.csv")
    _echo_config(out, {"predictions": str(args.predictions),
                       "annotations": str(args.annotations)})
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    failed = []
    for name, minimum in (("tAP25", args.min_tap25), ("stAP25", args.min_stap25),
                          ("recovery_pct", args.min_recovery),
                          ("success_pct", args.min_success)):
        if minimum is not None and getattr(report, name) < minimum:
            failed.append(f"{name} {getattr(report, name):.4f} < {minimum}")
    if failed:
        print("threshold failures: " + "; ".join(failed), file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    results = run_gradient_suite(args.seed, args.seeds)
    failures = [r for r in results if not r.passed]
    worst = max(results, key=lambda r: r.max_rel_err)
    if args.verbose:
        for r in results:
            print(r)
    print(f"gradcheck: {len(results)} checks over {args.seeds} seeds, "
          f"{len(failures)} failures, worst rel err {worst.max_rel_err:.3e} "
          f"({worst.name})")
    if failures:
        for r in failures:
            print(f"FAILED {r}", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    model, cfg = load_model_from_checkpoint(args.checkpoint)
    samples = load_dataset(args.data)
    n_frames = 0
    start = time.perf_counter()
    for s in samples:
        run_video(s.frames, s.query, model, cfg.inference)
        n_frames += s.frames.shape[0]
    elapsed = time.perf_counter() - start
    print(json.dumps({"videos": len(samples), "frames": n_frames,
                      "seconds": round(elapsed, 3),
                      "fps": round(n_frames / elapsed, 2)}))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vql",
        description="Visual query localization: synthesize data, train, "
                    "localize, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-videos", type=int, default=4)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--frames", type=int, default=48)
    p.add_argument("--fps", type=int, default=5)
    p.add_argument("--distractors", type=int, default=2)
    p.add_argument("--similarity", type=float, default=0.5,
                   help="distractor color similarity to the query in [0, 1]")
    p.add_argument("--match-shape", action="store_true",
                   help="distractors share the query object's shape kind")
    p.add_argument("--occluders", type=int, default=1)
    p.add_argument("--intervals", type=int, default=1, choices=(1, 2),
                   help="number of visibility intervals (last one is the track)")
    p.add_argument("--track-min", type=int, default=10)
    p.add_argument("--track-max", type=int, default=20)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--loss-mode", choices=("bce_hnm", "bce", "focal"),
                   default=None)
    p.add_argument("--global-window", action="store_true",
                   help="ablation: disable the temporal attention window")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run inference; writes predictions.json")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--phi", type=float, default=None,
                   help="absolute score pre-filter (default 0: disabled)")
    p.add_argument("--window", type=int, default=None,
                   help="median filter kernel (default 5)")
    p.add_argument("--peak-ratio", type=float, default=None,
                   help="keep peaks >= ratio * highest peak (default 0.8)")
    p.add_argument("--extent-ratio", type=float, default=None,
                   help="track extent threshold vs peak score (default 0.7)")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel query evaluation; 1 = reference mode")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against annotations")
    p.add_argument("--predictions", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-tap25", type=float, default=None)
    p.add_argument("--min-stap25", type=float, default=None)
    p.add_argument("--min-recovery", type=float, default=None)
    p.add_argument("--min-success", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="inference throughput (frames per second)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
