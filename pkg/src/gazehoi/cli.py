"""Command-line entry points: gen-data, train, eval, ablate, sweep.

Exit codes: 0 success, 2 usage or configuration error, 3 data or checkpoint
error, 4 numeric failure during training.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .config import RunConfig
from .data import load_annotations, split_videos
from .errors import (
    CheckpointMismatch, ConfigError, DimensionError, GazeHOIError, IntegrityError,
    NonFiniteError, SchemaError, UnknownClass,
)
from .evaluation import (
    build_eval_frames, evaluate, predict_triplets, threshold_sweep, write_predictions,
    write_sweep_csv,
)
from .features import FeatureStore, FrameCache, StoreFeatures, SyntheticFeatures
from .model import load_checkpoint, read_checkpoint
from .synthetic import ScenarioSpec, ScriptedFeatures, simulate_detections, write_dataset
from .training import train
from .vocab import DEFAULT_VOCAB, load_vocabulary

log = logging.getLogger("gazehoi")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _resolve(run: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
    if getattr(args, "out", None) is not None:
        run.out = args.out
    return run


def _vocab(run: RunConfig):
    return load_vocabulary(run.data.vocab) if run.data.vocab else DEFAULT_VOCAB


def _videos(run: RunConfig):
    if not run.data.annotations:
        raise UsageError("no dataset: set data.annotations in the config")
    if not Path(run.data.annotations).exists():
        raise UsageError(f"dataset not found: {run.data.annotations}")
    return load_annotations(run.data.annotations, _vocab(run))


def _source(run: RunConfig, scene=None):
    """Feature source for a run: the store, a scripted scenario, or plain synthetic."""
    if run.data.features:
        return StoreFeatures(FeatureStore(run.data.features))
    if run.data.scenario:
        spec = ScenarioSpec.from_file(run.data.scenario)
        return ScriptedFeatures.for_spec(spec, scene=scene)
    return SyntheticFeatures.for_config(run.model, run.seed)


def _split(run: RunConfig, videos, which: str):
    tr, va = split_videos(videos, run.data.val_fraction, run.seed)
    return {"train": tr, "val": va, "all": list(videos)}[which]


def _write_config(run: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    run.dump(path)


def _run_from_checkpoint(path, args) -> tuple[RunConfig, object]:
    meta, _ = read_checkpoint(path)
    if args.config:
        run = cfgmod.load(args.config)
    elif "run" in meta.get("extra", {}):
        run = cfgmod.from_dict(meta["extra"]["run"])
    else:
        raise UsageError("checkpoint carries no run config; pass --config")
    run = _resolve(run, args)
    model = load_checkpoint(path, run.model)
    return run, model


def _predictions(run: RunConfig, model, split: str, tau_a: int, mode: str):
    videos = _videos(run)
    subset = _split(run, videos, split)
    if not subset:
        raise UsageError(f"split {split!r} is empty")
    ids = {v.video_id for v in subset}
    if mode == "detection":
        if run.data.detections:
            dets = [v for v in load_annotations(run.data.detections, _vocab(run))
                    if v.video_id in ids]
        else:
            dets = simulate_detections(subset, run.seed)
        frames = FrameCache(dets, _source(run, scene=subset))
        preds = predict_triplets(model, dets, frames, tau_a, mode)
    else:
        frames = FrameCache(subset, _source(run, scene=subset))
        preds = predict_triplets(model, subset, frames, tau_a, mode)
    return subset, preds


def _parse_value(tok: str):
    low = tok.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(tok)
        except ValueError:
            pass
    return tok.strip()


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    spec = ScenarioSpec.from_file(args.spec) if args.spec else ScenarioSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out or "data")
    paths = write_dataset(spec, out)
    run = RunConfig(seed=spec.seed, out=str(out / "run"))
    run.data = cfgmod.DataConfig(annotations=str(paths["annotations"]),
                                 features=str(paths["features"]),
                                 detections=str(paths["detections"]),
                                 vocab=str(paths["vocab"]))
    if spec.visual_dim != 2048 or spec.semantic_dim != 200:
        run.preset = "desk"
    run = cfgmod.from_dict({**run.to_dict(), "model": {
        "visual_dim": spec.visual_dim, "semantic_dim": spec.semantic_dim,
        "gaze_size": spec.gaze_size}})
    _write_config(run, out / "run.toml")
    for name, p in paths.items():
        print(f"{name}: {p}")
    print(f"config: {out / 'run.toml'}")
    return EXIT_OK


def _train_one(run: RunConfig, out: Path, progress=True) -> dict:
    videos = _videos(run)
    tr, va = split_videos(videos, run.data.val_fraction, run.seed)
    if not tr:
        raise UsageError("training split is empty")
    _write_config(run, out / "config.toml")
    ev = run.eval

    def eval_fn(model, frames):
        if not va:
            return {}
        preds = predict_triplets(model, va, frames, run.train.tau_a)
        return evaluate(build_eval_frames(va, run.train.tau_a), preds, run.train.tau_a,
                        "oracle", ev.k, ev.threshold, ev.average).summary()

    def report(rec):
        log.info("epoch %d loss %.6f lr %.3g (%.1fs)", rec["epoch"], rec["mean_loss"],
                 rec["lr"] or 0.0, rec["seconds"])

    res = train(run.model, run.train, tr, _source(run, scene=videos), seed=run.seed,
                val_videos=va, log_path=out / "train_log.jsonl", ckpt_dir=out / "checkpoints",
                eval_fn=eval_fn, progress=report if progress else None,
                ckpt_extra={"run": run.to_dict()})
    return {"result": res, "train": tr, "val": va}


def cmd_train(args) -> int:
    run = _resolve(cfgmod.load(args.config), args)
    if args.tau_a is not None:
        run.train.tau_a = args.tau_a
    if args.epochs is not None:
        run.train.epochs = args.epochs
    out = Path(run.out)
    _train_one(run, out)
    print(f"checkpoints: {out / 'checkpoints'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run, model = _run_from_checkpoint(args.checkpoint, args)
    ev = run.eval
    split = args.split or ev.split
    mode = args.mode or ev.mode
    tau_a = run.train.tau_a if args.tau_a is None else args.tau_a
    k = ev.k if args.k is None else args.k
    threshold = ev.threshold if args.threshold is None else args.threshold
    subset, preds = _predictions(run, model, split, tau_a, mode)
    rep = evaluate(build_eval_frames(subset, tau_a), preds, tau_a, mode, k, threshold,
                   ev.average, config=run.to_dict())
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.dump(out / "report.json")
    write_predictions(preds, out / "predictions.jsonl")
    print(json.dumps(rep.summary(), sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    run, model = _run_from_checkpoint(args.checkpoint, args)
    tau_a = run.train.tau_a if args.tau_a is None else args.tau_a
    thresholds = ([float(x) for x in args.thresholds.split(",")] if args.thresholds
                  else run.eval.thresholds)
    split = args.split or run.eval.split
    subset, preds = _predictions(run, model, split, tau_a, "oracle")
    rows = threshold_sweep(build_eval_frames(subset, tau_a), preds, thresholds, run.eval.k,
                           future_only=tau_a > 0)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")
    _write_config(run, out / "sweep_config.toml")
    print(f"sweep: {out / 'sweep.csv'} ({len(rows)} rows)")
    return EXIT_OK


def repeat_seed(master: int, repeat: int) -> int:
    """Independent per-repeat seed derived from the master seed."""
    return int(np.random.SeedSequence([master, repeat]).generate_state(1)[0])


def cmd_ablate(args) -> int:
    run = _resolve(cfgmod.load(args.config), args)
    axes = dict(run.ablate)
    for spec in args.axis or []:
        name, _, values = spec.partition("=")
        if not values:
            raise UsageError(f"--axis expects name=v1,v2 (got {spec!r})")
        axes[name] = [_parse_value(v) for v in values.split(",")]
    if not axes:
        raise UsageError("no ablation axes given")
    grid = cfgmod.ablation_grid(run, axes)
    out = Path(run.out)
    rows = []
    for i, (point, cfg) in enumerate(grid):
        for r in range(args.repeats):
            cfg.seed = repeat_seed(run.seed, r)
            cfg.out = str(out / f"run_{i:03d}_r{r}")
            log.info("ablation %s repeat %d", point, r)
            res = _train_one(cfg, Path(cfg.out), progress=False)
            va = res["val"] or res["train"]
            frames = FrameCache(va, _source(cfg, scene=va))
            preds = predict_triplets(res["result"].model, va, frames, cfg.train.tau_a)
            rep = evaluate(build_eval_frames(va, cfg.train.tau_a), preds, cfg.train.tau_a,
                           "oracle", cfg.eval.k, cfg.eval.threshold, cfg.eval.average,
                           config=cfg.to_dict())
            rep.dump(Path(cfg.out) / "report.json")
            rows.append({**point, "repeat": r, "seed": cfg.seed, "map_full": rep.map_full,
                         "map_nonrare": rep.map_nonrare, "map_rare": rep.map_rare,
                         **{k: rep.personwise[k] for k in ("recall", "precision", "accuracy", "f1")}})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _write_config(run, out / "ablation_config.toml")
    print(f"ablation: {out / 'ablation.csv'} ({len(rows)} rows)")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (TOML)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gazehoi", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a scripted synthetic dataset")
    g.add_argument("--spec", help="scenario spec (TOML or JSON)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--tau-a", type=int, dest="tau_a", help="anticipation gap (0 = detection)")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "val", "all"))
    e.add_argument("--mode", choices=("oracle", "detection"))
    e.add_argument("--tau-a", type=int, dest="tau_a")
    e.add_argument("--k", type=int)
    e.add_argument("--threshold", type=float)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="train and evaluate an ablation grid")
    a.add_argument("--axis", action="append", help="axis=v1,v2,... (repeatable)")
    a.add_argument("--repeats", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep", parents=[common], help="person-wise metrics per threshold")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--thresholds", help="comma-separated thresholds in (0, 1)")
    s.add_argument("--split", choices=("train", "val", "all"))
    s.add_argument("--tau-a", type=int, dest="tau_a")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numeric failure at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SchemaError, IntegrityError, DimensionError, UnknownClass, CheckpointMismatch,
            GazeHOIError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
