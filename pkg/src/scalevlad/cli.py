"""Command-line entry point: ``scalevlad <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint
from .config import RunConfig
from .data_io import DataError, Dataset, load_dataset, synth_generate
from .diffmath import ConfigurationError
from .fusion import row_tags
from .model import ScaleVLADModel, dump_assignments
from .s3c import kmeans
from .training import evaluate, prepare_dataset, train
from .verify import end_to_end_gradcheck, run_op_suite

log = logging.getLogger("scalevlad")


class CommandError(RuntimeError):
    pass


def _threads() -> None:
    torch.set_num_threads(max(1, int(os.environ.get("SVLD_THREADS", "1"))))


def _write_meta(path: Path, cfg_hash: str, **extra) -> None:
    meta = {"config_hash": cfg_hash, **extra}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _dataset_for(cfg: RunConfig) -> Dataset:
    if not cfg.manifest:
        raise CommandError("config has no dataset manifest")
    return prepare_dataset(load_dataset(cfg.manifest), cfg)


def _check_widths(cfg: RunConfig, ds: Dataset) -> None:
    man = ds.manifest
    if man.task != cfg.train.task:
        raise CommandError(f"manifest task {man.task!r} != config task {cfg.train.task!r}")
    if man.text_kind == "tokens" and cfg.text.input_dim != man.vocab_size:
        raise CommandError(f"text.input_dim {cfg.text.input_dim} != vocabulary size {man.vocab_size}")
    if cfg.video.input_dim != man.video_dim or cfg.audio.input_dim != man.audio_dim:
        raise CommandError("video/audio input_dim do not match the manifest widths")


def _from_checkpoint(path):
    ckpt = load_checkpoint(path)
    ds = _dataset_for(ckpt.config)
    return ckpt, ScaleVLADModel(ckpt.config, ckpt.params), ds


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CommandError(f"{out} exists and is not empty (use --force)")
    path = synth_generate(args.n, args.seed, out, task=args.task)
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    ds = _dataset_for(cfg)
    _check_widths(cfg, ds)
    out = Path(args.out or cfg.out_dir)
    resume = None
    if args.resume:
        resume = load_checkpoint(out / "last.svld", cfg.config_hash())
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    result = train(ds, cfg, out, resume=resume)
    _write_meta(out / "report.csv", cfg.config_hash(), best_epoch=result.best_epoch)
    if result.test_metrics is not None:
        print(json.dumps(result.test_metrics, indent=2))
    return 0


def cmd_eval(args) -> int:
    ckpt, model, ds = _from_checkpoint(args.checkpoint)
    if args.split not in ds.splits:
        raise CommandError(f"unknown split {args.split!r}")
    ev = evaluate(model, ds.splits[args.split])
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}.json"
    payload = {"config_hash": ckpt.config.config_hash(), "split": args.split, "epoch": ckpt.epoch,
               "task_loss": ev.task_loss, "metrics": ev.metrics}
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(payload["metrics"], indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = RunConfig.load(args.config)
    ds = _dataset_for(cfg)
    _check_widths(cfg, ds)
    samples = ds.splits["train"][:2]
    ops = run_op_suite(range(args.seeds), eps=args.eps, tol=args.tol)
    e2e = end_to_end_gradcheck(cfg, samples, max_entries=args.entries, eps=args.eps, tol=args.tol)
    ok = all(r.passed for r in ops.values()) and e2e.passed
    for name, rep in ops.items():
        print(f"{name:28s} {rep.summary()}")
    print(f"{'end_to_end':28s} {e2e.summary()}")
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {
        "config_hash": cfg.config_hash(),
        "passed": ok,
        "ops": {k: {"max_rel_error": r.max_rel_error, "passed": r.passed} for k, r in ops.items()},
        "end_to_end": {"max_rel_error": e2e.max_rel_error, "passed": e2e.passed, "per_param": e2e.per_input},
    }
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0 if ok else 1


def cmd_inspect_vlad(args) -> int:
    ckpt, model, ds = _from_checkpoint(args.checkpoint)
    try:
        sample = ds.find(args.sample)
    except KeyError as exc:
        raise CommandError(str(exc)) from None
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"vlad_{args.sample}.csv"
    out.write_text(dump_assignments(sample, model), encoding="utf-8", newline="")
    _write_meta(out, ckpt.config.config_hash(), sample=args.sample,
                row_tags=[list(t) for t in row_tags(ckpt.config.fusion.scales)])
    print(out)
    return 0


def pca_2d(X: np.ndarray) -> np.ndarray:
    """Top-2 principal-component scores; each axis signed so its largest loading is positive."""
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:2]
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    scores = Xc @ comps.T
    if scores.shape[1] < 2:
        scores = np.pad(scores, ((0, 0), (0, 2 - scores.shape[1])))
    return scores


def _label_text(label) -> str:
    if isinstance(label, np.ndarray):
        return "".join(str(int(v)) for v in label)
    if isinstance(label, float):
        return repr(label)
    return str(label)


def cmd_project_features(args) -> int:
    ckpt, model, ds = _from_checkpoint(args.checkpoint)
    if args.split not in ds.splits:
        raise CommandError(f"unknown split {args.split!r}")
    samples = ds.splits[args.split]
    fused = model.fused_features(samples).numpy()
    xy = pca_2d(fused)
    C = ckpt.config.s3c.cluster_counts[0] if ckpt.config.s3c else 4
    clusters = kmeans(fused, min(C, len(samples)), iters=100, seed=0).labels
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "label", "cluster"])
        for (x, y), s, c in zip(xy, samples, clusters):
            w.writerow([repr(float(x)), repr(float(y)), _label_text(s.label), int(c)])
    _write_meta(out, ckpt.config.config_hash(), split=args.split, ids=[s.id for s in samples])
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalevlad", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic three-cue dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task", choices=["classification", "regression"], default="classification")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the config's out_dir")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.svld")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every kernel and the full loss")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--entries", type=int, default=None, help="probe at most N entries per parameter (default: all)")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-vlad", help="dump soft-assignment weights for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_vlad)

    p = sub.add_parser("project-features", help="2-D PCA of fused features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project_features)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    _threads()
    try:
        return args.func(args)
    except (CommandError, CheckpointError, ConfigurationError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
