"""Losses, learning-rate schedule, Adam, and the epoch loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .checkpoint import AdamState, Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data_io import Batch, DataError, Dataset, MultimodalSample, collate, make_batches, normalize_features
from .diffmath import DTYPE, log_softmax
from .metrics import selection_score, task_report
from .model import ModelParams, ScaleVLADModel, init_params
from .s3c import ClusterState, RefreshRecord, init_states, multi_s3c, refresh_epoch

log = logging.getLogger(__name__)

REPORT_PREFIX = ["epoch", "split", "loss", "task_loss", "s3c_loss"]


class NonFiniteLossError(FloatingPointError):
    pass


class OptimizerStateError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# objectives


def task_loss(output: torch.Tensor, labels: torch.Tensor, task: str) -> torch.Tensor:
    """Batch-mean task loss: cross-entropy, squared error, or summed per-emotion CE."""
    if task == "regression":
        if labels.dtype != DTYPE or labels.dim() != 1:
            raise DataError("regression task expects one float label per sample")
        resid = labels - output.reshape(-1)
        return (resid * resid).mean()
    if task == "classification":
        if labels.dtype != torch.long or labels.dim() != 1:
            raise DataError("classification task expects one integer class per sample")
        logp = log_softmax(output)
        return -logp.gather(1, labels[:, None]).mean()
    if task == "multilabel":
        if labels.dtype != torch.long or labels.dim() != 2:
            raise DataError("multilabel task expects a bit vector per sample")
        n_emo = labels.shape[1]
        logp = log_softmax(output.reshape(-1, n_emo, 2))
        return -logp.gather(2, labels[..., None]).sum(dim=(1, 2)).mean()
    raise DataError(f"unknown task {task!r}")


def total_loss(task: torch.Tensor, s3c: torch.Tensor, weight: float = 1.0) -> torch.Tensor:
    return task + weight * s3c


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_fraction: float) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_fraction * total_steps
    if step < warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup)


@torch.no_grad()
def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    if set(grads) != set(params):
        missing = sorted(set(params) - set(grads))
        raise OptimizerStateError(f"gradient keys do not match parameters (missing {missing[:3]})")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return state


def clip_global_norm(grads: Dict[str, torch.Tensor], max_norm: Optional[float]) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return norm


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    loss: float
    task_loss: float
    metrics: Dict[str, float]
    fused: torch.Tensor
    outputs: torch.Tensor


def label_array(samples: Sequence[MultimodalSample]) -> np.ndarray:
    return np.asarray([np.asarray(s.label) for s in samples])


@torch.no_grad()
def evaluate(model: ScaleVLADModel, samples: Sequence[MultimodalSample], batch_size: int = 256) -> EvalResult:
    task = model.cfg.train.task
    fused, outputs = model.predict(list(samples), batch_size)
    labels = collate(list(samples)).labels
    lt = float(task_loss(outputs, labels, task))
    metrics = task_report(task, outputs.numpy(), label_array(samples))
    return EvalResult(lt, lt, metrics, fused, outputs)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: ScaleVLADModel
    history: List[dict]
    clusters: List[ClusterState]
    refreshes: List[RefreshRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_params: Optional[ModelParams] = None
    test_metrics: Optional[Dict[str, float]] = None


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(path, history: List[dict]) -> None:
    if not history:
        Path(path).write_text(",".join(REPORT_PREFIX) + "\n", encoding="utf-8")
        return
    metric_cols = [k for k in history[0] if k not in REPORT_PREFIX]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_PREFIX + metric_cols)
        for row in history:
            w.writerow([_fmt(row.get(k)) for k in REPORT_PREFIX + metric_cols])


def write_refresh_log(path, records: List[RefreshRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "cluster_count", "distortion", "center_shift_norm"])
        for r in records:
            w.writerow([r.epoch, r.cluster_count, repr(r.distortion), repr(r.center_shift_norm)])


def read_refresh_log(path) -> List[RefreshRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            RefreshRecord(int(r["epoch"]), int(r["cluster_count"]), float(r["distortion"]), float(r["center_shift_norm"]))
            for r in csv.DictReader(fh)
        ]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def prepare_dataset(dataset: Dataset, cfg: RunConfig) -> Dataset:
    if cfg.train.normalize_features:
        dataset, _ = normalize_features(dataset)
    return dataset


def train(
    dataset: Dataset,
    cfg: RunConfig,
    out_dir=None,
    resume: Optional[Checkpoint] = None,
    epochs: Optional[int] = None,
) -> TrainResult:
    """Run the epoch loop on an already-normalized dataset.

    With ``out_dir`` set, ``report.csv``, ``last.svld`` (resumable state after
    every epoch) and ``best.svld`` (best validation score) are written there.
    ``epochs`` stops early after that many total epochs, leaving the schedule
    sized for ``cfg.train.epochs``.
    """
    tc = cfg.train
    train_set = dataset.splits["train"]
    valid_set = dataset.splits.get("valid") or []
    train_ids = [s.id for s in train_set]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        if resume.config.config_hash() != cfg.config_hash():
            raise ValueError("resume checkpoint was produced by a different configuration")
        model = ScaleVLADModel(cfg, resume.params.detached())
        adam = AdamState({k: v.clone() for k, v in resume.adam.m.items()},
                         {k: v.clone() for k, v in resume.adam.v.items()}, resume.adam.t)
        clusters = [ClusterState(s.C, s.alpha, None if s.Z is None else s.Z.copy(), dict(s.assignments), s.active)
                    for s in resume.clusters]
        start_epoch, step = resume.epoch, resume.step
        best_score, best_epoch = resume.best_score, resume.best_epoch
        history = list(resume.history)
    else:
        model = ScaleVLADModel(cfg)
        adam = AdamState.zeros_like(model.params)
        clusters = init_states(cfg.s3c)
        start_epoch, step = 0, 0
        best_score, best_epoch = None, None
        history = []

    params = model.params
    best_params = params.detached()
    if resume is not None and out is not None and (out / "best.svld").exists():
        best_params = load_checkpoint(out / "best.svld", cfg.config_hash()).params
    total_steps = tc.epochs * steps_per_epoch(len(train_set), tc.batch_size)
    stop = tc.epochs if epochs is None else min(epochs, tc.epochs)
    refreshes: List[RefreshRecord] = []
    if resume is not None and out is not None and (out / "s3c.csv").exists():
        refreshes = [r for r in read_refresh_log(out / "s3c.csv") if r.epoch < start_epoch]
    s3c_weight = cfg.s3c.weight if cfg.s3c is not None else 0.0

    def snapshot(epoch_done: int) -> Checkpoint:
        return Checkpoint(cfg, params, adam, clusters, epoch_done, step, best_score, best_epoch, history)

    if out is not None and resume is None:
        save_checkpoint(out / "best.svld", snapshot(0))
        save_checkpoint(out / "last.svld", snapshot(0))
        write_report(out / "report.csv", history)

    for epoch in range(start_epoch, stop):
        if cfg.s3c is not None and epoch >= cfg.s3c.start_epoch:
            feats = model.fused_features(train_set).numpy()
            for i, st in enumerate(clusters):
                clusters[i], rec = refresh_epoch(
                    feats, train_ids, st, epoch, cfg.s3c.kmeans_iters, cfg.s3c.kmeans_seed + epoch
                )
                refreshes.append(rec)

        sums = {"loss": 0.0, "task_loss": 0.0, "s3c_loss": 0.0}
        seen = 0
        outs, labs = [], []
        batches = make_batches(train_set, tc.batch_size, seed=[tc.seed, epoch], shuffle=True)
        for b_idx, batch in enumerate(batches):
            params.requires_grad_(True)
            res = model.forward(batch)
            lt = task_loss(res.output, batch.labels, tc.task)
            ls = multi_s3c(res.fused, clusters, batch.ids)
            loss = total_loss(lt, ls, s3c_weight)
            names = list(params)
            grads_t = torch.autograd.grad(loss, [params[k] for k in names])
            params.requires_grad_(False)
            grads = {k: g.detach() for k, g in zip(names, grads_t)}
            loss, lt, ls = loss.detach(), lt.detach(), ls.detach()
            if not torch.isfinite(loss):
                norms = {k: float(g.norm()) for k, g in grads.items()}
                worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:5]
                raise NonFiniteLossError(
                    f"non-finite loss {float(loss)} at epoch {epoch} batch {b_idx}; gradient norms: {worst}"
                )
            clip_global_norm(grads, tc.clip_norm)
            adam_step(params, grads, adam, lr_at(step, total_steps, tc.peak_lr, tc.warmup_fraction),
                      tc.beta1, tc.beta2, tc.adam_eps)
            step += 1
            n = len(batch)
            seen += n
            sums["loss"] += float(loss) * n
            sums["task_loss"] += float(lt) * n
            sums["s3c_loss"] += float(ls) * n
            outs.append(res.output.detach())
            labs.append(batch.labels.numpy())

        row = {"epoch": epoch, "split": "train"}
        row.update({k: v / max(seen, 1) for k, v in sums.items()})
        if outs:
            row.update(task_report(tc.task, torch.cat(outs).numpy(), np.concatenate(labs)))
        history.append(row)

        if valid_set:
            ev = evaluate(model, valid_set)
            vrow = {"epoch": epoch, "split": "valid", "loss": ev.loss, "task_loss": ev.task_loss, "s3c_loss": None}
            vrow.update(ev.metrics)
            history.append(vrow)
            score = selection_score(tc.task, ev.metrics)
            if best_score is None or score > best_score:
                best_score, best_epoch = score, epoch
                best_params = params.detached()
                if out is not None:
                    save_checkpoint(out / "best.svld", snapshot(epoch + 1))
        log.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in row.items() if isinstance(v, float)})
        if out is not None:
            save_checkpoint(out / "last.svld", snapshot(epoch + 1))
            write_report(out / "report.csv", history)
            if refreshes:
                write_refresh_log(out / "s3c.csv", refreshes)

    result = TrainResult(model, history, clusters, refreshes, best_epoch, best_params)
    test_set = dataset.splits.get("test")
    if test_set and best_params is not None:
        result.test_metrics = evaluate(ScaleVLADModel(cfg, best_params), test_set).metrics
        if out is not None:
            (out / "test_metrics.json").write_text(
                json.dumps({"config_hash": cfg.config_hash(), "best_epoch": best_epoch,
                            "metrics": result.test_metrics}, indent=2, sort_keys=True) + "\n",
                encoding="utf-8",
            )
    return result
