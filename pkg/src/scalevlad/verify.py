"""Finite-difference verification suites used by ``scalevlad gradcheck``."""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import RunConfig
from .data_io import MultimodalSample, collate
from .diffmath import (
    DTYPE,
    GradCheckReport,
    gelu,
    grad_check,
    init_transformer,
    l2_normalize,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    mean_pool_windows,
    softmax,
    transformer_encoder,
)
from .fusion import SharedVectors, vlad_aggregate, vlad_assign, vlad_project
from .model import ModelParams, ScaleVLADModel
from .s3c import ClusterState, multi_s3c, refresh_epoch
from .training import task_loss, total_loss


def _randn(gen, *shape):
    return torch.randn(shape, generator=gen, dtype=DTYPE)


def _prefix_mask(gen, B: int, n: int) -> torch.Tensor:
    lengths = torch.randint(1, n + 1, (B,), generator=gen)
    return torch.arange(n)[None, :] < lengths[:, None]


def op_cases(seed: int) -> List[Tuple[str, Callable, Dict[str, torch.Tensor]]]:
    """One randomly shaped instance of every differentiable kernel."""
    gen = torch.Generator().manual_seed(seed)
    ri = lambda lo, hi: int(torch.randint(lo, hi + 1, (1,), generator=gen))  # noqa: E731
    n, p, q = ri(1, 5), ri(1, 5), ri(1, 5)
    cases = []
    cases.append(("linear", lambda x, W, b: linear(x, W, b),
                  {"x": _randn(gen, n, p), "W": _randn(gen, p, q), "b": _randn(gen, q)}))
    cases.append(("matmul", lambda a, b: matmul(a, b),
                  {"a": _randn(gen, 2, n, p), "b": _randn(gen, 2, p, q)}))
    cases.append(("softmax", lambda x: softmax(x), {"x": _randn(gen, n, q) * 2}))
    cases.append(("log_softmax", lambda x: log_softmax(x), {"x": _randn(gen, n, q) * 2}))
    cases.append(("gelu", lambda x: gelu(x), {"x": _randn(gen, n, q) * 2}))
    d = ri(2, 6)
    cases.append(("layer_norm", lambda x, gamma, beta: layer_norm(x, gamma, beta),
                  {"x": _randn(gen, n, d), "gamma": _randn(gen, d), "beta": _randn(gen, d)}))
    cases.append(("l2_normalize", lambda v: l2_normalize(v), {"v": _randn(gen, n, d)}))
    L, m = ri(2, 7), ri(1, 3)
    mask = _prefix_mask(gen, 2, L)
    cases.append(("mean_pool_windows", lambda x: mean_pool_windows(x, mask, m)[0],
                  {"x": _randn(gen, 2, L, d)}))
    heads = 2
    dim = 2 * ri(1, 3)
    tparams: Dict[str, torch.Tensor] = {}
    init_transformer(tparams, "t", dim, 1, heads, gen, ffn_mult=2)
    names = list(tparams)
    tmask = _prefix_mask(gen, 2, L)

    def enc(x, **ps):
        return transformer_encoder(x, tmask, ps, "t", 1, heads)

    cases.append(("transformer_encoder", enc, {"x": _randn(gen, 2, L, dim), **tparams}))
    K = ri(1, 4)
    sv_in = {"c": _randn(gen, K, d), "c_hat": _randn(gen, K, d), "b": _randn(gen, K)}
    cases.append(("vlad_assign", lambda F, c, c_hat, b: vlad_assign(F, SharedVectors(c, c_hat, b)),
                  {"F": _randn(gen, n, d), **sv_in}))
    cases.append((
        "vlad_aggregate",
        lambda F, c, c_hat, b: vlad_aggregate(F, vlad_assign(F, SharedVectors(c, c_hat, b)), SharedVectors(c, c_hat, b)),
        {"F": _randn(gen, n, d), **sv_in},
    ))
    proj = {
        "vlad.T.w": _randn(gen, K * d, d) * 0.5,
        "vlad.T.b": _randn(gen, d),
        "vlad.T.ln.gamma": _randn(gen, d),
        "vlad.T.ln.beta": _randn(gen, d),
    }
    cases.append(("vlad_project", lambda r, **ps: vlad_project(r, ps, "T"),
                  {"r": l2_normalize(_randn(gen, 2, K, d)), **proj}))
    C = ri(2, 4)
    Z = _randn(gen, C, d).numpy()
    ids = [f"x{i}" for i in range(n)]
    state = ClusterState(C, 0.99, Z, {sid: i % C for i, sid in enumerate(ids)}, True)
    cases.append(("s3c_loss", lambda fused: multi_s3c(fused, [state], ids), {"fused": _randn(gen, n, d)}))
    labels = torch.randint(0, q, (n,), generator=gen) if q > 1 else torch.zeros(n, dtype=torch.long)
    cases.append(("task_loss[classification]", lambda o: task_loss(o, labels, "classification"),
                  {"o": _randn(gen, n, max(q, 1))}))
    y = _randn(gen, n)
    cases.append(("task_loss[regression]", lambda o: task_loss(o, y, "regression"), {"o": _randn(gen, n, 1)}))
    bits = torch.randint(0, 2, (n, 4), generator=gen)
    cases.append(("task_loss[multilabel]", lambda o: task_loss(o, bits, "multilabel"), {"o": _randn(gen, n, 8)}))
    return cases


def run_op_suite(seeds: Sequence[int], eps: float = 1e-5, tol: float = 1e-4) -> Dict[str, GradCheckReport]:
    """Worst report per kernel over the given seeds."""
    worst: Dict[str, GradCheckReport] = {}
    for seed in seeds:
        for name, fn, inputs in op_cases(seed):
            rep = grad_check(fn, inputs, eps=eps, tol=tol, seed=seed)
            if name not in worst or rep.max_rel_error > worst[name].max_rel_error:
                worst[name] = rep
    return worst


def end_to_end_loss_fn(model: ScaleVLADModel, samples: Sequence[MultimodalSample], with_s3c: bool = True):
    """Total loss as a function of named parameters, on a fixed mini-batch.

    When ``with_s3c`` is set, one active clustering (C=2) built from the
    model's own fused features is included, so the shifted-clustering term
    contributes to the gradient as well.
    """
    batch = collate(list(samples))
    states: List[ClusterState] = []
    if with_s3c:
        feats = model.fused_features(list(samples)).numpy()
        st, _ = refresh_epoch(feats, batch.ids, ClusterState(C=2), epoch=0, iters=10, seed=0)
        states = [st]
    task = model.cfg.train.task

    def fn(**params):
        res = model.forward(batch, params)
        lt = task_loss(res.output, batch.labels, task)
        return total_loss(lt, multi_s3c(res.fused, states, batch.ids))

    return fn


def end_to_end_gradcheck(
    cfg: RunConfig,
    samples: Sequence[MultimodalSample],
    params: Optional[ModelParams] = None,
    max_entries: Optional[int] = None,
    eps: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    model = ScaleVLADModel(cfg, params)
    fn = end_to_end_loss_fn(model, samples)
    return grad_check(fn, dict(model.params), eps=eps, tol=tol, max_entries=max_entries, seed=seed)
