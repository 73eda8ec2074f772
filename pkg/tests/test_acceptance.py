"""Acceptance criteria, one test each, at their stated tolerances.

Criteria 5-7 share one sweep: five data seeds, each trained with
scales {1}, scales {1,2,3}, and scales {1,2,3} with shifted clustering
(C=4 from epoch 5). The sweep takes roughly 15 minutes on one core.
"""

import time

import numpy as np
import pytest
import torch

from scalevlad.config import S3CConfig, toy_config
from scalevlad.checkpoint import load_checkpoint
from scalevlad.diffmath import L2_EPS
from scalevlad.data_io import MultimodalSample, collate, load_dataset, synth_generate
from scalevlad.fusion import SharedVectors, vlad_aggregate, vlad_assign
from scalevlad.metrics import binary_acc_f1, mae, multilabel_report, pearson_corr
from scalevlad.model import ScaleVLADModel, init_params
from scalevlad.s3c import kmeans, kmeans_pp_init, momentum_update, separation_ratio
from scalevlad.training import evaluate, prepare_dataset, train
from scalevlad.verify import end_to_end_gradcheck, run_op_suite

from conftest import tiny_config
from test_metrics import ba_oracle, corr_oracle, f1_oracle
from test_s3c import lloyd_reference

SEEDS = (1, 2, 3, 4, 5)


def test_criterion_1_gradient_suite(small_dataset, small_data, record_acceptance):
    start = time.perf_counter()
    ops = run_op_suite(range(3))
    cfg = tiny_config(small_data)
    e2e = end_to_end_gradcheck(cfg, small_dataset.splits["train"][:2])
    elapsed = time.perf_counter() - start
    worst_op = max(r.max_rel_error for r in ops.values())
    ok = all(r.passed for r in ops.values()) and e2e.passed and elapsed < 180
    record_acceptance(
        1, ok,
        f"ops max rel err {worst_op:.2e}, end-to-end {e2e.max_rel_error:.2e} over {e2e.checked} entries "
        f"of {len(e2e.per_input)} parameters, {elapsed:.0f}s (limits 1e-4, 180s)",
    )
    assert ok


def test_criterion_2_structural_invariants(record_acceptance):
    rng = np.random.default_rng(0)
    worst_sum = worst_norm = worst_perm = 0.0
    rows_ok = shared_ok = True
    for i in range(200):
        K, d, n = int(rng.integers(1, 7)), 2 * int(rng.integers(1, 5)), int(rng.integers(1, 15))
        gen = torch.Generator().manual_seed(i)
        sv = SharedVectors(*(torch.randn(s, generator=gen, dtype=torch.float64) for s in ((K, d), (K, d), (K,))))
        F = torch.randn(n, d, generator=gen, dtype=torch.float64) * 2
        w = vlad_assign(F, sv)
        worst_sum = max(worst_sum, float((w.sum(-1) - 1).abs().max()))
        r = vlad_aggregate(F, w, sv)
        norms = r.norm(dim=-1)
        raw = (w.T @ F - w.sum(0)[:, None] * sv.c_hat).norm(dim=-1)
        dev = torch.where(raw <= L2_EPS, torch.zeros_like(norms), (norms - 1).abs())
        worst_norm = max(worst_norm, float(dev.max()))
        perm = torch.randperm(n, generator=gen)
        worst_perm = max(worst_perm, float((vlad_aggregate(F[perm], vlad_assign(F[perm], sv), sv) - r).abs().max()))

        scales = sorted({1} | set(int(s) for s in rng.integers(1, 6, size=int(rng.integers(0, 4)))))
        cfg = toy_config("", d_s=d, K=K, scales=scales, hidden=d, heads=2, seed=i)
        params = init_params(cfg)
        shared = [k for k in params if k.startswith("shared.")]
        shared_ok &= sorted(shared) == ["shared.b", "shared.c", "shared.c_hat"]
        if i % 10 == 0:
            length = int(rng.integers(1, 12))
            s = MultimodalSample("x", rng.integers(0, 50, length), rng.normal(size=(length + 2, 8)),
                                 rng.normal(size=(length + 1, 6)), 0)
            res = ScaleVLADModel(cfg, params).forward(collate([s]), details=True)
            rows_ok &= res.R.rows.shape[1] == 3 * len(scales) + 3
            for wk, mask in res.assignments.values():
                worst_sum = max(worst_sum, float((wk[mask].sum(-1) - 1).abs().max()))
    ok = worst_sum <= 1e-9 and worst_norm <= 1e-9 and worst_perm <= 1e-12 and rows_ok and shared_ok
    record_acceptance(
        2, ok,
        f"row-sum dev {worst_sum:.1e}, norm dev {worst_norm:.1e}, permutation dev {worst_perm:.1e}, "
        f"row counts ok={rows_ok}, single shared set ok={shared_ok}",
    )
    assert ok


def test_criterion_3_clustering_oracle(record_acceptance):
    exact = monotone = True
    for inst in range(50):
        rng = np.random.default_rng(500 + inst)
        n = int(rng.integers(4, 65))
        d = int(rng.integers(1, 5))
        C = int(rng.integers(2, min(8, n) + 1))
        X = rng.normal(size=(n, d))
        if inst % 4 == 0:
            X = np.round(X * 2) / 2
        res = kmeans(X, C, iters=100, seed=42)
        ref_c, ref_l, _ = lloyd_reference(X, kmeans_pp_init(X, C, 42), 100)
        exact &= np.array_equal(res.labels, ref_l) and np.array_equal(res.centers, ref_c)
        monotone &= all(b <= a for a, b in zip(res.distortion, res.distortion[1:]))
    rng = np.random.default_rng(7)
    ema_dev = 0.0
    for alpha in (0.0, 0.25, 0.99, 1.0):
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        ema_dev = max(ema_dev, float(np.abs(momentum_update(a, b, alpha) - (alpha * a + (1 - alpha) * b)).max()))
    ok = exact and monotone and ema_dev <= 1e-12
    record_acceptance(3, ok, f"exact match={exact}, distortion monotone={monotone}, EMA dev {ema_dev:.1e}")
    assert ok


def test_criterion_4_metrics_oracle(record_acceptance):
    worst = 0.0
    conv_equal = True
    for i in range(100):
        rng = np.random.default_rng(9000 + i)
        n = int(rng.integers(3, 50))
        labels = np.round(rng.uniform(-3, 3, n) * 2) / 2
        labels[0], labels[1] = 1.5, -1.0
        preds = rng.normal(size=n) * 2
        for conv in "AB":
            acc, f1 = binary_acc_f1(preds, labels, conv)
            r_acc, r_f1 = ba_oracle(preds.tolist(), labels.tolist(), conv)
            worst = max(worst, abs(acc - r_acc), abs(f1 - r_f1))
        worst = max(worst, abs(mae(preds, labels) - float(np.mean(np.abs(preds - labels)))))
        worst = max(worst, abs(pearson_corr(preds, labels) - corr_oracle(preds.tolist(), labels.tolist())))
        nz = np.where(labels == 0, 0.5, labels)
        conv_equal &= binary_acc_f1(preds, nz, "A") == binary_acc_f1(preds, nz, "B")
        logits, bits = rng.normal(size=(n, 8)), rng.integers(0, 2, size=(n, 4))
        rep = multilabel_report(logits, bits)
        for e, name in enumerate(("happy", "sad", "angry", "neutral")):
            pred = [int(logits[j, 2 * e + 1] > logits[j, 2 * e]) for j in range(n)]
            true = bits[:, e].tolist()
            worst = max(worst, abs(rep[f"Acc_{name}"] - sum(p == t for p, t in zip(pred, true)) / n))
            worst = max(worst, abs(rep[f"F1_{name}"] - f1_oracle(pred, true)))
    ok = worst <= 1e-9 and conv_equal
    record_acceptance(4, ok, f"max deviation {worst:.1e}, A==B without zero labels: {conv_equal}")
    assert ok


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    results = {}
    root = tmp_path_factory.mktemp("sweep")
    for seed in SEEDS:
        manifest = synth_generate(2000, seed, root / f"data{seed}")
        variants = {
            "single": dict(scales=(1,)),
            "multi": dict(scales=(1, 2, 3)),
            "s3c": dict(scales=(1, 2, 3), s3c=S3CConfig([4], start_epoch=5)),
        }
        for name, kw in variants.items():
            cfg = toy_config(str(manifest), seed=seed, **kw)
            ds = prepare_dataset(load_dataset(manifest), cfg)
            start = time.perf_counter()
            res = train(ds, cfg)
            elapsed = time.perf_counter() - start
            final = evaluate(res.model, ds.splits["test"])
            results[(seed, name)] = {
                "selected_acc": res.test_metrics["Acc"],
                "final_acc": final.metrics["Acc"],
                "ratio": separation_ratio(final.fused.numpy(), 4),
                "seconds": elapsed,
            }
            print(seed, name, results[(seed, name)])
    return results


def test_criterion_5_toy_learning(sweep, record_acceptance):
    r = sweep[(1, "multi")]
    ok = r["selected_acc"] >= 0.90 and r["seconds"] < 900
    record_acceptance(5, ok, f"held-out accuracy {r['selected_acc']:.4f} (>= 0.90), {r['seconds']:.0f}s (< 900s)")
    assert ok


def test_criterion_6_multiscale_ablation(sweep, record_acceptance):
    multi = np.mean([sweep[(s, "multi")]["selected_acc"] for s in SEEDS])
    single = np.mean([sweep[(s, "single")]["selected_acc"] for s in SEEDS])
    gap = 100 * (multi - single)
    ok = multi > single and gap >= 2.0
    record_acceptance(6, ok, f"mean accuracy {{1,2,3}} {multi:.4f} vs {{1}} {single:.4f}, gap {gap:.1f} points (>= 2)")
    assert ok


def test_criterion_7_s3c_effect(sweep, record_acceptance):
    lower = sum(sweep[(s, "s3c")]["ratio"] < sweep[(s, "multi")]["ratio"] for s in SEEDS)
    drop = 100 * np.mean([sweep[(s, "multi")]["final_acc"] - sweep[(s, "s3c")]["final_acc"] for s in SEEDS])
    ratios = ", ".join(f"{sweep[(s, 's3c')]['ratio']:.3f}/{sweep[(s, 'multi')]['ratio']:.3f}" for s in SEEDS)
    ok = lower >= 4 and drop <= 1.0
    record_acceptance(
        7, ok,
        f"ratio lower with S3C on {lower}/5 seeds (on/off: {ratios}), mean accuracy drop {drop:.2f} points (<= 1)",
    )
    assert ok


def test_criterion_8_determinism_and_persistence(small_dataset, small_data, tmp_path, record_acceptance):
    cfg = tiny_config(small_data, epochs=3, s3c=S3CConfig([2], start_epoch=1, kmeans_iters=20))
    train(small_dataset, cfg, tmp_path / "a")
    train(small_dataset, cfg, tmp_path / "b")
    same_csv = (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
    train(small_dataset, cfg, tmp_path / "c", epochs=2)
    ckpt = load_checkpoint(tmp_path / "c" / "last.svld", cfg.config_hash())
    resumed = train(small_dataset, cfg, tmp_path / "c", resume=ckpt)
    full = train(small_dataset, cfg)
    dev = 0.0
    for a, b in zip(full.history[4:], resumed.history[4:]):
        for key in ("loss", "task_loss", "s3c_loss"):
            if a[key] is not None:
                dev = max(dev, abs(a[key] - b[key]))
    ok = same_csv and dev <= 1e-12 and len(resumed.history) == len(full.history)
    record_acceptance(8, ok, f"identical report CSVs={same_csv}, resumed epoch loss dev {dev:.1e} (<= 1e-12)")
    assert ok
