import numpy as np
import pytest
import torch
from hypothesis import example, given, settings
from hypothesis import strategies as st

from scalevlad.config import FusionConfig
from scalevlad.diffmath import DTYPE, L2_EPS, DimensionError
from scalevlad.fusion import (
    SHARED_NAMES,
    FusionConsistencyError,
    SharedVectors,
    assignments_csv,
    build_fusion_matrix,
    init_fusion,
    parse_assignments_csv,
    row_tags,
    vlad_aggregate,
    vlad_assign,
)


def _sv(K, d, gen):
    return SharedVectors(
        torch.randn(K, d, generator=gen, dtype=DTYPE),
        torch.randn(K, d, generator=gen, dtype=DTYPE),
        torch.randn(K, generator=gen, dtype=DTYPE),
    )


def _vlad_oracle(F, c, c_hat, b):
    """Loop-level soft VLAD on numpy arrays."""
    n, d = F.shape
    K = c.shape[0]
    out = np.zeros((K, d))
    for i in range(n):
        logits = np.array([F[i] @ c[k] + b[k] for k in range(K)])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        for k in range(K):
            out[k] += w[k] * (F[i] - c_hat[k])
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.maximum(norms, 1e-12)


def test_vlad_matches_loop_oracle():
    gen = torch.Generator().manual_seed(0)
    sv = _sv(3, 4, gen)
    F = torch.randn(6, 4, generator=gen, dtype=DTYPE)
    r = vlad_aggregate(F, vlad_assign(F, sv), sv)
    ref = _vlad_oracle(F.numpy(), sv.c.numpy(), sv.c_hat.numpy(), sv.b.numpy())
    np.testing.assert_allclose(r.numpy(), ref, rtol=1e-12, atol=1e-13)


def test_masked_tokens_do_not_contribute():
    gen = torch.Generator().manual_seed(1)
    sv = _sv(2, 3, gen)
    F = torch.randn(1, 5, 3, generator=gen, dtype=DTYPE)
    mask = torch.tensor([[True, True, True, False, False]])
    full = vlad_aggregate(F, vlad_assign(F, sv), sv, mask)
    short = vlad_aggregate(F[:, :3], vlad_assign(F[:, :3], sv), sv)
    torch.testing.assert_close(full, short, rtol=0, atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(K=st.integers(1, 6), d=st.integers(1, 8), n=st.integers(1, 10), seed=st.integers(0, 2**31 - 1))
@example(K=5, d=5, n=1, seed=4330)
def test_structural_invariants(K, d, n, seed):
    gen = torch.Generator().manual_seed(seed)
    sv = _sv(K, d, gen)
    F = torch.randn(n, d, generator=gen, dtype=DTYPE) * 3
    w = vlad_assign(F, sv)
    assert torch.all(torch.abs(w.sum(-1) - 1.0) <= 1e-9)
    r = vlad_aggregate(F, w, sv)
    norms = r.norm(dim=-1)
    # rows whose raw residual is below the normalization guard are scaled, not normalized
    raw = (w.T @ F - w.sum(0)[:, None] * sv.c_hat).norm(dim=-1)
    assert torch.all((torch.abs(norms - 1.0) <= 1e-9) | (raw <= L2_EPS))
    perm = torch.randperm(n, generator=gen)
    rp = vlad_aggregate(F[perm], vlad_assign(F[perm], sv), sv)
    assert float((rp - r).abs().max()) <= 1e-12


def test_zero_residual_row_stays_zero():
    c_hat = torch.tensor([[1.0, 2.0]], dtype=DTYPE)
    sv = SharedVectors(torch.zeros(1, 2, dtype=DTYPE), c_hat, torch.zeros(1, dtype=DTYPE))
    F = c_hat.clone()
    r = vlad_aggregate(F, vlad_assign(F, sv), sv)
    assert float(r.abs().sum()) == 0.0


def test_aggregate_shape_mismatch():
    gen = torch.Generator().manual_seed(0)
    sv = _sv(2, 3, gen)
    with pytest.raises(DimensionError):
        vlad_assign(torch.zeros(4, 5, dtype=DTYPE), sv)
    with pytest.raises(DimensionError):
        vlad_aggregate(torch.zeros(4, 3, dtype=DTYPE), torch.zeros(3, 2, dtype=DTYPE), sv)


@pytest.mark.parametrize("scales", [[1], [1, 2], [1, 2, 3], [1, 3, 7, 9]])
def test_fusion_matrix_rows_and_order(scales):
    d = 4
    u = {(mod, m): torch.full((2, d), float(10 * m + i), dtype=DTYPE) for m in scales for i, mod in enumerate("TVA")}
    means = {mod: torch.full((2, d), -1.0 - i, dtype=DTYPE) for i, mod in enumerate("TVA")}
    R = build_fusion_matrix(u, means, scales)
    assert R.rows.shape == (2, 3 * len(scales) + 3, d)
    assert R.row_tags == row_tags(scales)
    assert R.row_tags[:3] == [("T", "1"), ("V", "1"), ("A", "1")]
    assert R.row_tags[-3:] == [("T", "mean"), ("V", "mean"), ("A", "mean")]
    assert float(R.rows[0, 1, 0]) == 11.0
    assert float(R.rows[0, -1, 0]) == -3.0


def test_fusion_matrix_missing_row():
    d = 2
    u = {("T", 1): torch.zeros(1, d, dtype=DTYPE), ("V", 1): torch.zeros(1, d, dtype=DTYPE)}
    means = {m: torch.zeros(1, d, dtype=DTYPE) for m in "TVA"}
    with pytest.raises(FusionConsistencyError):
        build_fusion_matrix(u, means, [1])


@pytest.mark.parametrize("scales", [[1], [1, 2, 3], [1, 2, 4, 8]])
def test_exactly_one_shared_anchor_set(scales):
    params = {}
    init_fusion(params, FusionConfig(scales=scales, K=3, d_s=4, fusion_heads=2), 2, torch.Generator().manual_seed(0))
    anchor_like = [k for k in params if k.startswith("shared.")]
    assert sorted(anchor_like) == sorted(SHARED_NAMES)
    assert params["shared.c"].shape == (3, 4)


def test_assignment_csv_round_trip():
    gen = torch.Generator().manual_seed(0)
    blocks = {("T", 1): torch.rand(3, 2, generator=gen, dtype=DTYPE), ("A", 2): torch.rand(1, 2, generator=gen, dtype=DTYPE)}
    parsed = parse_assignments_csv(assignments_csv(blocks))
    for key, w in blocks.items():
        assert parsed[key] == w.tolist()
