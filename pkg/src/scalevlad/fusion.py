"""ScaleVLAD: multi-scale soft-VLAD aggregation against shared anchors,
fusion Transformer, max pooling and the output head."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch

from .config import FusionConfig
from .diffmath import (
    DTYPE,
    DimensionError,
    gelu,
    init_transformer,
    init_uniform,
    l2_normalize,
    layer_norm,
    linear,
    matmul,
    softmax,
    transformer_encoder,
)

MODALITY_TAGS = ("T", "V", "A")
SHARED_NAMES = ("shared.c", "shared.c_hat", "shared.b")
ASSIGNMENT_HEADER = ("modality", "scale", "token", "k", "weight")


class FusionConsistencyError(RuntimeError):
    pass


@dataclass
class SharedVectors:
    c: torch.Tensor  # [K, d_s] assignment anchors
    c_hat: torch.Tensor  # [K, d_s] residual anchors
    b: torch.Tensor  # [K]

    @classmethod
    def from_params(cls, params: Mapping[str, torch.Tensor]) -> "SharedVectors":
        return cls(*(params[n] for n in SHARED_NAMES))

    @property
    def K(self) -> int:
        return self.c.shape[0]


@dataclass
class FusionMatrix:
    rows: torch.Tensor  # [B, 3|m|+3, d_s]
    row_tags: List[Tuple[str, str]]


def row_tags(scales: Sequence[int]) -> List[Tuple[str, str]]:
    tags = [(mod, str(m)) for m in scales for mod in MODALITY_TAGS]
    return tags + [(mod, "mean") for mod in MODALITY_TAGS]


def init_fusion(params: Dict[str, torch.Tensor], cfg: FusionConfig, out_dim: int, gen: torch.Generator) -> None:
    d, K = cfg.d_s, cfg.K
    bound = 1.0 / math.sqrt(d)
    params["shared.c"] = init_uniform((K, d), bound, gen)
    params["shared.c_hat"] = init_uniform((K, d), bound, gen)
    params["shared.b"] = torch.zeros(K, dtype=DTYPE)
    for mod in MODALITY_TAGS:
        params[f"vlad.{mod}.w"] = init_uniform((K * d, d), math.sqrt(6.0 / (K * d + d)), gen)
        params[f"vlad.{mod}.b"] = torch.zeros(d, dtype=DTYPE)
        params[f"vlad.{mod}.ln.gamma"] = torch.ones(d, dtype=DTYPE)
        params[f"vlad.{mod}.ln.beta"] = torch.zeros(d, dtype=DTYPE)
    params["fusion.slots"] = torch.randn((3 * len(cfg.scales) + 3, d), generator=gen, dtype=DTYPE) * 0.1
    init_transformer(params, "fusion.enc", d, cfg.fusion_layers, cfg.fusion_heads, gen, cfg.ffn_mult)
    params["head.w"] = init_uniform((d, out_dim), math.sqrt(6.0 / (d + out_dim)), gen)
    params["head.b"] = torch.zeros(out_dim, dtype=DTYPE)


def vlad_assign(F: torch.Tensor, sv: SharedVectors) -> torch.Tensor:
    """Soft assignment of each (scaled) token to the K anchors, ``[..., n', K]``."""
    if F.shape[-1] != sv.c.shape[1]:
        raise DimensionError(f"vlad_assign: feature width {F.shape[-1]} != anchor width {sv.c.shape[1]}")
    logits = linear(F, sv.c.transpose(0, 1), sv.b)
    return softmax(logits)


def vlad_aggregate(
    F: torch.Tensor, w: torch.Tensor, sv: SharedVectors, mask: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Residual sums ``sum_i w_ij (f_i - c_hat_j)``, each row l2-normalized.

    ``F`` is ``[..., n', d]``, ``w`` ``[..., n', K]``; masked tokens contribute
    nothing. Returns ``[..., K, d]``.
    """
    if w.shape[:-1] != F.shape[:-1] or w.shape[-1] != sv.K:
        raise DimensionError(f"vlad_aggregate: F {tuple(F.shape)} vs w {tuple(w.shape)}")
    if mask is not None:
        w = w * mask[..., None].to(w.dtype)
    wt = w.transpose(-1, -2)
    mass = wt.sum(dim=-1, keepdim=True)  # [..., K, 1]
    resid = matmul(wt, F) - mass * sv.c_hat
    return l2_normalize(resid)


def vlad_project(
    r: torch.Tensor, params: Mapping[str, torch.Tensor], modality: str
) -> torch.Tensor:
    """Flatten ``[..., K, d]`` row-major and map through GELU + LayerNorm to ``[..., d]``."""
    flat = r.reshape(*r.shape[:-2], r.shape[-2] * r.shape[-1])
    h = gelu(linear(flat, params[f"vlad.{modality}.w"], params[f"vlad.{modality}.b"]))
    return layer_norm(h, params[f"vlad.{modality}.ln.gamma"], params[f"vlad.{modality}.ln.beta"])


def build_fusion_matrix(
    u: Mapping[Tuple[str, int], torch.Tensor],
    means: Mapping[str, torch.Tensor],
    scales: Sequence[int],
) -> FusionMatrix:
    """Stack per-scale rows (T, V, A for each scale) then the three mean rows."""
    rows = []
    for m in scales:
        for mod in MODALITY_TAGS:
            if (mod, m) not in u:
                raise FusionConsistencyError(f"missing aggregated row for modality {mod} at scale {m}")
            rows.append(u[(mod, m)])
    for mod in MODALITY_TAGS:
        if mod not in means:
            raise FusionConsistencyError(f"missing mean row for modality {mod}")
        rows.append(means[mod])
    widths = {r.shape[-1] for r in rows}
    if len(widths) != 1:
        raise FusionConsistencyError(f"fusion rows have mixed widths {sorted(widths)}")
    return FusionMatrix(torch.stack(rows, dim=-2), row_tags(scales))


def fuse_and_predict(
    R: FusionMatrix, params: Mapping[str, torch.Tensor], cfg: FusionConfig
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Fusion Transformer over the rows, per-dimension max, linear head."""
    x = R.rows + params["fusion.slots"][: R.rows.shape[-2]]
    mask = torch.ones(x.shape[:-1], dtype=torch.bool)
    x = transformer_encoder(x, mask, params, "fusion.enc", cfg.fusion_layers, cfg.fusion_heads)
    fused = x.amax(dim=-2)
    return fused, linear(fused, params["head.w"], params["head.b"])


def assignments_csv(blocks: Mapping[Tuple[str, int], torch.Tensor]) -> str:
    """Render per-(modality, scale) assignment matrices ``[n', K]`` as CSV."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ASSIGNMENT_HEADER)
    for (mod, m), w in blocks.items():
        for t, row in enumerate(w.tolist()):
            for k, val in enumerate(row):
                writer.writerow((mod, m, t, k, repr(float(val))))
    return buf.getvalue()


def parse_assignments_csv(text: str) -> Dict[Tuple[str, int], List[List[float]]]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != ASSIGNMENT_HEADER:
        raise ValueError(f"unexpected header {header}")
    blocks: Dict[Tuple[str, int], List[List[float]]] = {}
    for mod, m, t, k, val in reader:
        rows = blocks.setdefault((mod, int(m)), [])
        t, k = int(t), int(k)
        while len(rows) <= t:
            rows.append([])
        if len(rows[t]) != k:
            raise ValueError(f"out-of-order entry ({mod}, {m}, {t}, {k})")
        rows[t].append(float(val))
    return blocks
