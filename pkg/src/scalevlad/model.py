"""Full model: parameters addressed by name, batched forward pass."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import torch

from .config import RunConfig
from .data_io import Batch, MultimodalSample, collate
from .diffmath import DTYPE, masked_mean, mean_pool_windows
from .encoders import encode_frames, encode_text, init_encoder, project_common
from .fusion import (
    MODALITY_TAGS,
    FusionMatrix,
    SharedVectors,
    assignments_csv,
    build_fusion_matrix,
    fuse_and_predict,
    init_fusion,
    vlad_aggregate,
    vlad_assign,
    vlad_project,
)

_TAG = {"text": "T", "video": "V", "audio": "A"}


class ModelParams(OrderedDict):
    """Name -> float64 tensor. Insertion order is the canonical order."""

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.values():
            t.requires_grad_(flag)
        return self

    def detached(self) -> "ModelParams":
        return ModelParams((k, v.detach().clone()) for k, v in self.items())

    def count(self) -> int:
        return sum(t.numel() for t in self.values())


def init_params(cfg: RunConfig) -> ModelParams:
    gen = torch.Generator().manual_seed(int(cfg.train.seed))
    params: Dict[str, torch.Tensor] = OrderedDict()
    for enc in cfg.encoders():
        init_encoder(params, enc, cfg.fusion.d_s, gen)
    init_fusion(params, cfg.fusion, cfg.train.output_dim, gen)
    return ModelParams(params)


@dataclass
class ForwardResult:
    fused: torch.Tensor
    output: torch.Tensor
    R: Optional[FusionMatrix] = None
    assignments: Dict[Tuple[str, int], Tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)


class ScaleVLADModel:
    def __init__(self, cfg: RunConfig, params: Optional[ModelParams] = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)

    def encode(self, batch: Batch, params=None) -> Dict[str, Tuple[torch.Tensor, torch.Tensor]]:
        """Common-width sequences ``[B, n, d_s]`` with masks, per modality tag."""
        p = self.params if params is None else params
        cfg = self.cfg
        out = {}
        t_cfg = cfg.text
        text, tmask = batch.text[:, : t_cfg.max_len], batch.text_mask[:, : t_cfg.max_len]
        F = encode_text(text, tmask, p, t_cfg, batch.ids)
        out["T"] = (project_common(F, p, t_cfg, cfg.fusion.d_s), tmask)
        for enc, feats, mask in ((cfg.video, batch.video, batch.video_mask), (cfg.audio, batch.audio, batch.audio_mask)):
            feats, mask = feats[:, : enc.max_len], mask[:, : enc.max_len]
            F = encode_frames(feats, mask, p, enc)
            out[_TAG[enc.modality]] = (project_common(F, p, enc, cfg.fusion.d_s), mask)
        return out

    def forward(self, batch: Batch, params=None, details: bool = False) -> ForwardResult:
        p = self.params if params is None else params
        fcfg = self.cfg.fusion
        seqs = self.encode(batch, p)
        sv = SharedVectors.from_params(p)
        u, means, assign = {}, {}, {}
        for mod in MODALITY_TAGS:
            F, mask = seqs[mod]
            means[mod] = masked_mean(F, mask)
            for m in fcfg.scales:
                Fm, mm = mean_pool_windows(F, mask, m)
                w = vlad_assign(Fm, sv)
                r = vlad_aggregate(Fm, w, sv, mm)
                u[(mod, m)] = vlad_project(r, p, mod)
                if details:
                    assign[(mod, m)] = (w.detach(), mm)
        R = build_fusion_matrix(u, means, fcfg.scales)
        fused, output = fuse_and_predict(R, p, fcfg)
        return ForwardResult(fused, output, R if details else None, assign)

    __call__ = forward

    @torch.no_grad()
    def fused_features(self, samples: List[MultimodalSample], batch_size: int = 256) -> torch.Tensor:
        """Gradient-free fused features for a list of samples, in order."""
        feats = []
        for start in range(0, len(samples), batch_size):
            feats.append(self.forward(collate(samples[start : start + batch_size])).fused)
        return torch.cat(feats, dim=0)

    @torch.no_grad()
    def predict(self, samples: List[MultimodalSample], batch_size: int = 256) -> Tuple[torch.Tensor, torch.Tensor]:
        fused, outs = [], []
        for start in range(0, len(samples), batch_size):
            res = self.forward(collate(samples[start : start + batch_size]))
            fused.append(res.fused)
            outs.append(res.output)
        return torch.cat(fused), torch.cat(outs)


@torch.no_grad()
def dump_assignments(sample: MultimodalSample, model: ScaleVLADModel) -> str:
    """CSV of soft-assignment weights per (modality, scale, scaled token, anchor)."""
    res = model.forward(collate([sample]), details=True)
    blocks = {}
    for (mod, m), (w, mask) in res.assignments.items():
        blocks[(mod, m)] = w[0][mask[0]]
    return assignments_csv(blocks)

