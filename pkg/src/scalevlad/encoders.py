"""Unimodal Transformer encoders and the projection to the fusion width."""

from __future__ import annotations

import math
from typing import Dict, Mapping, Optional

import torch

from .config import EncoderConfig
from .data_io import DataError
from .diffmath import (
    DTYPE,
    ConfigurationError,
    EmptySequenceError,
    init_transformer,
    init_uniform,
    linear,
    transformer_encoder,
)


def init_encoder(params: Dict[str, torch.Tensor], cfg: EncoderConfig, d_s: int, gen: torch.Generator) -> None:
    p, h = cfg.modality, cfg.hidden_dim
    if cfg.modality == "text" and cfg.text_input == "tokens":
        params[f"{p}.embed"] = torch.randn((cfg.input_dim, h), generator=gen, dtype=DTYPE) * 0.1
    elif cfg.modality != "text":
        bound = math.sqrt(6.0 / (cfg.input_dim + h))
        params[f"{p}.in.w"] = init_uniform((cfg.input_dim, h), bound, gen)
        params[f"{p}.in.b"] = torch.zeros(h, dtype=DTYPE)
    params[f"{p}.pos"] = torch.randn((cfg.max_len, h), generator=gen, dtype=DTYPE) * 0.1
    init_transformer(params, f"{p}.enc", h, cfg.layers, cfg.heads, gen, cfg.ffn_mult)
    if needs_projection(cfg, d_s):
        bound = math.sqrt(6.0 / (h + d_s))
        params[f"{p}.proj.w"] = init_uniform((h, d_s), bound, gen)
        params[f"{p}.proj.b"] = torch.zeros(d_s, dtype=DTYPE)


def needs_projection(cfg: EncoderConfig, d_s: int) -> bool:
    return cfg.project or cfg.hidden_dim != d_s


def _truncate(x: torch.Tensor, mask: torch.Tensor, max_len: int):
    return x[:, :max_len], mask[:, :max_len]


def _encode(x: torch.Tensor, mask: torch.Tensor, params: Mapping[str, torch.Tensor], cfg: EncoderConfig):
    if not mask.any(dim=-1).all():
        raise EmptySequenceError(f"{cfg.modality}: sample with no valid positions")
    n = x.shape[1]
    x = x + params[f"{cfg.modality}.pos"][:n]
    return transformer_encoder(x, mask, params, f"{cfg.modality}.enc", cfg.layers, cfg.heads)


def encode_text(
    text: torch.Tensor,
    mask: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    cfg: EncoderConfig,
    ids: Optional[list] = None,
) -> torch.Tensor:
    """Token ids ``[B, n]`` (or precomputed rows ``[B, n, d_t]``) to ``[B, n, d_t]``."""
    text, mask = _truncate(text, mask, cfg.max_len)
    if cfg.text_input == "tokens":
        if text.dtype != torch.long:
            raise DataError("text encoder configured for token ids but received feature rows")
        bad = (text >= cfg.input_dim) | (text < 0)
        if (bad & mask).any():
            row = int((bad & mask).any(dim=-1).nonzero()[0])
            name = ids[row] if ids is not None else f"#{row}"
            raise DataError(f"sample {name}: token id outside vocabulary of size {cfg.input_dim}")
        x = params["text.embed"][text.clamp(0, cfg.input_dim - 1)]
    else:
        if text.dim() != 3 or text.shape[-1] != cfg.hidden_dim:
            raise DataError(f"precomputed text features must have width {cfg.hidden_dim}")
        x = text
    return _encode(x, mask, params, cfg)


def encode_frames(
    feats: torch.Tensor, mask: torch.Tensor, params: Mapping[str, torch.Tensor], cfg: EncoderConfig
) -> torch.Tensor:
    """Video or audio frames ``[B, n, d_raw]`` to ``[B, n, hidden]``."""
    if feats.shape[-1] != cfg.input_dim:
        raise DataError(f"{cfg.modality}: feature width {feats.shape[-1]} != configured {cfg.input_dim}")
    feats, mask = _truncate(feats, mask, cfg.max_len)
    x = linear(feats, params[f"{cfg.modality}.in.w"], params[f"{cfg.modality}.in.b"])
    return _encode(x, mask, params, cfg)


def encode_video(feats, mask, params, cfg: EncoderConfig) -> torch.Tensor:
    return encode_frames(feats, mask, params, cfg)


def encode_audio(feats, mask, params, cfg: EncoderConfig) -> torch.Tensor:
    return encode_frames(feats, mask, params, cfg)


def project_common(
    F: torch.Tensor, params: Mapping[str, torch.Tensor], cfg: EncoderConfig, d_s: int
) -> torch.Tensor:
    if F.shape[-1] != cfg.hidden_dim:
        raise ConfigurationError(f"{cfg.modality}: width {F.shape[-1]} != hidden_dim {cfg.hidden_dim}")
    if not needs_projection(cfg, d_s):
        return F
    return linear(F, params[f"{cfg.modality}.proj.w"], params[f"{cfg.modality}.proj.b"])
