"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    b"SVLD" | u32 version | 32-byte config sha256
    u64 metadata length | metadata JSON (UTF-8, sorted keys)
    u32 tensor count
    per tensor: u32 name length | name | u32 ndim | u64 dims... | f64 values
    32-byte sha256 over everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .config import RunConfig
from .diffmath import DTYPE
from .model import ModelParams
from .s3c import ClusterState

MAGIC = b"SVLD"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(
            {k: torch.zeros_like(p, dtype=DTYPE).detach() for k, p in params.items()},
            {k: torch.zeros_like(p, dtype=DTYPE).detach() for k, p in params.items()},
            0,
        )


@dataclass
class Checkpoint:
    config: RunConfig
    params: ModelParams
    adam: AdamState
    clusters: List[ClusterState]
    epoch: int = 0
    step: int = 0
    best_score: Optional[float] = None
    best_epoch: Optional[int] = None
    history: List[dict] = field(default_factory=list)


def _tensor_bytes(name: str, t: torch.Tensor) -> bytes:
    arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def to_bytes(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.config
    meta = {
        "config": cfg.to_dict(),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "adam_t": ckpt.adam.t,
        "best_score": ckpt.best_score,
        "best_epoch": ckpt.best_epoch,
        "history": ckpt.history,
        "param_names": list(ckpt.params),
        "clusters": [
            {"C": s.C, "alpha": s.alpha, "active": s.active, "has_Z": s.Z is not None,
             "assignments": s.assignments}
            for s in ckpt.clusters
        ],
    }
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = []
    for name, p in ckpt.params.items():
        tensors.append(_tensor_bytes(f"param/{name}", p))
    for name in ckpt.params:
        tensors.append(_tensor_bytes(f"adam.m/{name}", ckpt.adam.m[name]))
        tensors.append(_tensor_bytes(f"adam.v/{name}", ckpt.adam.v[name]))
    for i, s in enumerate(ckpt.clusters):
        if s.Z is not None:
            tensors.append(_tensor_bytes(f"s3c/{i}/Z", torch.from_numpy(np.asarray(s.Z))))
    body = (
        MAGIC
        + struct.pack("<I", VERSION)
        + bytes.fromhex(cfg.config_hash())
        + struct.pack("<Q", len(meta_raw))
        + meta_raw
        + struct.pack("<I", len(tensors))
        + b"".join(tensors)
    )
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes, expected_hash: Optional[str] = None) -> Checkpoint:
    if len(data) < 4 + 4 + 32 + 32 or data[:4] != MAGIC:
        raise CheckpointError("not an SVLD checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupt file)")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stored_hash = r.take(32).hex()
    (meta_len,) = r.unpack("<Q")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    cfg = RunConfig.from_dict(meta["config"])
    if cfg.config_hash() != stored_hash:
        raise CheckpointError("embedded config does not match stored config hash")
    if expected_hash is not None and expected_hash != stored_hash:
        raise CheckpointError(f"config hash mismatch: checkpoint {stored_hash[:12]}…, expected {expected_hash[:12]}…")
    (count,) = r.unpack("<I")
    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = torch.from_numpy(arr.copy())
    if r.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    names = meta["param_names"]
    try:
        params = ModelParams((k, tensors[f"param/{k}"]) for k in names)
        adam = AdamState(
            {k: tensors[f"adam.m/{k}"] for k in names},
            {k: tensors[f"adam.v/{k}"] for k in names},
            int(meta["adam_t"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint missing tensor {exc}") from None
    clusters = []
    for i, c in enumerate(meta["clusters"]):
        Z = tensors[f"s3c/{i}/Z"].numpy() if c["has_Z"] else None
        clusters.append(ClusterState(int(c["C"]), float(c["alpha"]), Z, dict(c["assignments"]), bool(c["active"])))
    return Checkpoint(
        cfg, params, adam, clusters, int(meta["epoch"]), int(meta["step"]),
        meta["best_score"], meta["best_epoch"], list(meta["history"]),
    )


def load_checkpoint(path, expected_hash: Optional[str] = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(data, expected_hash)
