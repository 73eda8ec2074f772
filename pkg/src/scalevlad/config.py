"""Run configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from .diffmath import ConfigurationError

MODALITIES = ("text", "video", "audio")
TASKS = ("regression", "classification", "multilabel")


def _build(cls, data: Dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


@dataclass
class EncoderConfig:
    modality: str
    input_dim: int
    hidden_dim: int
    layers: int = 2
    heads: int = 2
    max_len: int = 64
    project: bool = True
    text_input: str = "tokens"
    ffn_mult: int = 4

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigurationError(f"unknown modality {self.modality!r}")
        for name in ("input_dim", "hidden_dim", "heads", "max_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{self.modality}.{name} must be positive")
        if self.layers < 0:
            raise ConfigurationError(f"{self.modality}.layers must be >= 0")
        if self.hidden_dim % self.heads:
            raise ConfigurationError(
                f"{self.modality}: hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        if self.text_input not in ("tokens", "features"):
            raise ConfigurationError("text_input must be 'tokens' or 'features'")
        if self.modality == "text" and self.text_input == "features" and self.input_dim != self.hidden_dim:
            raise ConfigurationError("precomputed text features must already have width hidden_dim")


@dataclass
class FusionConfig:
    scales: List[int] = field(default_factory=lambda: [1, 2, 3])
    K: int = 4
    d_s: int = 32
    fusion_layers: int = 2
    fusion_heads: int = 2
    ffn_mult: int = 4

    def __post_init__(self):
        s = list(self.scales)
        if not s or 1 not in s:
            raise ConfigurationError("scales must be nonempty and contain 1")
        if any(b <= a for a, b in zip(s, s[1:])) or s[0] < 1:
            raise ConfigurationError(f"scales must be strictly increasing positive ints: {s}")
        if self.K < 1 or self.d_s < 1 or self.fusion_layers < 0:
            raise ConfigurationError("K and d_s must be positive, fusion_layers non-negative")
        if self.d_s % self.fusion_heads:
            raise ConfigurationError(f"d_s {self.d_s} not divisible by fusion_heads {self.fusion_heads}")


@dataclass
class S3CConfig:
    cluster_counts: List[int] = field(default_factory=lambda: [10, 15])
    start_epoch: int = 5
    kmeans_iters: int = 50
    kmeans_seed: int = 0
    alpha: float = 0.99
    weight: float = 1.0

    def __post_init__(self):
        if not self.cluster_counts or any(c < 2 for c in self.cluster_counts):
            raise ConfigurationError("cluster_counts must be nonempty, each >= 2")
        if self.start_epoch < 0 or self.kmeans_iters < 1:
            raise ConfigurationError("start_epoch >= 0 and kmeans_iters >= 1 required")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.1
    seed: int = 0
    task: str = "classification"
    num_classes: int = 2
    clip_norm: Optional[float] = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    normalize_features: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigurationError("warmup_fraction must lie in (0, 1)")
        if self.peak_lr <= 0:
            raise ConfigurationError("peak_lr must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs >= 0 and batch_size >= 1 required")

    @property
    def output_dim(self) -> int:
        return {"regression": 1, "classification": self.num_classes, "multilabel": 8}[self.task]


@dataclass
class RunConfig:
    text: EncoderConfig
    video: EncoderConfig
    audio: EncoderConfig
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    s3c: Optional[S3CConfig] = None
    manifest: str = ""
    out_dir: str = "runs/default"

    def __post_init__(self):
        for name in MODALITIES:
            if getattr(self, name).modality != name:
                raise ConfigurationError(f"encoder under key {name!r} declares modality {getattr(self, name).modality!r}")

    def encoders(self) -> List[EncoderConfig]:
        return [self.text, self.video, self.audio]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        data = dict(data)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigurationError(f"config: unknown keys {unknown}")
        for key in MODALITIES:
            if key not in data:
                raise ConfigurationError(f"config: missing encoder section {key!r}")
            enc = dict(data[key])
            enc.setdefault("modality", key)
            data[key] = _build(EncoderConfig, enc, key)
        data["fusion"] = _build(FusionConfig, data.get("fusion", {}), "fusion")
        data["train"] = _build(TrainConfig, data.get("train", {}), "train")
        if data.get("s3c") is not None:
            data["s3c"] = _build(S3CConfig, data["s3c"], "s3c")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        cfg = cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        base = path.parent
        if cfg.manifest and not Path(cfg.manifest).is_absolute():
            cfg.manifest = str((base / cfg.manifest).resolve())
        if cfg.out_dir and not Path(cfg.out_dir).is_absolute():
            cfg.out_dir = str((base / cfg.out_dir).resolve())
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def model_dict(self) -> Dict[str, Any]:
        d = self.to_dict()
        d.pop("manifest")
        d.pop("out_dir")
        return d

    def config_hash(self) -> str:
        """SHA-256 over everything except file locations."""
        blob = json.dumps(self.model_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def toy_config(
    manifest: str,
    out_dir: str = "runs/toy",
    *,
    vocab_size: int = 50,
    video_dim: int = 8,
    audio_dim: int = 6,
    d_s: int = 32,
    K: int = 4,
    scales=(1, 2, 3),
    hidden: int = 32,
    layers: int = 1,
    heads: int = 2,
    fusion_layers: int = 1,
    ffn_mult: int = 2,
    epochs: int = 30,
    batch_size: int = 64,
    peak_lr: float = 1e-3,
    seed: int = 0,
    task: str = "classification",
    s3c: Optional[S3CConfig] = None,
) -> RunConfig:
    """Desk-scale configuration matching the synthetic generator's widths."""
    return RunConfig(
        text=EncoderConfig("text", vocab_size, hidden, layers, heads, 48, ffn_mult=ffn_mult),
        video=EncoderConfig("video", video_dim, hidden, layers, heads, 48, ffn_mult=ffn_mult),
        audio=EncoderConfig("audio", audio_dim, hidden, layers, heads, 48, ffn_mult=ffn_mult),
        fusion=FusionConfig(list(scales), K, d_s, fusion_layers, heads, ffn_mult),
        train=TrainConfig(
            epochs=epochs,
            batch_size=batch_size,
            peak_lr=peak_lr,
            seed=seed,
            task=task,
            num_classes=2,
        ),
        s3c=s3c,
        manifest=manifest,
        out_dir=out_dir,
    )
