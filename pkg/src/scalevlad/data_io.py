"""Sample formats, padding/masking, feature normalization, synthetic data.

A dataset on disk is a ``manifest.json`` plus one JSONL file per split.
Each JSONL line holds ``id``, ``text``, ``video``, ``audio`` and ``label``.
``text`` is either a whitespace-separated string over the manifest
vocabulary, a list of token ids, or a list of precomputed feature rows.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import torch

from .diffmath import DTYPE

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "scalevlad-manifest"
SPLITS = ("train", "valid", "test")
EMOTIONS = ("happy", "sad", "angry", "neutral")


class DataError(ValueError):
    pass


@dataclass
class MultimodalSample:
    id: str
    text: np.ndarray  # int64 [n] token ids, or float64 [n, d_t]
    video: np.ndarray
    audio: np.ndarray
    label: Union[float, int, np.ndarray]


@dataclass
class Manifest:
    task: str
    video_dim: int
    audio_dim: int
    text_kind: str = "tokens"
    vocab: List[str] = field(default_factory=list)
    text_dim: int = 0
    num_classes: int = 2
    label_range: Sequence[float] = (-3.0, 3.0)
    splits: Dict[str, str] = field(default_factory=dict)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def to_json(self) -> dict:
        text = {"kind": self.text_kind}
        if self.text_kind == "tokens":
            text["vocab"] = list(self.vocab)
        else:
            text["dim"] = self.text_dim
        out = {
            "format": MANIFEST_FORMAT,
            "version": 1,
            "task": self.task,
            "text": text,
            "video_dim": self.video_dim,
            "audio_dim": self.audio_dim,
            "splits": dict(self.splits),
        }
        if self.task == "regression":
            out["label_range"] = list(self.label_range)
        if self.task == "classification":
            out["num_classes"] = self.num_classes
        return out

    @classmethod
    def from_json(cls, data: dict) -> "Manifest":
        if data.get("format") != MANIFEST_FORMAT:
            raise DataError(f"not a {MANIFEST_FORMAT} file")
        text = data.get("text", {})
        kind = text.get("kind", "tokens")
        if kind not in ("tokens", "features"):
            raise DataError(f"text.kind must be 'tokens' or 'features', got {kind!r}")
        if data.get("task") not in ("regression", "classification", "multilabel"):
            raise DataError(f"unknown task {data.get('task')!r}")
        try:
            return cls(
                task=data["task"],
                video_dim=int(data["video_dim"]),
                audio_dim=int(data["audio_dim"]),
                text_kind=kind,
                vocab=list(text.get("vocab", [])),
                text_dim=int(text.get("dim", 0)),
                num_classes=int(data.get("num_classes", 2)),
                label_range=tuple(data.get("label_range", (-3.0, 3.0))),
                splits=dict(data["splits"]),
            )
        except KeyError as exc:
            raise DataError(f"manifest missing field {exc}") from None


@dataclass
class Dataset:
    manifest: Manifest
    splits: Dict[str, List[MultimodalSample]]
    root: Optional[Path] = None

    def find(self, sample_id: str) -> MultimodalSample:
        for samples in self.splits.values():
            for s in samples:
                if s.id == sample_id:
                    return s
        raise KeyError(f"sample {sample_id!r} not found")


# ---------------------------------------------------------------------------
# parsing / validation


def _rows(value, width: int, what: str, where: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise DataError(f"{where}: {what} is not a numeric matrix") from None
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise DataError(f"{where}: {what} must be a nonempty list of rows")
    if arr.shape[1] != width:
        raise DataError(f"{where}: {what} width {arr.shape[1]} != declared {width}")
    if not np.isfinite(arr).all():
        raise DataError(f"{where}: {what} has non-finite values")
    return arr


def parse_sample(obj: dict, manifest: Manifest, where: str) -> MultimodalSample:
    expected = {"id", "text", "video", "audio", "label"}
    if set(obj) != expected:
        raise DataError(f"{where}: fields {sorted(obj)} != {sorted(expected)}")
    sid = str(obj["id"])
    where = f"{where} (sample {sid})"
    text = obj["text"]
    if manifest.text_kind == "tokens":
        index = {w: i for i, w in enumerate(manifest.vocab)}
        if isinstance(text, str):
            try:
                ids = [index[w] for w in text.split()]
            except KeyError as exc:
                raise DataError(f"{where}: out-of-vocabulary token {exc}") from None
        elif isinstance(text, list) and all(isinstance(t, int) and not isinstance(t, bool) for t in text):
            ids = text
            bad = [t for t in ids if not 0 <= t < manifest.vocab_size]
            if bad:
                raise DataError(f"{where}: out-of-vocabulary id {bad[0]}")
        else:
            raise DataError(f"{where}: text must be a token string or a list of token ids")
        if not ids:
            raise DataError(f"{where}: empty text sequence")
        text_arr = np.asarray(ids, dtype=np.int64)
    else:
        text_arr = _rows(text, manifest.text_dim, "text", where)
    video = _rows(obj["video"], manifest.video_dim, "video", where)
    audio = _rows(obj["audio"], manifest.audio_dim, "audio", where)

    label = obj["label"]
    if manifest.task == "regression":
        if isinstance(label, bool) or not isinstance(label, (int, float)):
            raise DataError(f"{where}: regression label must be a number")
        lo, hi = manifest.label_range
        if not lo <= float(label) <= hi:
            raise DataError(f"{where}: label {label} outside [{lo}, {hi}]")
        label = float(label)
    elif manifest.task == "classification":
        if isinstance(label, bool) or not isinstance(label, int) or not 0 <= label < manifest.num_classes:
            raise DataError(f"{where}: class label must be an int in [0, {manifest.num_classes})")
    else:
        if not (isinstance(label, list) and len(label) == len(EMOTIONS) and all(v in (0, 1) for v in label)):
            raise DataError(f"{where}: multilabel label must be a list of {len(EMOTIONS)} bits")
        label = np.asarray(label, dtype=np.int64)
    return MultimodalSample(sid, text_arr, video, audio, label)


def sample_to_json(sample: MultimodalSample, manifest: Manifest) -> dict:
    if manifest.text_kind == "tokens":
        text = " ".join(manifest.vocab[i] for i in sample.text)
    else:
        text = sample.text.tolist()
    label = sample.label
    if isinstance(label, np.ndarray):
        label = label.tolist()
    elif manifest.task == "classification":
        label = int(label)
    else:
        label = float(label)
    return {
        "id": sample.id,
        "text": text,
        "video": sample.video.tolist(),
        "audio": sample.audio.tolist(),
        "label": label,
    }


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = Manifest.from_json(json.loads(manifest_path.read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from None
    root = manifest_path.parent
    splits: Dict[str, List[MultimodalSample]] = {}
    seen = set()
    for name, rel in manifest.splits.items():
        path = root / rel
        samples = []
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                where = f"{path.name}:{lineno}"
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{where}: invalid JSON ({exc.msg})") from None
                s = parse_sample(obj, manifest, where)
                if s.id in seen:
                    raise DataError(f"{where}: duplicate sample id {s.id!r}")
                seen.add(s.id)
                samples.append(s)
        splits[name] = samples
    return Dataset(manifest, splits, root)


def write_dataset(out_dir, manifest: Manifest, splits: Dict[str, List[MultimodalSample]]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = replace(manifest, splits={name: f"{name}.jsonl" for name in splits})
    for name, samples in splits.items():
        with (out_dir / f"{name}.jsonl").open("w", encoding="utf-8", newline="\n") as fh:
            for s in samples:
                fh.write(json.dumps(sample_to_json(s, manifest), separators=(",", ":")) + "\n")
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8", newline="\n")
    return path


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class FeatureStats:
    mean: Dict[str, np.ndarray]
    std: Dict[str, np.ndarray]


def fit_normalizer(train: Sequence[MultimodalSample], std_floor: float = 1e-6) -> FeatureStats:
    """Per-dimension z-score statistics over all training frames."""
    mods = ["video", "audio"]
    if train and train[0].text.ndim == 2:
        mods.append("text")
    mean, std = {}, {}
    for m in mods:
        rows = np.concatenate([getattr(s, m) for s in train], axis=0)
        mean[m] = rows.mean(axis=0)
        std[m] = np.maximum(rows.std(axis=0), std_floor)
    return FeatureStats(mean, std)


def apply_normalizer(samples: Sequence[MultimodalSample], stats: FeatureStats) -> List[MultimodalSample]:
    out = []
    for s in samples:
        changes = {m: (getattr(s, m) - stats.mean[m]) / stats.std[m] for m in stats.mean}
        out.append(replace(s, **changes))
    return out


def normalize_features(dataset: Dataset, std_floor: float = 1e-6):
    """Z-score every split with statistics from the train split only."""
    stats = fit_normalizer(dataset.splits["train"], std_floor)
    splits = {name: apply_normalizer(samples, stats) for name, samples in dataset.splits.items()}
    return replace(dataset, splits=splits), stats


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    ids: List[str]
    text: torch.Tensor  # long [B, L] or float [B, L, d_t]
    text_mask: torch.Tensor
    video: torch.Tensor
    video_mask: torch.Tensor
    audio: torch.Tensor
    audio_mask: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return len(self.ids)


def _pad(seqs: List[np.ndarray], dtype) -> tuple:
    longest = max(len(s) for s in seqs)
    shape = (len(seqs), longest) + seqs[0].shape[1:]
    out = np.zeros(shape, dtype=np.int64 if dtype == torch.long else np.float64)
    mask = np.zeros((len(seqs), longest), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return torch.from_numpy(out).to(dtype), torch.from_numpy(mask)


def collate(samples: Sequence[MultimodalSample]) -> Batch:
    tokens = samples[0].text.ndim == 1
    text, text_mask = _pad([s.text for s in samples], torch.long if tokens else DTYPE)
    video, video_mask = _pad([s.video for s in samples], DTYPE)
    audio, audio_mask = _pad([s.audio for s in samples], DTYPE)
    first = samples[0].label
    if isinstance(first, np.ndarray):
        labels = torch.from_numpy(np.stack([s.label for s in samples])).long()
    elif isinstance(first, (int, np.integer)) and not isinstance(first, bool):
        labels = torch.tensor([int(s.label) for s in samples], dtype=torch.long)
    else:
        labels = torch.tensor([float(s.label) for s in samples], dtype=DTYPE)
    return Batch([s.id for s in samples], text, text_mask, video, video_mask, audio, audio_mask, labels)


def make_batches(
    samples: Sequence[MultimodalSample],
    batch_size: int,
    seed=0,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Yield padded batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield collate([samples[i] for i in order[start : start + batch_size]])


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the synthetic three-cue task.

    Each cue fires independently with ``cue_rate``; the binary label is
    positive when at least two of the three fire.
    """

    vocab_size: int = 50
    video_dim: int = 8
    audio_dim: int = 6
    min_len: int = 10
    max_len: int = 40
    cue_rate: float = 0.5
    trigger: int = 7
    run_length: int = 3
    burst_min: int = 8
    burst_max: int = 12
    burst_shift: float = 2.0
    video_noise: float = 0.9
    audio_threshold: float = 0.5
    regression_noise: float = 0.2


def vocab_words(n: int) -> List[str]:
    return [f"w{i:02d}" for i in range(n)]


def _synth_text(rng, spec: SynthSpec, cue: bool) -> np.ndarray:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    others = np.array([t for t in range(spec.vocab_size) if t != spec.trigger])
    seq = rng.choice(others, size=length)
    taken = np.zeros(length, dtype=bool)
    if cue:
        start = int(rng.integers(0, length - spec.run_length + 1))
        seq[start : start + spec.run_length] = spec.trigger
        taken[start : start + spec.run_length] = True
        n_distract = int(rng.integers(0, 4))
    else:
        n_distract = int(rng.integers(2, 7))
    # isolated triggers: no other trigger within two positions
    for _ in range(n_distract):
        free = [
            p for p in range(length)
            if not taken[max(0, p - 2) : p + 3].any()
        ]
        if not free:
            break
        p = int(rng.choice(free))
        seq[p] = spec.trigger
        taken[p] = True
    return seq.astype(np.int64)


def _synth_video(rng, spec: SynthSpec, cue: bool) -> np.ndarray:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    x = rng.uniform(-spec.video_noise, spec.video_noise, size=(length, spec.video_dim))
    if cue:
        burst = int(rng.integers(spec.burst_min, min(spec.burst_max, length) + 1))
        start = int(rng.integers(0, length - burst + 1))
        x[start : start + burst, :2] += spec.burst_shift
    return x


def _synth_audio(rng, spec: SynthSpec, cue: bool) -> np.ndarray:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    half = length // 2
    # strictly more than half the frames loud when the cue fires, at most half otherwise
    if cue:
        n_loud = int(rng.integers(half + 1, max(half + 2, int(0.9 * length) + 1)))
    else:
        n_loud = int(rng.integers(max(1, int(0.1 * length)), half + 1))
    loud = np.zeros(length, dtype=bool)
    loud[rng.permutation(length)[:n_loud]] = True
    x = rng.normal(0.0, 1.0, size=(length, spec.audio_dim))
    t = spec.audio_threshold
    x[:, 0] = np.where(loud, t + rng.uniform(0.2, 1.8, length), t - rng.uniform(0.2, 1.8, length))
    return x


def synth_samples(n: int, seed: int, spec: SynthSpec = SynthSpec(), task: str = "classification"):
    """Generate ``n`` samples and their cue indicators ``[n, 3]`` (text, video, audio)."""
    rng = np.random.default_rng(seed)
    samples, cues = [], np.zeros((n, 3), dtype=bool)
    width = len(str(max(n - 1, 0)))
    for i in range(n):
        fired = rng.random(3) < spec.cue_rate
        cues[i] = fired
        text = _synth_text(rng, spec, bool(fired[0]))
        video = _synth_video(rng, spec, bool(fired[1]))
        audio = _synth_audio(rng, spec, bool(fired[2]))
        count = int(fired.sum())
        if task == "regression":
            label = float(np.clip(2.0 * (count - 1.5) + rng.normal(0.0, spec.regression_noise), -3.0, 3.0))
        else:
            label = int(count >= 2)
        samples.append(MultimodalSample(f"s{i:0{width}d}", text, video, audio, label))
    return samples, cues


def synth_manifest(spec: SynthSpec, task: str) -> Manifest:
    return Manifest(
        task=task,
        video_dim=spec.video_dim,
        audio_dim=spec.audio_dim,
        text_kind="tokens",
        vocab=vocab_words(spec.vocab_size),
        num_classes=2,
    )


def split_sizes(n: int) -> Dict[str, int]:
    n_train = int(round(0.7 * n))
    n_valid = int(round(0.1 * n))
    return {"train": n_train, "valid": n_valid, "test": n - n_train - n_valid}


def synth_generate(
    n: int,
    seed: int,
    out_dir,
    spec: SynthSpec = SynthSpec(),
    task: str = "classification",
) -> Path:
    """Write a 70/10/20 split synthetic dataset; returns the manifest path."""
    if task not in ("classification", "regression"):
        raise ValueError(f"synthetic task must be classification or regression, got {task!r}")
    samples, _ = synth_samples(n, seed, spec, task)
    sizes = split_sizes(n)
    splits, start = {}, 0
    for name in SPLITS:
        splits[name] = samples[start : start + sizes[name]]
        start += sizes[name]
    log.info("generated %d samples (seed=%d) into %s", n, seed, out_dir)
    return write_dataset(out_dir, synth_manifest(spec, task), splits)
