"""Shifted clustering loss over fused features.

At the start of each active epoch the fused features of every training
sample are clustered with k-means. The new centers are paired with the
previous ones, blended with momentum, and each sample's cluster index
becomes its pseudo-label for the rest of the epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .config import S3CConfig
from .diffmath import DTYPE, ConfigurationError, linear, log_softmax


class ClusterConsistencyError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# k-means


def sq_distances(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - centers[None, :, :]
    return (diff * diff).sum(axis=-1)


def kmeans_pp_init(X: np.ndarray, C: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    N = X.shape[0]
    chosen = [int(rng.integers(N))]
    closest = sq_distances(X, X[chosen]).min(axis=1)
    for _ in range(1, C):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(N, p=closest / total))
        else:
            idx = int(rng.integers(N))
        chosen.append(idx)
        closest = np.minimum(closest, sq_distances(X, X[idx : idx + 1])[:, 0])
    return X[chosen].copy()


def assign(X: np.ndarray, centers: np.ndarray) -> Tuple[np.ndarray, float]:
    d = sq_distances(X, centers)
    labels = d.argmin(axis=1)  # ties -> lowest center index
    return labels, float(d[np.arange(len(X)), labels].sum())


def update_centers(X: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Cluster means; an empty cluster takes the point farthest from its center."""
    C = centers.shape[0]
    new = centers.copy()
    labels = labels.copy()
    empty = []
    for j in range(C):
        members = labels == j
        count = int(members.sum())
        if count:
            # sequential accumulation in sample order keeps results bit-reproducible
            new[j] = np.cumsum(X[members], axis=0)[-1] / count
        else:
            empty.append(j)
    if empty:
        gap = ((X - new[labels]) ** 2).sum(axis=1)
        for j in empty:
            i = int(gap.argmax())
            new[j] = X[i]
            labels[i] = j
            gap[i] = -1.0
    return new, labels


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    distortion: List[float]
    iterations: int


def kmeans(
    X: np.ndarray,
    C: int,
    iters: int = 50,
    seed: int = 0,
    init: Optional[np.ndarray] = None,
) -> KMeansResult:
    """Lloyd iterations from a k-means++ start, stopping at an assignment fixpoint."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < C:
        raise ConfigurationError(f"k-means needs at least C={C} points, got {X.shape[0]}")
    centers = kmeans_pp_init(X, C, seed) if init is None else np.array(init, dtype=np.float64)
    labels, dist = assign(X, centers)
    history = [dist]
    it = 0
    for it in range(1, iters + 1):
        centers, labels = update_centers(X, labels, centers)
        new_labels, dist = assign(X, centers)
        history.append(dist)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return KMeansResult(centers, labels, history, it)


def greedy_match(prev: np.ndarray, new: np.ndarray) -> np.ndarray:
    """``perm`` with ``new[perm[i]]`` paired to ``prev[i]``, closest pairs first."""
    C = prev.shape[0]
    d = sq_distances(prev, new)
    perm = np.full(C, -1, dtype=np.int64)
    free_prev, free_new = np.ones(C, bool), np.ones(C, bool)
    for _ in range(C):
        masked = np.where(free_prev[:, None] & free_new[None, :], d, np.inf)
        i, j = np.unravel_index(int(masked.argmin()), masked.shape)
        perm[i] = j
        free_prev[i] = False
        free_new[j] = False
    return perm


# ---------------------------------------------------------------------------
# cluster state


@dataclass
class ClusterState:
    C: int
    alpha: float = 0.99
    Z: Optional[np.ndarray] = None
    assignments: Dict[str, int] = field(default_factory=dict)
    active: bool = False


@dataclass
class RefreshRecord:
    epoch: int
    cluster_count: int
    distortion: float
    center_shift_norm: float


def momentum_update(Z_prev: np.ndarray, Z_new: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * Z_prev + (1.0 - alpha) * Z_new


def refresh_epoch(
    features: np.ndarray,
    ids: Sequence[str],
    state: ClusterState,
    epoch: int,
    iters: int = 50,
    seed: int = 0,
) -> Tuple[ClusterState, RefreshRecord]:
    """Re-cluster detached training features and blend centers with momentum."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != len(ids):
        raise ClusterConsistencyError("features and ids differ in length")
    if features.shape[0] < state.C:
        raise ConfigurationError(f"{features.shape[0]} samples cannot form {state.C} clusters")
    res = kmeans(features, state.C, iters, seed)
    if state.Z is None:
        perm = np.arange(state.C)
        Z = res.centers.copy()
        shift = 0.0
    else:
        perm = greedy_match(state.Z, res.centers)
        Z = momentum_update(state.Z, res.centers[perm], state.alpha)
        shift = float(np.linalg.norm(Z - state.Z))
    slot = np.empty(state.C, dtype=np.int64)
    slot[perm] = np.arange(state.C)
    assignments = {sid: int(slot[lab]) for sid, lab in zip(ids, res.labels)}
    new_state = replace(state, Z=Z, assignments=assignments, active=True)
    return new_state, RefreshRecord(epoch, state.C, res.distortion[-1], shift)


# ---------------------------------------------------------------------------
# loss


def s3c_loss(
    fused: torch.Tensor, state: ClusterState, sample_id: Union[str, Sequence[str]]
) -> torch.Tensor:
    """Mean cross-entropy of ``softmax(Z r)`` against the assigned cluster.

    ``Z`` enters as a constant, so gradients flow only into ``fused``.
    """
    if not state.active or state.Z is None:
        raise ClusterConsistencyError("cluster state is not active")
    single = isinstance(sample_id, str)
    ids = [sample_id] if single else list(sample_id)
    if single and fused.dim() == 1:
        fused = fused[None]
    try:
        target = torch.tensor([state.assignments[i] for i in ids], dtype=torch.long)
    except KeyError as exc:
        raise ClusterConsistencyError(f"sample {exc} has no cluster assignment") from None
    Z = torch.as_tensor(state.Z, dtype=DTYPE)
    logp = log_softmax(linear(fused, Z.transpose(0, 1), torch.zeros(state.C, dtype=DTYPE)))
    return -logp.gather(1, target[:, None]).mean()


def multi_s3c(fused: torch.Tensor, states: Sequence[ClusterState], sample_ids) -> torch.Tensor:
    """Sum of per-clustering losses; exactly zero while clustering is inactive."""
    flags = {s.active for s in states}
    if len(flags) > 1:
        raise ClusterConsistencyError("cluster states disagree on activity")
    total = torch.zeros((), dtype=DTYPE)
    if not states or not flags.pop():
        return total
    for s in states:
        total = total + s3c_loss(fused, s, sample_ids)
    return total


def init_states(cfg: Optional[S3CConfig]) -> List[ClusterState]:
    if cfg is None:
        return []
    return [ClusterState(C=c, alpha=cfg.alpha) for c in cfg.cluster_counts]


def separation_ratio(features: np.ndarray, C: int, seed: int = 0, iters: int = 100) -> float:
    """Mean point-to-own-center distance over mean center-to-center distance."""
    X = np.asarray(features, dtype=np.float64)
    res = kmeans(X, C, iters, seed)
    intra = np.sqrt(sq_distances(X, res.centers)[np.arange(len(X)), res.labels]).mean()
    dz = np.sqrt(sq_distances(res.centers, res.centers))
    inter = dz[np.triu_indices(C, k=1)].mean()
    return float(intra / inter)
