"""From accumulated attention to per-instance and per-class soft masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from isac.attention import DTYPE
from isac.errors import ConfigError


@dataclass(frozen=True)
class ForegroundSelection:
    mask: torch.Tensor  # (HW,) bool
    indices: torch.Tensor  # (F,) long, ascending

    @property
    def size(self) -> int:
        return int(self.indices.numel())


@dataclass(frozen=True)
class HardInstanceAssignment:
    labels: np.ndarray  # (F,) cluster id per point
    num_clusters: int

    @property
    def onehot(self) -> torch.Tensor:
        K = torch.zeros(len(self.labels), self.num_clusters, dtype=DTYPE)
        K[torch.arange(len(self.labels)), torch.as_tensor(self.labels)] = 1.0
        return K

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_clusters)


def propagate_classes(sa: torch.Tensor, ca: torch.Tensor) -> torch.Tensor:
    """Spread token activation along self-attention: rownorm(sa) @ ca.

    Rows of ``sa`` are normalized to sum to one so the result stays a convex
    combination of ``ca`` rows; an all-zero row is treated as uniform.
    """
    sums = sa.sum(dim=1, keepdim=True)
    dead = sums <= 0
    if bool(dead.any()):
        sa = torch.where(dead, torch.ones_like(sa), sa)
        sums = sa.sum(dim=1, keepdim=True)
    # rownorm(sa) @ ca == (sa @ ca) / rowsum, without rescaling the P x P map
    return (sa @ ca) / sums


def binarize(ca_prop: torch.Tensor) -> torch.Tensor:
    """Column-adaptive threshold: 1 where strictly above the column mean."""
    ca_prop = ca_prop.detach()
    return ca_prop > ca_prop.mean(dim=0, keepdim=True)


def global_foreground(ca_bin: torch.Tensor, class_token_indices) -> ForegroundSelection:
    if len(class_token_indices) == 0:
        raise ConfigError("foreground needs at least one class token")
    mask = ca_bin[:, list(class_token_indices)].any(dim=1)
    return ForegroundSelection(mask=mask, indices=torch.nonzero(mask).flatten())


def filter_self_attention(sa: torch.Tensor, selection: ForegroundSelection) -> torch.Tensor:
    idx = selection.indices
    return sa.index_select(0, idx).index_select(1, idx)


def append_coordinates(
    sa_fg: torch.Tensor, selection: ForegroundSelection, height: int, width: int
) -> np.ndarray:
    """Clustering features: attention rows plus normalized (x, y) per pixel."""
    idx = selection.indices.numpy()
    rows, cols = np.divmod(idx, width)
    x = cols / (width - 1) if width > 1 else np.zeros(len(idx))
    y = rows / (height - 1) if height > 1 else np.zeros(len(idx))
    return np.column_stack([sa_fg.detach().numpy(), x, y]).astype(np.float64)


def _sq_dists(points: np.ndarray, centroids: np.ndarray, point_sq: np.ndarray | None = None) -> np.ndarray:
    """(F, N) squared distances via |p|^2 - 2 p.c + |c|^2, clipped at zero."""
    if point_sq is None:
        point_sq = np.einsum("fd,fd->f", points, points)
    cent_sq = np.einsum("nd,nd->n", centroids, centroids)
    d2 = point_sq[:, None] - 2.0 * (points @ centroids.T) + cent_sq[None, :]
    return np.maximum(d2, 0.0)


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator, point_sq: np.ndarray) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(points, points[chosen], point_sq)[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a centre
            free = np.setdiff1d(np.arange(n), chosen)
            pick = int(free[rng.integers(len(free))])
        else:
            pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        chosen.append(pick)
        closest = np.minimum(closest, _sq_dists(points, points[[pick]], point_sq)[:, 0])
    return points[chosen].copy()


def _assign(points: np.ndarray, centroids: np.ndarray, point_sq: np.ndarray) -> np.ndarray:
    d2 = _sq_dists(points, centroids, point_sq)
    labels = np.argmin(d2, axis=1)
    for c in range(len(centroids)):
        if not np.any(labels == c):
            far = int(np.argmax(d2[np.arange(len(points)), labels]))
            labels[far] = c
    return labels


def kmeans_cluster(
    points: np.ndarray,
    num_clusters: int,
    seed: int | np.random.Generator = 0,
    max_iter: int = 50,
    tol: float = 1e-6,
) -> HardInstanceAssignment:
    """Lloyd iterations from a k-means++ start.

    Ties go to the lowest cluster index.  An emptied cluster is re-seeded at
    the point currently farthest from its own centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if num_clusters < 1 or n < num_clusters:
        raise ConfigError(f"cannot form {num_clusters} clusters from {n} points")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if num_clusters == 1:
        return HardInstanceAssignment(np.zeros(n, dtype=np.int64), 1)

    point_sq = np.einsum("fd,fd->f", points, points)
    centroids = _kmeanspp(points, num_clusters, rng, point_sq)
    labels = _assign(points, centroids, point_sq)
    for _ in range(max_iter):
        onehot = labels[None, :] == np.arange(num_clusters)[:, None]
        moved = (onehot @ points) / onehot.sum(axis=1, keepdims=True)
        shift = np.max(np.sqrt(((moved - centroids) ** 2).sum(axis=1)))
        centroids = moved
        new = _assign(points, centroids, point_sq)
        if np.array_equal(new, labels) or shift < tol:
            labels = new
            break
        labels = new
    return HardInstanceAssignment(labels.astype(np.int64), num_clusters)


def cluster_sse(points: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for c in np.unique(labels):
        members = points[labels == c]
        total += float(((members - members.mean(axis=0)) ** 2).sum())
    return total


def instance_masks(sa_fg: torch.Tensor, assignment: HardInstanceAssignment) -> torch.Tensor:
    """(F, N) soft masks: cluster-summed dependency maps over cluster size."""
    K = assignment.onehot
    sizes = torch.as_tensor(assignment.sizes, dtype=DTYPE).clamp(min=1.0)
    return (sa_fg @ K) / sizes


def class_masks(ca_prop: torch.Tensor, class_token_indices) -> torch.Tensor:
    return ca_prop[:, list(class_token_indices)]
