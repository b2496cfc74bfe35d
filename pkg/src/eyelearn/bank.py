"""Memory bank of recent embeddings and the per-epoch k-means clustering."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch


@dataclass
class BankEntry:
    image_id: int
    embedding: torch.Tensor
    label: int | None
    counter: int


class MemoryBank:
    """Fixed-capacity FIFO keyed by image id.

    Re-pushing an id drops the old entry and appends the new one at the tail, so
    an image never appears twice and eviction follows the latest insertion order.
    Stored embeddings are detached copies.
    """

    def __init__(self, capacity: int = 800, dim: int = 512):
        if capacity < 1:
            raise ValueError("bank capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self._entries: OrderedDict[int, BankEntry] = OrderedDict()
        self._counter = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, image_id: int) -> bool:
        return image_id in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    @property
    def ids(self) -> list[int]:
        return list(self._entries)

    def get(self, image_id: int) -> BankEntry:
        return self._entries[image_id]

    def push(self, image_id: int, embedding: torch.Tensor, label: int | None = None) -> None:
        embedding = torch.as_tensor(embedding)
        if embedding.shape != (self.dim,):
            raise ValueError(f"expected embedding of dim {self.dim}, got {tuple(embedding.shape)}")
        image_id = int(image_id)
        self._entries.pop(image_id, None)
        self._entries[image_id] = BankEntry(image_id, embedding.detach().clone(), label, self._counter)
        self._counter += 1
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def sample_negatives(
        self, keep: Callable[[BankEntry], bool], n: int, rng: np.random.Generator
    ) -> tuple[list[torch.Tensor], bool]:
        """Draw ``n`` distinct embeddings uniformly from entries passing ``keep``.

        The second return value is False when fewer than ``n`` entries qualify, in
        which case every qualifying embedding is returned.
        """
        eligible = [e for e in self._entries.values() if keep(e)]
        if len(eligible) < n:
            return [e.embedding for e in eligible], False
        picks = rng.choice(len(eligible), size=n, replace=False)
        return [eligible[i].embedding for i in picks], True

    def set_labels(self, assignment: dict[int, int]) -> None:
        for image_id, entry in self._entries.items():
            if image_id in assignment:
                entry.label = int(assignment[image_id])

    def state_dict(self) -> dict:
        entries = list(self._entries.values())
        emb = torch.stack([e.embedding for e in entries]) if entries else torch.zeros(0, self.dim)
        return {
            "capacity": self.capacity,
            "dim": self.dim,
            "counter": self._counter,
            "ids": [e.image_id for e in entries],
            "labels": [-1 if e.label is None else e.label for e in entries],
            "counters": [e.counter for e in entries],
            "embeddings": emb,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "MemoryBank":
        bank = cls(state["capacity"], state["dim"])
        for i, (image_id, label, counter) in enumerate(zip(state["ids"], state["labels"], state["counters"])):
            bank._entries[image_id] = BankEntry(
                image_id, state["embeddings"][i].clone(), None if label < 0 else label, counter
            )
        bank._counter = state["counter"]
        return bank


@dataclass
class ClusterModel:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    def assignment(self, ids) -> dict[int, int]:
        return {int(i): int(c) for i, c in zip(ids, self.labels)}


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centroids = [x[rng.integers(n)]]
    closest = _sq_dists(x, centroids[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centroids.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centroids, dtype=np.float64)


def kmeans(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator | int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding.

    Stops once no centroid moves by more than ``tol`` (Euclidean) or after
    ``max_iters`` iterations. A cluster that empties is re-seeded with the point
    farthest from its current centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must be a 2-D array")
    if len(x) < k:
        raise ValueError(f"k-means needs at least k={k} points, got {len(x)}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    centroids = kmeans_pp_init(x, k, rng)
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centroids)
        labels = d.argmin(1)
        history.append(float(d[np.arange(len(x)), labels].sum()))
        new = np.empty_like(centroids)
        point_d = d[np.arange(len(x)), labels]
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = x[members].mean(0)
            else:
                far = int(point_d.argmax())
                new[c] = x[far]
                labels[far] = c
                point_d[far] = 0.0
        shift = np.sqrt(((new - centroids) ** 2).sum(1)).max()
        centroids = new
        if shift < tol:
            break
    d = _sq_dists(x, centroids)
    labels = d.argmin(1)
    inertia = float(d[np.arange(len(x)), labels].sum())
    history.append(inertia)
    return ClusterModel(centroids, labels, inertia, history, it)


def refresh_labels(
    bank: MemoryBank,
    model,
    images: torch.Tensor,
    ids,
    n_clusters: int,
    rng: np.random.Generator,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> ClusterModel:
    """Cluster artifact-free embeddings of the whole dataset and relabel the bank by image id."""
    from .network import embed_images

    emb = embed_images(model, images).double().numpy()
    cm = kmeans(emb, n_clusters, rng, max_iters, tol)
    bank.set_labels(cm.assignment(ids))
    return cm
