"""Per-category mini-batch k-means over latent codes.

A center moves toward every point routed to it with step ``1/n``, where ``n``
counts the points it has absorbed during the current pass over the data.
Within a pass a center is therefore the exact running mean of its points;
restarting the count each pass lets a center shed points misrouted early on.
``counts`` separately keeps the lifetime total.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autoencoder import LatentBatch
from .numerics import stream


@dataclass
class KMeansState:
    centers: np.ndarray             # (C, d)
    counts: np.ndarray              # (C,) lifetime assignments
    seen: np.ndarray | None = None  # (C,) assignments this pass; drives the step size

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.seen is None:
            self.seen = self.counts.copy()

    @property
    def C(self) -> int:
        return len(self.centers)

    def start_pass(self) -> None:
        self.seen[:] = 0

    def copy(self) -> "KMeansState":
        return KMeansState(self.centers.copy(), self.counts.copy(), self.seen.copy())


def init_centers(points: np.ndarray, C: int, rng: np.random.Generator) -> KMeansState:
    points = np.asarray(points, dtype=np.float64)
    if C < 1:
        raise ValueError(f"C must be >= 1, got {C}")
    if C > len(points):
        raise ValueError(f"cannot pick {C} centers from {len(points)} points")
    idx = rng.choice(len(points), size=C, replace=False)
    return KMeansState(points[idx].copy(), np.zeros(C, dtype=np.int64))


def sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = np.asarray(points, dtype=np.float64)[:, None, :] - centers[None, :, :]
    return np.einsum("ncd,ncd->nc", diff, diff)


def assign(state: KMeansState, z: np.ndarray) -> int:
    """Index of the nearest center; ties go to the lowest index."""
    return int(np.argmin(sq_distances(np.atleast_2d(z), state.centers)[0]))


def assign_batch(state: KMeansState, points: np.ndarray) -> np.ndarray:
    return np.argmin(sq_distances(points, state.centers), axis=1)


def update(state: KMeansState, c: int, z: np.ndarray) -> KMeansState:
    """Move center ``c`` toward ``z`` in place; returns the same state."""
    state.counts[c] += 1
    state.seen[c] += 1
    eta = 1.0 / state.seen[c]
    state.centers[c] = (1.0 - eta) * state.centers[c] + eta * np.asarray(z, dtype=np.float64)
    return state


def _pass(state: KMeansState, points: np.ndarray, batch_size: int, rng: np.random.Generator) -> None:
    state.start_pass()
    order = rng.permutation(len(points))
    for start in range(0, len(points), batch_size):
        batch = points[order[start:start + batch_size]]
        # assignments use the centers as they stood at the start of the batch
        for c, z in zip(assign_batch(state, batch), batch):
            update(state, int(c), z)


def fit_category(points: np.ndarray, C: int, passes: int = 5, batch_size: int = 64,
                 seed: int = 0, key=()) -> KMeansState:
    """Mini-batch k-means on one category's latents.

    ``key`` names the random substream (e.g. the category index), so fits
    for different categories never share random draws.
    """
    points = np.asarray(points, dtype=np.float64)
    if passes < 1:
        raise ValueError(f"passes must be >= 1, got {passes}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    key = key if isinstance(key, tuple) else (key,)
    init_rng = stream(seed, "kmeans", "init", *key)
    pass_rng = stream(seed, "kmeans", "passes", *key)
    state = init_centers(points, C, init_rng)
    for _ in range(passes):
        _pass(state, points, batch_size, pass_rng)

    empty = np.flatnonzero(state.counts == 0)
    if len(empty):
        d = sq_distances(points, state.centers).min(axis=1)
        for c, i in zip(empty, np.argsort(-d, kind="stable")):
            state.centers[c] = points[i]
        _pass(state, points, batch_size, pass_rng)
    return state


def sse(points: np.ndarray, centers: np.ndarray) -> float:
    return float(sq_distances(points, centers).min(axis=1).sum())


@dataclass
class PrototypeSet:
    centers: np.ndarray     # (K*C, d), grouped by category
    labels: np.ndarray      # (K*C,)
    index: np.ndarray       # (K*C,) position within its category

    def __len__(self) -> int:
        return len(self.centers)

    def of_category(self, k: int) -> np.ndarray:
        return self.centers[self.labels == k]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"proto.{int(k)}.{int(i)}": c for c, k, i in zip(self.centers, self.labels, self.index)}

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "PrototypeSet":
        rows = []
        for name, arr in state.items():
            parts = name.split(".")
            if len(parts) != 3 or parts[0] != "proto":
                raise ValueError(f"unexpected tensor {name!r} in prototype checkpoint")
            rows.append((int(parts[1]), int(parts[2]), np.asarray(arr, dtype=np.float64)))
        if not rows:
            raise ValueError("prototype checkpoint is empty")
        rows.sort(key=lambda r: (r[0], r[1]))
        return cls(np.stack([r[2] for r in rows]),
                   np.array([r[0] for r in rows], dtype=np.int64),
                   np.array([r[1] for r in rows], dtype=np.int64))


def learn_prototypes(latents: LatentBatch, K: int, C: int, seed: int = 0, passes: int = 5,
                     batch_size: int = 64) -> PrototypeSet:
    centers, labels, index = [], [], []
    for k in range(K):
        pts = latents.of_category(k)
        if len(pts) < C:
            raise ValueError(f"category {k} has {len(pts)} latents, fewer than C={C}")
    for k in range(K):
        state = fit_category(latents.of_category(k), C, passes, batch_size, seed, key=k)
        centers.append(state.centers)
        labels += [k] * C
        index += list(range(C))
    return PrototypeSet(np.concatenate(centers), np.array(labels, dtype=np.int64),
                        np.array(index, dtype=np.int64))
