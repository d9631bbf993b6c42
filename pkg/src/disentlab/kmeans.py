"""Lloyd's k-means with k-means++ seeding, and exact nearest-centre assignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .blob import read_blob, write_blob
from .errors import ContractError, DimensionError

log = logging.getLogger(__name__)

_CHUNK = 2048


@dataclass
class Codebook:
    centers: np.ndarray               # (K, d) float64
    feature_source: str = "raw_frames"
    seed: int = 0
    inertia: float = float("nan")
    trace: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def save(self, path: str) -> None:
        header = {"kind": "codebook", "K": self.K, "d": self.dim, "source": self.feature_source,
                  "seed": self.seed, "inertia": self.inertia, "trace": self.trace,
                  "meta": self.meta}
        write_blob(path, header, {"centers": self.centers})

    @classmethod
    def load(cls, path: str) -> "Codebook":
        header, arrays = read_blob(path)
        if header.get("kind") != "codebook":
            raise ValueError(f"{path} is not a codebook")
        return cls(arrays["centers"], header["source"], header["seed"], header["inertia"],
                   header.get("trace", []), header.get("meta", {}))


def _sq_dists_fast(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _exact_assign(x: np.ndarray, c: np.ndarray):
    """Nearest centre by direct squared distances; ties go to the lowest id."""
    labels = np.empty(len(x), dtype=np.int64)
    dists = np.empty(len(x))
    for s in range(0, len(x), _CHUNK):
        diff = x[s:s + _CHUNK, None, :] - c[None, :, :]
        d = (diff * diff).sum(-1)
        labels[s:s + _CHUNK] = d.argmin(1)
        dists[s:s + _CHUNK] = d[np.arange(len(d)), labels[s:s + _CHUNK]]
    return labels, dists


def _refined_assign(x: np.ndarray, c: np.ndarray):
    """Fast assignment: GEMM distances pick two candidates, compared exactly."""
    if len(c) <= 2:
        return _exact_assign(x, c)
    labels = np.empty(len(x), dtype=np.int64)
    dists = np.empty(len(x))
    for s in range(0, len(x), 8 * _CHUNK):
        xs = x[s:s + 8 * _CHUNK]
        cand = np.argpartition(_sq_dists_fast(xs, c), 1, axis=1)[:, :2]
        cand.sort(axis=1)
        diff = xs[:, None, :] - c[cand]
        d = (diff * diff).sum(-1)
        pick = d.argmin(1)
        labels[s:s + len(xs)] = cand[np.arange(len(xs)), pick]
        dists[s:s + len(xs)] = d[np.arange(len(xs)), pick]
    return labels, dists


def kmeans_plusplus(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    closest = ((x - x[idx[0]]) ** 2).sum(1)
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        idx.append(nxt)
        closest = np.minimum(closest, ((x - x[nxt]) ** 2).sum(1))
    return x[idx].copy()


def kmeans_fit(features, K: int, max_iters: int = 50, seed: int = 0, tol: float = 1e-6,
               feature_source: str = "raw_frames",
               rng: Optional[np.random.Generator] = None) -> Codebook:
    """Fit ``K`` centres by Lloyd iterations from a k-means++ start.

    ``Codebook.trace`` holds the inertia after every assignment step; it is
    non-increasing. An empty cluster is re-seeded at the point farthest from
    its current centre.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"features must be a matrix, got shape {x.shape}")
    if K < 1 or len(x) < K:
        raise ContractError(f"k-means needs at least K={K} points, got {len(x)}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    centers = kmeans_plusplus(x, K, rng)
    trace = []
    labels, dists = _refined_assign(x, centers)
    trace.append(float(dists.sum()))
    for it in range(max_iters):
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for k in np.flatnonzero(~filled):
            far = int(dists.argmax())
            log.info("k-means: cluster %d empty at iteration %d, re-seeded at point %d",
                     k, it, far)
            new[k] = x[far]
            dists[far] = 0.0
        centers = new
        new_labels, dists = _refined_assign(x, centers)
        inertia = float(dists.sum())
        prev = trace[-1]
        trace.append(inertia)
        changed = not np.array_equal(new_labels, labels)
        labels = new_labels
        if not changed or (prev > 0 and (prev - inertia) / prev < tol) or inertia == 0.0:
            break
    return Codebook(centers, feature_source, seed, trace[-1], trace)


def kmeans_assign(features, codebook: Codebook) -> np.ndarray:
    """Nearest-centre id per row; ties are broken towards the lower id."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.dim:
        raise ContractError(f"features of shape {x.shape} do not match codebook dim {codebook.dim}")
    return _exact_assign(x, codebook.centers)[0]
