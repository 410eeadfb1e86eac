# 📄 clustering.py
"""Lloyd's k-means with k-means++ seeding, and multi-granularity target sets."""
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import DataError, ShapeError
from events import log_event
from features import FeatureSequence
from formats import read_pmsf, write_pmsf

CHUNK_ROWS = 512


class ClusterModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    centroids: np.ndarray
    inertia: Optional[float] = None
    inertia_history: List[float] = Field(default_factory=list)
    iterations: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


class TargetAssignment(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    labels: Dict[str, np.ndarray]
    codebook_size: int
    source_layer: str


def _as_matrix(f) -> np.ndarray:
    return f.frames if isinstance(f, FeatureSequence) else np.asarray(f, dtype=np.float64)


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _nearest(points: np.ndarray, centroids: np.ndarray, workers: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels (lowest index on ties) and their squared distances."""
    chunks = [points[i:i + CHUNK_ROWS] for i in range(0, points.shape[0], CHUNK_ROWS)]

    def run(chunk):
        d = squared_distances(chunk, centroids)
        lab = np.argmin(d, axis=1)
        return lab, d[np.arange(chunk.shape[0]), lab]

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = squared_distances(points, points[chosen[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(remaining[0])
        chosen.append(idx)
        closest = np.minimum(closest, squared_distances(points, points[idx][None, :])[:, 0])
    return points[chosen].copy()


def kmeans_fit(points: np.ndarray, k: int, max_iters: int = 100, seed: int = 0, workers: int = 1) -> ClusterModel:
    """Lloyd iterations from k-means++ seeds until the assignment stops changing."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("kmeans_fit", X.shape)
    n = X.shape[0]
    if k < 1 or n < k:
        raise DataError(f"kmeans_fit: need n ≥ k ≥ 1, got n={n}, k={k}")
    if not np.all(np.isfinite(X)):
        raise DataError("kmeans_fit: points contain non-finite values")

    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(X, k, rng)
    labels, dist = _nearest(X, centroids, workers)
    history = [float(dist.sum())]
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, X)
        counts = np.bincount(labels, minlength=k)
        updated = centroids.copy()
        filled = counts > 0
        updated[filled] = sums[filled] / counts[filled][:, None]
        if not filled.all():
            far = dist.copy()
            for j in np.flatnonzero(~filled):
                # Re-seed with the point farthest from its centroid, lowest index on ties.
                idx = int(np.argmax(far))
                updated[j] = X[idx]
                far[idx] = -1.0
        centroids = updated
        new_labels, dist = _nearest(X, centroids, workers)
        history.append(float(dist.sum()))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return ClusterModel(centroids=centroids, inertia=history[-1], inertia_history=history, iterations=iterations)


def assign(model: ClusterModel, f, workers: int = 1) -> np.ndarray:
    """Label every frame with its nearest centroid (squared Euclidean, lowest index on ties)."""
    X = _as_matrix(f)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ShapeError("assign", X.shape, model.centroids.shape)
    labels, _ = _nearest(X, model.centroids, workers)
    return labels


def subsample_frames(corpus: Sequence, fraction: float, seed: int = 0) -> np.ndarray:
    """Uniform sample without replacement of round(fraction × total) frames."""
    if not 0 < fraction <= 1:
        raise DataError(f"subsample fraction {fraction} outside (0, 1]")
    if not corpus:
        raise DataError("subsample_frames: empty corpus")
    stacked = np.vstack([_as_matrix(f) for f in corpus])
    size = int(round(fraction * stacked.shape[0]))
    if size == 0:
        raise DataError(f"subsample of {fraction} × {stacked.shape[0]} frames rounds to zero")
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(stacked.shape[0], size=size, replace=False))
    return stacked[picked]


def multi_resolution_targets(corpus: Mapping[str, FeatureSequence], sizes: Sequence[int], seed: int = 0,
                             fraction: float = 1.0, max_iters: int = 100, shared_subsample: bool = True,
                             workers: int = 1) -> Dict[int, Tuple[ClusterModel, TargetAssignment]]:
    """One k-means per size on a frame subsample, then labels over the full corpus."""
    if not sizes:
        raise DataError("multi_resolution_targets: no cluster sizes given")
    utts = sorted(corpus)
    feats = [corpus[u] for u in utts]
    source = feats[0].source if feats and isinstance(feats[0], FeatureSequence) else "unknown"
    shared = subsample_frames(feats, fraction, seed) if shared_subsample else None
    out: Dict[int, Tuple[ClusterModel, TargetAssignment]] = {}
    for i, k in enumerate(sizes):
        sample = shared if shared is not None else subsample_frames(feats, fraction, seed + i + 1)
        if k > sample.shape[0]:
            raise DataError(f"cluster size {k} exceeds the {sample.shape[0]} sampled frames")
        log_event("clustering", "INFO", f"Fitting k={k} on {sample.shape[0]} frames from {source}.")
        model = kmeans_fit(sample, k, max_iters=max_iters, seed=seed, workers=workers)
        labels = {u: assign(model, corpus[u], workers) for u in utts}
        log_event("clustering", "INFO", f"k={k} converged after {model.iterations} iterations.",
                  {"k": k, "inertia": model.inertia})
        out[k] = (model, TargetAssignment(labels=labels, codebook_size=k, source_layer=source))
    return out


def save_codebook(path: Path, model: ClusterModel) -> None:
    write_pmsf(path, model.centroids, "codebook")


def load_codebook(path: Path) -> ClusterModel:
    centroids, source = read_pmsf(path)
    if source != "codebook":
        raise DataError(f"{path}: PMSF source is '{source}', expected a codebook")
    return ClusterModel(centroids=centroids)
