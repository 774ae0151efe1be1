"""K-means over time-pooled spectrogram features.

Used to tag queue entries with a coarse acoustic cluster id so the mixing
augmentation can pick counterparts that are far from the current sample.
Lloyd iterations with kmeans++ seeding and best-of-n restarts; everything is
deterministic under the provided seed.
"""

import struct
from dataclasses import dataclass, field

import numpy as np


class CentroidFileError(ValueError):
    """Malformed KMC1 file."""


@dataclass
class KMeansModel:
    centroids: np.ndarray                      # (k, dim)
    inertia: float = float("nan")              # final sum of squared distances
    inertia_history: list = field(default_factory=list)  # one entry per Lloyd assignment

    @property
    def k(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]


def pool_features(spec: np.ndarray) -> np.ndarray:
    """Mean over the time axis: (F, T) -> (F,)."""
    spec = np.asarray(spec, dtype=np.float64)
    if spec.ndim != 2:
        raise ValueError(f"expected 2-d spectrogram, got shape {spec.shape}")
    return spec.mean(axis=1)


def _sq_dists(points, centroids):
    # ||p - c||^2 for all pairs, (n, k); clip tiny negatives from cancellation
    d = (np.sum(points * points, axis=1)[:, None]
         + np.sum(centroids * centroids, axis=1)[None, :]
         - 2.0 * points @ centroids.T)
    return np.maximum(d, 0.0)


def _kmeanspp_init(points, k, rng):
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    best = _sq_dists(points, centroids[:1])[:, 0]
    for j in range(1, k):
        total = best.sum()
        if total > 0:
            idx = rng.choice(n, p=best / total)
        else:  # all points already coincide with chosen centroids
            idx = rng.integers(n)
        centroids[j] = points[idx]
        best = np.minimum(best, _sq_dists(points, centroids[j:j + 1])[:, 0])
    return centroids


def kmeans_fit(points: np.ndarray, k: int, seed: int, max_iters: int = 100,
               n_init: int = 10) -> KMeansModel:
    """Best of ``n_init`` Lloyd runs from independent kmeans++ seeds.

    Restarts draw from one seeded generator, so results are deterministic;
    the run with the lowest final SSE wins (first wins exact ties) and only
    its history is kept. Lloyd itself is a local search, so restarts are the
    standard guard against bad minima on small or awkward inputs.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be (n, dim), got shape {points.shape}")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n_points, got k={k}, n={n}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        model = _kmeans_single(points, k, rng, max_iters)
        if best is None or model.inertia < best.inertia:
            best = model
    return best


def _kmeans_single(points, k, rng, max_iters) -> KMeansModel:
    # one kmeans++ init + Lloyd run; assignment ties go to the lowest index,
    # empty clusters are re-seeded to the points farthest from their centroid
    n = points.shape[0]
    centroids = _kmeanspp_init(points, k, rng)
    model = KMeansModel(centroids)
    assign = None
    for _ in range(max_iters):
        d = _sq_dists(points, centroids)
        new_assign = np.argmin(d, axis=1)  # argmin takes the lowest index on ties
        model.inertia_history.append(float(d[np.arange(n), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(counts):
            centroids[j] = points[assign == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # steal the farthest points, one per empty cluster
            dist_to_own = _sq_dists(points, centroids)[np.arange(n), assign]
            order = np.argsort(-dist_to_own, kind="stable")
            for j, p_idx in zip(empty, order):
                centroids[j] = points[p_idx]
    if _dedupe_centroids(points, centroids, assign):
        # duplicates re-seeded; moving a redundant copy can only shrink
        # nearest-centroid distances, so the SSE history stays monotone
        d = _sq_dists(points, centroids)
        model.inertia_history.append(float(d[np.arange(n), np.argmin(d, axis=1)].sum()))
    model.centroids = centroids
    model.inertia = model.inertia_history[-1]
    return model


def _dedupe_centroids(points, centroids, assign) -> bool:
    """Re-seed exact-duplicate centroids to far distinct points, in place.

    Returns True if anything moved. If the data has fewer distinct values
    than k, surviving duplicates are unavoidable and left alone.
    """
    seen = {}
    dups = []
    for j in range(centroids.shape[0]):
        key = centroids[j].tobytes()
        if key in seen:
            dups.append(j)
        else:
            seen[key] = j
    if not dups:
        return False
    n = points.shape[0]
    dist_to_own = _sq_dists(points, centroids)[np.arange(n), assign]
    order = np.argsort(-dist_to_own, kind="stable")
    moved = False
    for j in dups:
        for p_idx in order:
            key = points[p_idx].tobytes()
            if key not in seen:
                centroids[j] = points[p_idx]
                seen[key] = j
                moved = True
                break
    return moved


def assign_centroid(model: KMeansModel, vec: np.ndarray) -> int:
    """Index of the nearest centroid; ties break to the lowest index."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (model.dim,):
        raise ValueError(f"expected vector of dim {model.dim}, got shape {vec.shape}")
    return int(np.argmin(np.sum((model.centroids - vec[None, :]) ** 2, axis=1)))


def centroid_distance_matrix(model: KMeansModel) -> np.ndarray:
    """(k, k) euclidean distances; exactly symmetric with a zero diagonal."""
    diff = model.centroids[:, None, :] - model.centroids[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


# ---------------------------------------------------------------------------
# KMC1 centroid files

_KMC1_MAGIC = b"KMC1"


def write_kmc1(path, model: KMeansModel) -> None:
    """Magic, u32 k, u32 dim (LE), then k*dim f64 centroid rows."""
    with open(path, "wb") as fh:
        fh.write(_KMC1_MAGIC)
        fh.write(struct.pack("<II", model.k, model.dim))
        fh.write(np.ascontiguousarray(model.centroids, dtype="<f8").tobytes())


def read_kmc1(path) -> KMeansModel:
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) < 12:
            raise CentroidFileError(f"{path}: truncated header")
        if header[:4] != _KMC1_MAGIC:
            raise CentroidFileError(f"{path}: bad magic {header[:4]!r}")
        k, dim = struct.unpack("<II", header[4:])
        payload = fh.read()
    expected = k * dim * 8
    if len(payload) != expected:
        raise CentroidFileError(
            f"{path}: expected {expected} payload bytes for {k}x{dim}, got {len(payload)}")
    centroids = np.frombuffer(payload, dtype="<f8").reshape(k, dim).copy()
    return KMeansModel(centroids)
