"""View generation: queue-based mixing plus random resized crops.

Two stochastic views per spectrogram. Mixing draws a counterpart from a FIFO
queue of recent spectrograms; when cluster-guided sampling is on, the queue is
ranked by how far each entry's centroid sits from the current sample's
centroid and the counterpart is drawn uniformly from the top `r`. The mix is
convex in the linear energy domain, then mapped back to log:

    mixed = log((1 - lam) * exp(x) + lam * exp(counterpart)),  lam ~ U(0, alpha)

after which a random crop box (scales drawn per axis) is placed uniformly on a
1.5x virtual canvas centered on the input (out-of-bounds reads zero) and
resampled back to the input shape with align-corners bilinear interpolation.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np


class EmptyQueueError(RuntimeError):
    """Counterpart requested from an empty queue (warm-up state)."""


@dataclass
class AugmentConfig:
    alpha: float = 0.2                      # mixup strength upper bound
    r: int = 128                            # k-mix candidate window size
    freq_scale: tuple = (0.6, 1.5)          # crop height range, fraction of F
    time_scale: tuple = (0.6, 1.5)          # crop width range, fraction of T
    kmix_enabled: bool = True
    rrc_centered: bool = False              # pin crop placement to center (debug/identity)

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")
        for name, (lo, hi) in (("freq_scale", self.freq_scale),
                               ("time_scale", self.time_scale)):
            if not (0.0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})")


class MixQueue:
    """Bounded FIFO of (spectrogram, centroid id) with insertion counters."""

    def __init__(self, capacity: int = 2048):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries = deque()
        self._next_counter = 0

    def __len__(self):
        return len(self._entries)

    @property
    def next_counter(self):
        return self._next_counter

    def push(self, spec: np.ndarray, centroid: int) -> None:
        if len(self._entries) == self.capacity:
            self._entries.popleft()
        self._entries.append((np.asarray(spec, dtype=np.float64), int(centroid),
                              self._next_counter))
        self._next_counter += 1

    def entries(self):
        """Snapshot as a list of (spec, centroid, insertion counter), oldest first."""
        return list(self._entries)

    @classmethod
    def restore(cls, capacity, entries, next_counter) -> "MixQueue":
        """Rebuild a queue from a snapshot (checkpoint resume)."""
        q = cls(capacity)
        for spec, centroid, counter in entries:
            q._entries.append((np.asarray(spec, dtype=np.float64), int(centroid),
                               int(counter)))
        q._next_counter = int(next_counter)
        return q


def kmix_sample_counterpart(queue: MixQueue, dist_matrix: np.ndarray,
                            centroid: int, r: int, rng):
    """Uniform draw from the r queue entries farthest from `centroid`.

    Entries sort by centroid-to-centroid distance descending; equal distances
    order oldest-first. Returns (spectrogram, its centroid id).
    """
    entries = queue.entries()
    if not entries:
        raise EmptyQueueError("queue is empty")
    dists = np.array([dist_matrix[centroid, c] for _, c, _ in entries])
    counters = np.array([counter for _, _, counter in entries])
    order = np.lexsort((counters, -dists))  # primary: distance desc; ties: oldest first
    window = order[:min(r, len(entries))]
    spec, cent, _ = entries[window[rng.integers(len(window))]]
    return spec, cent


def uniform_sample_counterpart(queue: MixQueue, rng):
    """Uniform draw over the whole queue (cluster guidance disabled)."""
    entries = queue.entries()
    if not entries:
        raise EmptyQueueError("queue is empty")
    spec, cent, _ = entries[rng.integers(len(entries))]
    return spec, cent


def mixup_mix(x: np.ndarray, counterpart: np.ndarray, lam: float) -> np.ndarray:
    """Convex combination in the energy domain of two log spectrograms."""
    x = np.asarray(x, dtype=np.float64)
    counterpart = np.asarray(counterpart, dtype=np.float64)
    if x.shape != counterpart.shape:
        raise ValueError(f"shape mismatch in mixup: {x.shape} vs {counterpart.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    # exact endpoints: log(exp(x)) would perturb the last bits
    if lam == 0.0:
        return x.copy()
    if lam == 1.0:
        return counterpart.copy()
    return np.log((1.0 - lam) * np.exp(x) + lam * np.exp(counterpart))


def crop_resize(x: np.ndarray, box) -> np.ndarray:
    """Bilinearly resample crop box (y0, x0, h, w) back to x's shape.

    Box coordinates live in input pixel space and may extend outside the
    input; reads out of bounds return zero. Align-corners mapping: output row
    i samples y0 + i*(h-1)/(F-1), so a (0, 0, F, T) box is the identity.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected 2-d input, got shape {x.shape}")
    f_dim, t_dim = x.shape
    y0, x0, h, w = box
    if h <= 0 or w <= 0:
        raise ValueError(f"box extents must be positive, got h={h}, w={w}")
    ys = y0 + (np.arange(f_dim) * ((h - 1.0) / (f_dim - 1)) if f_dim > 1
               else np.array([(h - 1.0) / 2.0]))
    xs = x0 + (np.arange(t_dim) * ((w - 1.0) / (t_dim - 1)) if t_dim > 1
               else np.array([(w - 1.0) / 2.0]))

    def sample_rows(idx_f, idx_t):
        inside = ((idx_f >= 0) & (idx_f < f_dim))[:, None] & \
                 ((idx_t >= 0) & (idx_t < t_dim))[None, :]
        vals = x[np.clip(idx_f, 0, f_dim - 1)[:, None],
                 np.clip(idx_t, 0, t_dim - 1)[None, :]]
        return np.where(inside, vals, 0.0)

    yf = np.floor(ys).astype(int)
    xf = np.floor(xs).astype(int)
    wy = (ys - yf)[:, None]
    wx = (xs - xf)[None, :]
    return ((1 - wy) * (1 - wx) * sample_rows(yf, xf)
            + (1 - wy) * wx * sample_rows(yf, xf + 1)
            + wy * (1 - wx) * sample_rows(yf + 1, xf)
            + wy * wx * sample_rows(yf + 1, xf + 1))


def sample_crop_box(shape, cfg: AugmentConfig, rng):
    """Random (y0, x0, h, w): scales per axis, placed on the 1.5x canvas."""
    f_dim, t_dim = shape
    u = rng.uniform(cfg.freq_scale[0], cfg.freq_scale[1])
    v = rng.uniform(cfg.time_scale[0], cfg.time_scale[1])
    h, w = f_dim * u, t_dim * v

    def place(extent, size):
        lo, hi = -0.25 * extent, 1.25 * extent - size
        if cfg.rrc_centered or hi <= lo:
            return (extent - size) / 2.0
        return rng.uniform(lo, hi)

    return place(f_dim, h), place(t_dim, w), h, w


def random_resized_crop(x: np.ndarray, cfg: AugmentConfig, rng,
                        trace: dict = None) -> np.ndarray:
    box = sample_crop_box(x.shape, cfg, rng)
    if trace is not None:
        trace["box"] = box
    return crop_resize(x, box)


def make_views(x: np.ndarray, queue: MixQueue, dist_matrix, centroid: int,
               cfg: AugmentConfig, rng, trace: list = None):
    """Two augmented views of x; pushes x onto the queue exactly once, after.

    While the queue is empty the mixing step is skipped (crop only). With
    kmix disabled the counterpart is drawn uniformly from the queue and
    `dist_matrix`/`centroid` may be None/-1.
    """
    cfg.validate()
    views = []
    for _ in range(2):
        info = {"lam": None, "counterpart_centroid": None}
        if len(queue) > 0:
            if cfg.kmix_enabled:
                counterpart, info["counterpart_centroid"] = kmix_sample_counterpart(
                    queue, dist_matrix, centroid, cfg.r, rng)
            else:
                counterpart, info["counterpart_centroid"] = uniform_sample_counterpart(
                    queue, rng)
            info["lam"] = rng.uniform(0.0, cfg.alpha)
            mixed = mixup_mix(x, counterpart, info["lam"])
        else:
            mixed = x
        views.append(random_resized_crop(mixed, cfg, rng, trace=info))
        if trace is not None:
            trace.append(info)
    queue.push(x, centroid)
    return views[0], views[1]
