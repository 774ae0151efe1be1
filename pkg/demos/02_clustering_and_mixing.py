"""Cluster-guided counterpart selection, the piece that makes mixing "k-mix".

Fits k-means over time-pooled spectrogram features, fills the FIFO queue,
then contrasts where k-mix draws its mixing counterparts versus plain
uniform sampling: k-mix concentrates on entries whose cluster is far from
the current sample's cluster.
"""
from collections import Counter

import numpy as np

from slicer.audio import corpus_spectrograms, synth_corpus
from slicer.augment import (AugmentConfig, MixQueue, kmix_sample_counterpart,
                            make_views, uniform_sample_counterpart)
from slicer.clustering import (assign_centroid, centroid_distance_matrix,
                               kmeans_fit, pool_features)


def main():
    corpus = synth_corpus(n_per_class=16, seed=1, clip_seconds=0.25)
    pairs = corpus_spectrograms(corpus)
    feats = np.stack([pool_features(spec) for spec, _ in pairs])
    print(f"pooled features: {feats.shape} (clips x mel bands)")

    model = kmeans_fit(feats, k=8, seed=1)
    print(f"k-means: k={model.k}, Lloyd passes={len(model.inertia_history)}, "
          f"final SSE={model.inertia:.2f}")
    print("  SSE history:", " -> ".join(f"{v:.1f}" for v in model.inertia_history[:6]),
          "..." if len(model.inertia_history) > 6 else "")

    dists = centroid_distance_matrix(model)
    queue = MixQueue(capacity=64)
    for spec, _ in pairs:
        queue.push(spec, assign_centroid(model, pool_features(spec)))

    anchor_centroid = assign_centroid(model, feats[0])
    farthest = int(np.argmax(dists[anchor_centroid]))
    print(f"\nanchor lives in cluster {anchor_centroid}; "
          f"farthest cluster is {farthest} "
          f"(distance {dists[anchor_centroid, farthest]:.2f})")

    rng = np.random.default_rng(7)
    kmix = Counter(kmix_sample_counterpart(queue, dists, anchor_centroid, r=12,
                                           rng=rng)[1] for _ in range(400))
    uniform = Counter(uniform_sample_counterpart(queue, rng)[1]
                      for _ in range(400))
    print("counterpart cluster over 400 draws (cluster: kmix / uniform):")
    for c in range(model.k):
        print(f"  {c}: {kmix.get(c, 0):>3} / {uniform.get(c, 0):>3}"
              + ("   <- anchor's own cluster" if c == anchor_centroid else ""))

    trace = []
    cfg = AugmentConfig(alpha=0.2, r=12)
    va, vb = make_views(pairs[0][0], queue, dists, anchor_centroid, cfg,
                        np.random.default_rng(3), trace=trace)
    print(f"\ntwo training views of one clip: {va.shape} and {vb.shape}")
    for tag, info in zip("ab", trace):
        print(f"  view {tag}: mixed with cluster {info['counterpart_centroid']} "
              f"at lambda={info['lam']:.3f}")


if __name__ == "__main__":
    main()
