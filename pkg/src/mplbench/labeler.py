"""k-means pseudo-label generation.

Two regimes produce the per-size codebooks:

* CA1 — an independent k-means run per size, each on a fresh random frame
  subset.
* CA2 — one k-means run for the largest size, then each coarser book is
  obtained by re-clustering the previous book's centroids (treated as
  unweighted points). Fine-to-coarse hierarchy maps are recorded.

Frame labels for every size are assigned by direct nearest-centroid lookup
(squared Euclidean, ties to the lowest index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .container import read_container, write_container

MAGIC = b"MPLB"
VERSION = 1


@dataclass
class Codebook:
    K: int
    centroids: np.ndarray  # K x F
    distortion: float
    strategy_tag: str  # "CA1" | "CA2"
    size_index: int
    distortion_history: list = field(default_factory=list)


@dataclass
class LabelBundle:
    sizes: list  # descending
    strategy: str
    seed: int
    codebooks: list  # one Codebook per size, largest first
    frame_labels: dict  # size -> {utterance_id: uint32 array}
    hierarchy_maps: dict  # (fine_size, coarse_size) -> int array, CA2 only

    def labels_for(self, size: int, utterance_id: str) -> np.ndarray:
        return self.frame_labels[size][utterance_id]


def _sq_dists(points, centroids):
    return cdist(points, centroids, metric="sqeuclidean")


def _kmeans_pp_init(points, K, rng):
    n = points.shape[0]
    centroids = np.empty((K, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centroids[:1]).ravel()
    for i in range(1, K):
        total = closest.sum()
        if total <= 0:
            # all remaining mass on duplicate points: pick uniformly
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centroids[i] = points[idx]
        closest = np.minimum(closest, _sq_dists(points, centroids[i:i + 1]).ravel())
    return centroids


def kmeans(points: np.ndarray, K: int, max_iters: int = 100, seed: int = 0,
           strategy_tag: str = "CA1", size_index: int = 0) -> Codebook:
    """Lloyd's algorithm from k-means++ initialization.

    Stops when assignments are unchanged or after max_iters. Empty clusters
    are re-seeded to the point currently farthest from its own centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not np.all(np.isfinite(points)):
        raise ValueError("kmeans: points must be finite")
    if K < 1 or n < K:
        raise ValueError(f"kmeans: need N >= K >= 1, got N={n}, K={K}")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, K, rng)
    history = []
    labels = None
    for _ in range(max_iters):
        d = _sq_dists(points, centroids)
        new_labels = d.argmin(axis=1)
        point_d = d[np.arange(n), new_labels]
        history.append(float(point_d.mean()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for k in range(K):
            members = labels == k
            if members.any():
                centroids[k] = points[members].mean(axis=0)
            else:
                centroids[k] = points[point_d.argmax()]
    final = float(_sq_dists(points, centroids).min(axis=1).mean())
    return Codebook(K=K, centroids=centroids, distortion=final,
                    strategy_tag=strategy_tag, size_index=size_index,
                    distortion_history=history)


def label_frames(codebook: Codebook, features: np.ndarray) -> np.ndarray:
    """Nearest-centroid label per frame; ties break to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != codebook.centroids.shape[1]:
        raise ValueError(
            f"label_frames: feature dim {features.shape} does not match centroids "
            f"{codebook.centroids.shape}"
        )
    return _sq_dists(features, codebook.centroids).argmin(axis=1).astype(np.uint32)


def _corpus_frames(corpus):
    """Stack all train-split frames; returns (matrix, list of (utt, T))."""
    utts = corpus.splits["train"]
    return np.concatenate([u.features for u in utts], axis=0)


def _all_utterances(corpus):
    for split in ("train", "dev", "test"):
        yield from corpus.splits[split]


def _check_sizes(sizes):
    sizes = list(sizes)
    if any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"sizes must be strictly descending, got {sizes}")
    return sizes


def _subset(frames, frac, rng):
    n = frames.shape[0]
    m = max(1, int(round(frac * n)))
    return frames[rng.choice(n, size=m, replace=False)]


def _assign_all(corpus, sizes, codebooks):
    labels = {s: {} for s in sizes}
    for utt in _all_utterances(corpus):
        for s, cb in zip(sizes, codebooks):
            labels[s][utt.utterance_id] = label_frames(cb, utt.features)
    return labels


def build_ca1(corpus, sizes, subset_frac: float, seed: int) -> LabelBundle:
    """Independent k-means per size, each on its own random frame subset."""
    sizes = _check_sizes(sizes)
    if not 0.0 < subset_frac <= 1.0:
        raise ValueError(f"subset_frac must be in (0,1], got {subset_frac}")
    frames = _corpus_frames(corpus)
    root = np.random.default_rng(seed)
    codebooks = []
    for i, s in enumerate(sizes):
        sub_rng = np.random.default_rng(root.integers(2**63))
        km_seed = int(root.integers(2**63))
        sub = _subset(frames, subset_frac, sub_rng)
        if sub.shape[0] < s:
            raise ValueError(
                f"subset of {sub.shape[0]} frames is smaller than codebook size {s}"
            )
        codebooks.append(kmeans(sub, s, seed=km_seed, strategy_tag="CA1", size_index=i))
    return LabelBundle(sizes=sizes, strategy="CA1", seed=seed, codebooks=codebooks,
                       frame_labels=_assign_all(corpus, sizes, codebooks),
                       hierarchy_maps={})


def build_ca2(corpus, sizes, subset_frac: float, seed: int) -> LabelBundle:
    """Hierarchical cascade: cluster frames once at the largest size, then
    re-cluster each book's centroids to get the next (coarser) book."""
    sizes = _check_sizes(sizes)
    if not 0.0 < subset_frac <= 1.0:
        raise ValueError(f"subset_frac must be in (0,1], got {subset_frac}")
    frames = _corpus_frames(corpus)
    root = np.random.default_rng(seed)
    sub_rng = np.random.default_rng(root.integers(2**63))
    km_seed = int(root.integers(2**63))
    sub = _subset(frames, subset_frac, sub_rng)
    if sub.shape[0] < sizes[0]:
        raise ValueError(
            f"subset of {sub.shape[0]} frames is smaller than codebook size {sizes[0]}"
        )
    codebooks = [kmeans(sub, sizes[0], seed=km_seed, strategy_tag="CA2", size_index=0)]
    hierarchy = {}
    for i, s in enumerate(sizes[1:], start=1):
        prev = codebooks[-1]
        cb = kmeans(prev.centroids, s, seed=int(root.integers(2**63)),
                    strategy_tag="CA2", size_index=i)
        hierarchy[(prev.K, s)] = _sq_dists(prev.centroids, cb.centroids) \
            .argmin(axis=1).astype(np.int64)
        codebooks.append(cb)
    return LabelBundle(sizes=sizes, strategy="CA2", seed=seed, codebooks=codebooks,
                       frame_labels=_assign_all(corpus, sizes, codebooks),
                       hierarchy_maps=hierarchy)


def build_labels(corpus, strategy: str, sizes, subset_frac: float, seed: int) -> LabelBundle:
    if strategy == "CA1":
        return build_ca1(corpus, sizes, subset_frac, seed)
    if strategy == "CA2":
        return build_ca2(corpus, sizes, subset_frac, seed)
    raise ValueError(f"unknown label strategy {strategy!r}")


def save_bundle(bundle: LabelBundle, path):
    manifest = {
        "sizes": bundle.sizes,
        "strategy": bundle.strategy,
        "seed": bundle.seed,
        "distortions": [cb.distortion for cb in bundle.codebooks],
        "utterance_ids": sorted(bundle.frame_labels[bundle.sizes[0]]),
        "hierarchy": {f"{f}->{c}": m.tolist() for (f, c), m in bundle.hierarchy_maps.items()},
    }
    blocks = {}
    for cb in bundle.codebooks:
        blocks[f"centroids_{cb.K}"] = np.ascontiguousarray(cb.centroids, dtype="<f8").tobytes()
    for s in bundle.sizes:
        for uid in manifest["utterance_ids"]:
            blocks[f"labels_{s}_{uid}"] = np.ascontiguousarray(
                bundle.frame_labels[s][uid], dtype="<u4").tobytes()
    write_container(path, MAGIC, VERSION, manifest, blocks)


def load_bundle(path, feature_dim: int) -> LabelBundle:
    manifest, blocks = read_container(path, MAGIC, VERSION)
    sizes = manifest["sizes"]
    codebooks = []
    for i, (s, dist) in enumerate(zip(sizes, manifest["distortions"])):
        cents = np.frombuffer(blocks[f"centroids_{s}"], dtype="<f8").reshape(s, feature_dim)
        codebooks.append(Codebook(K=s, centroids=cents.copy(), distortion=dist,
                                  strategy_tag=manifest["strategy"], size_index=i))
    labels = {s: {} for s in sizes}
    for s in sizes:
        for uid in manifest["utterance_ids"]:
            labels[s][uid] = np.frombuffer(blocks[f"labels_{s}_{uid}"], dtype="<u4").copy()
    hierarchy = {}
    for key, m in manifest["hierarchy"].items():
        f, c = key.split("->")
        hierarchy[(int(f), int(c))] = np.asarray(m, dtype=np.int64)
    return LabelBundle(sizes=sizes, strategy=manifest["strategy"], seed=manifest["seed"],
                       codebooks=codebooks, frame_labels=labels, hierarchy_maps=hierarchy)
