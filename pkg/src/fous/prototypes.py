"""Prototype-guided pseudo-labelling.

Target instances are labelled once per pass by their nearest prototype in two
banks: source prototypes (identity means) and random prototypes (sampled
target features).  A :class:`DistanceCounter` records every pairwise distance
evaluated so the cost can be compared against a pairwise-clustering pass.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist


@dataclass
class InstanceFeature:
    vector: np.ndarray
    image_id: int = -1
    box_id: int = -1


@dataclass
class PrototypeBank:
    vectors: np.ndarray
    labels: np.ndarray
    kind: str = "source"
    rows: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.vectors) < 1:
            raise ValueError("prototype bank must hold at least one prototype")
        if len(self.labels) != len(self.vectors):
            raise ValueError("one label per prototype is required")
        if len(np.unique(self.labels)) != len(self.labels):
            raise ValueError("prototype labels must be unique")
        if not np.isfinite(self.vectors).all():
            raise ValueError("non-finite prototype")
        if self.kind not in ("source", "random"):
            raise ValueError(f"unknown bank kind {self.kind!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.vectors.shape[1]


@dataclass
class DistanceCounter:
    evaluations: int = 0

    def add(self, n):
        if n < 0:
            raise ValueError("distance count cannot decrease")
        self.evaluations += int(n)


@dataclass
class PseudoLabelSet:
    """Per-instance labels from both banks with the matching nearest distances."""

    source_labels: np.ndarray
    random_labels: np.ndarray
    source_distances: np.ndarray = field(default=None)
    random_distances: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.source_labels)


def as_matrix(features):
    """Stack a sequence of :class:`InstanceFeature` (or pass an array through) as ``N x D``."""
    if isinstance(features, np.ndarray):
        return np.atleast_2d(features.astype(np.float64, copy=False))
    rows = [f.vector if isinstance(f, InstanceFeature) else f for f in features]
    if not rows:
        return np.zeros((0, 0))
    return np.vstack(rows).astype(np.float64)


def l2_normalize(x, eps=1e-12):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


def init_source_prototypes(features, labels):
    """Mean feature per identity label (not re-normalised)."""
    x = as_matrix(features)
    labels = np.asarray(labels)
    if len(x) == 0 or x.size == 0:
        raise ValueError("no labeled features")
    if len(labels) != len(x):
        raise ValueError("one label per feature is required")
    ids, inverse = np.unique(labels, return_inverse=True)
    sums = np.zeros((len(ids), x.shape[1]))
    np.add.at(sums, inverse, x)
    counts = np.bincount(inverse, minlength=len(ids))
    return PrototypeBank(sums / counts[:, None], ids, kind="source")


def sample_random_prototypes(features, n_random, seed):
    """Draw ``n_random`` distinct features uniformly; labels are ``0..n_random-1``.

    The chosen row indices are kept on ``bank.rows``.
    """
    x = as_matrix(features)
    if n_random < 1:
        raise ValueError("n_random must be at least 1")
    if n_random > len(x):
        raise ValueError(f"not enough target features ({len(x)} < {n_random})")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(x), size=n_random, replace=False)
    return PrototypeBank(x[picks].copy(), np.arange(n_random), kind="random", rows=picks)


def assign_pseudo_labels(features, bank, counter=None, chunk=4096):
    """Label each feature with its nearest prototype (Euclidean, first index wins ties).

    Returns ``(labels, distances, prototype_indices)``; the counter grows by
    exactly ``N * K``.
    """
    x = as_matrix(features)
    if len(x) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, np.zeros(0), empty
    if x.shape[1] != bank.dim:
        raise ValueError(f"dimension mismatch: features {x.shape[1]} vs prototypes {bank.dim}")
    index = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x))
    for start in range(0, len(x), chunk):
        d = cdist(x[start:start + chunk], bank.vectors)
        if counter is not None:
            counter.add(d.size)
        nearest = d.argmin(axis=1)
        index[start:start + chunk] = nearest
        dist[start:start + chunk] = d[np.arange(len(d)), nearest]
    return bank.labels[index], dist, index


def label_with_banks(features, source_bank, random_bank, counter=None):
    """Assign one label from each bank to every feature."""
    ls, ds, _ = assign_pseudo_labels(features, source_bank, counter)
    lr, dr, _ = assign_pseudo_labels(features, random_bank, counter)
    return PseudoLabelSet(ls, lr, ds, dr)


def update_source_prototypes(features, pseudo_labels, bank):
    """Replace each source prototype by the mean of the target features assigned to it.

    Prototypes that received no features are dropped; surviving prototypes
    keep their original labels.
    """
    x = as_matrix(features)
    pseudo_labels = np.asarray(pseudo_labels)
    keep, means = [], []
    for label in bank.labels:
        members = pseudo_labels == label
        if members.any():
            keep.append(label)
            means.append(x[members].mean(axis=0))
    if not keep:
        raise ValueError("labeling collapsed")
    return PrototypeBank(np.vstack(means), np.asarray(keep), kind=bank.kind)


def pairwise_reference(features, counter=None):
    """Naive all-pairs distance pass, the per-iteration cost of pairwise clustering.

    Returns the condensed distance vector of length ``N * (N - 1) / 2``.
    """
    x = as_matrix(features)
    if len(x) < 2:
        return np.zeros(0)
    d = pdist(x)
    if counter is not None:
        counter.add(d.size)
    return d
