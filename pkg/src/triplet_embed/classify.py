"""Classification in embedding space: nearest centroid, kNN vote, half-split protocol."""

from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, StructuralError
from .index import BallTree
from .metrics import class_centroids, confusion_matrix, scores
from .rng import HALF_SPLIT, make_rng

DEFAULT_K = 10
K_SWEEP = (1, 3, 5, 10, 20)


@dataclass(frozen=True)
class CentroidModel:
    classes: np.ndarray  # class ids, ascending
    centroids: np.ndarray  # (C, D), plain means; not re-projected onto the sphere


@dataclass(frozen=True)
class KnnModel:
    index: BallTree
    labels: np.ndarray
    k: int = DEFAULT_K

    def __post_init__(self):
        if len(self.labels) != len(self.index):
            raise StructuralError("label array does not match index size")
        if self.k < 1:
            raise ValueError("k must be positive")


def fit_centroids(embeddings, labels):
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(embeddings) == 0 or len(labels) != len(embeddings):
        raise StructuralError("need one label per embedding and at least one embedding")
    classes, cents = class_centroids(embeddings, labels)
    return CentroidModel(classes, cents)


def centroid_distances(model, e):
    diff = np.asarray(e, dtype=np.float64)[..., None, :] - model.centroids
    return np.sqrt((diff * diff).sum(axis=-1))


def predict_centroid(model, e):
    """Class of the nearest centroid; ties go to the lowest class id."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != model.centroids.shape[1]:
        raise StructuralError("embedding dimension does not match the centroids")
    # classes are ascending, so argmin's first-hit rule is the tie rule
    return model.classes[np.argmin(centroid_distances(model, e), axis=-1)]


def fit_knn(embeddings, labels, k=DEFAULT_K, leaf_size=30):
    return KnnModel(BallTree(embeddings, leaf_size), np.asarray(labels), k)


def vote(neighbor_labels):
    """Majority label; among tied labels the one met first (nearest) wins."""
    counts = {}
    for lab in neighbor_labels:
        counts[lab] = counts.get(lab, 0) + 1
    top = max(counts.values())
    for lab in neighbor_labels:
        if counts[lab] == top:
            return lab


def predict_knn(model, e):
    if model.k > len(model.labels):
        raise ValueError(f"k={model.k} exceeds the {len(model.labels)} reference points")
    e = np.asarray(e, dtype=np.float64)
    if e.ndim == 2:
        return np.array([predict_knn(model, row) for row in e])
    nb = model.index.query(e, model.k)
    return vote(model.labels[nb.indices].tolist())


def half_split(labels, seed, swap=False):
    """Per-class seeded halves: (reference, evaluation) index arrays.

    Each class is shuffled and its first ``n // 2`` members become reference.
    ``swap`` exchanges the two roles.
    """
    labels = np.asarray(labels)
    rng = make_rng(seed, HALF_SPLIT)
    ref, ev = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            raise ProtocolError(f"class {c} has {len(members)} sample(s); half-split needs 2")
        members = members[rng.permutation(len(members))]
        h = len(members) // 2
        ref.append(members[:h])
        ev.append(members[h:])
    ref, ev = np.sort(np.concatenate(ref)), np.sort(np.concatenate(ev))
    return (ev, ref) if swap else (ref, ev)


@dataclass
class HalfSplitResult:
    report: object  # EvalReport
    reference: np.ndarray
    evaluation: np.ndarray
    predictions: np.ndarray


def half_split_evaluate(embeddings, labels, mode="centroid", k=DEFAULT_K, seed=0,
                        class_names=None, swap=False):
    """Fit on one half of every class, score the other half.

    The confusion matrix covers the classes present in ``labels`` in
    ascending order; ``class_names`` maps class ids to names when given.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    ref, ev = half_split(labels, seed, swap)
    classes = np.unique(labels)
    if mode == "centroid":
        model = fit_centroids(embeddings[ref], labels[ref])
        pred = predict_centroid(model, embeddings[ev])
    elif mode == "knn":
        model = fit_knn(embeddings[ref], labels[ref], k)
        pred = predict_knn(model, embeddings[ev])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    pos = {c: i for i, c in enumerate(classes.tolist())}
    cm = confusion_matrix([pos[c] for c in labels[ev].tolist()],
                          [pos[c] for c in np.asarray(pred).tolist()], len(classes))
    names = [str(c) if class_names is None else class_names[c] for c in classes.tolist()]
    return HalfSplitResult(scores(cm, names), ref, ev, np.asarray(pred))
