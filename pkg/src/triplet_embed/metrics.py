"""Cluster diagnostics, classification scores and the confounding report."""

from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError


def class_centroids(embeddings, labels, classes=None):
    """(classes, centroids) with one mean row per class present in ``labels``."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if classes is None:
        classes = np.unique(labels)
    cents = np.empty((len(classes), embeddings.shape[1]))
    for i, c in enumerate(classes):
        members = embeddings[labels == c]
        if len(members) == 0:
            raise StructuralError(f"class {c} has no members")
        cents[i] = members.mean(axis=0)
    return np.asarray(classes), cents


def cluster_radius(embeddings, labels, classes=None):
    """Mean Euclidean distance of each class's members to the class centroid."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes, cents = class_centroids(embeddings, labels, classes)
    radius = np.empty(len(classes))
    for i, c in enumerate(classes):
        diff = embeddings[labels == c] - cents[i]
        radius[i] = np.sqrt((diff * diff).sum(axis=1)).mean()
    return radius


def centroid_drift(prev, curr):
    """Per-class distance between two centroid models over the same class table."""
    if list(prev.classes) != list(curr.classes):
        raise StructuralError("centroid models have different class tables")
    diff = np.asarray(curr.centroids) - np.asarray(prev.centroids)
    return np.sqrt((diff * diff).sum(axis=1))


def confusion_matrix(true, pred, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


@dataclass
class EvalReport:
    confusion: np.ndarray
    class_names: list
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float
    macro_f1: float
    confoundings: list = field(default_factory=list)

    def to_tsv(self, preamble=None):
        """UTF-8 TSV text with ``#confusion``, ``#per_class``, ``#summary``, ``#confoundings``."""
        out = []
        if preamble:
            out += preamble
        out.append("#confusion")
        out.append("\t".join(["true\\predicted"] + list(self.class_names)))
        for name, row in zip(self.class_names, self.confusion):
            out.append("\t".join([name] + [str(int(v)) for v in row]))
        out.append("#per_class")
        out.append("class\tprecision\trecall\tf1")
        for i, name in enumerate(self.class_names):
            out.append(f"{name}\t{fmt(self.precision[i])}\t{fmt(self.recall[i])}\t{fmt(self.f1[i])}")
        out.append("#summary")
        out.append(f"accuracy\t{fmt(self.accuracy)}")
        out.append(f"macro_f1\t{fmt(self.macro_f1)}")
        out.append("#confoundings")
        out.append("true\tpredicted\trate")
        for t, p, rate in self.confoundings:
            out.append(f"{self.class_names[t]}\t{self.class_names[p]}\t{rate:.3f}")
        return "\n".join(out) + "\n"


def fmt(x):
    """Shortest decimal string that round-trips to the same float."""
    return repr(float(x))


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def scores(cm, class_names=None, n_confoundings=10):
    """Precision, recall, F1, accuracy and macro-F1 from a confusion matrix.

    Any 0/0 ratio counts as 0, so a class that is never observed nor
    predicted scores F1 = 0 and still weighs in the macro average.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise StructuralError("confusion matrix must be square")
    if class_names is None:
        class_names = [str(i) for i in range(len(cm))]
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    total = cm.sum()
    accuracy = float(tp.sum() / total) if total else 0.0
    return EvalReport(cm, list(class_names), precision, recall, f1, accuracy,
                      float(f1.mean()), top_confoundings(cm, n_confoundings))


def top_confoundings(cm, n=10):
    """The ``n`` largest off-diagonal row shares as (true, predicted, rate).

    Ties are ordered by (true, predicted) index. Rows with no evaluated
    samples are skipped.
    """
    cm = np.asarray(cm)
    rows = cm.sum(axis=1)
    cells = []
    for t in range(len(cm)):
        if rows[t] == 0:
            continue
        for p in range(len(cm)):
            if p != t and cm[t, p] > 0:
                cells.append((-cm[t, p] / rows[t], t, p))
    cells.sort()
    return [(t, p, -r) for r, t, p in cells[:n]]
