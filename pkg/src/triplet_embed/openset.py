"""Scoring an embedding on classes that were never part of training."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .classify import DEFAULT_K, half_split_evaluate
from .errors import ProtocolError

log = logging.getLogger(__name__)


@dataclass
class OpenSetRun:
    class_names: list  # names of the scored unseen classes
    counts: dict  # class name -> unseen_test sample count, scored or not
    skipped: list  # names with fewer than two samples
    indices: np.ndarray  # sample indices that were embedded
    labels: np.ndarray
    embeddings: np.ndarray
    result: object  # HalfSplitResult
    notes: list = field(default_factory=list)

    @property
    def report(self):
        return self.result.report

    def preamble(self):
        lines = ["#unseen_classes", "class\tsamples\tscored"]
        for name, n in self.counts.items():
            lines.append(f"{name}\t{n}\t{'no' if name in self.skipped else 'yes'}")
        return lines

    def to_tsv(self):
        return self.report.to_tsv(self.preamble())


def evaluate_unseen(net, params, images, splits, mode="centroid", k=DEFAULT_K, seed=0):
    """Embed every unseen_test sample and half-split score the unseen classes.

    ``params`` is only read. Classes with fewer than two samples are left
    out of scoring and reported in the preamble.
    """
    seen = set(splits.train) | set(splits.val) | set(splits.test)
    unseen = splits.unseen_classes
    if seen & set(unseen):
        raise ProtocolError("unseen classes overlap the training class table")
    counts = {splits.class_names[c]: len(splits.unseen_test[c]) for c in unseen}
    usable = [c for c in unseen if len(splits.unseen_test[c]) >= 2]
    skipped = [splits.class_names[c] for c in unseen if c not in usable]
    for name in skipped:
        log.warning("unseen class %s has %d sample(s); not scored", name, counts[name])
    if not usable:
        raise ProtocolError("no unseen class has the two samples half-split needs")
    idx = np.concatenate([np.asarray(splits.unseen_test[c], dtype=np.int64) for c in usable])
    labels = np.concatenate([np.full(len(splits.unseen_test[c]), c) for c in usable])
    emb = net.embed(params, np.asarray(images)[idx])
    result = half_split_evaluate(emb, labels, mode, k, seed, splits.class_names)
    return OpenSetRun([splits.class_names[c] for c in usable], counts, skipped,
                      idx, labels, emb, result)
